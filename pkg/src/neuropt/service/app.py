"""FastAPI application exposing fitting, solving, derivative checking, and
code generation over HTTP.

Validation failures map to 400, staged-solve aborts (an infeasible phase-1
hand-off) to 409; solver non-convergence is a normal 200 response whose
summary carries the status, so clients decide how to treat it.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import cases as cs
from .. import codegen as cg
from .. import learned as ln
from .. import nlpsolve as nl
from .. import symgraph as sg
from . import schemas as sc

_VALIDATION_ERRORS = (
    cs.ScenarioError,
    ln.MlpError,
    ln.FitError,
    nl.ProblemError,
    sg.GraphError,
    sg.EvalError,
    cg.TapeError,
)


def _summary(sol: nl.Solution) -> sc.SolutionSummaryModel:
    return sc.SolutionSummaryModel(
        status=sol.status.value,
        iterations=sol.iterations,
        objective=float(sol.objective_value),
        kkt_error=float(sol.kkt_error),
    )


def _fish_inputs(req_scenario: sc.FishScenarioModel, flow_model):
    fish, flow = cs.fish_scenario_from_dict(req_scenario.model_dump())
    if flow_model is not None:
        flow = ln.mlp_from_dict(flow_model.model_dump(exclude_none=True))
    return fish, flow


def _traj_inputs(req_scenario: sc.TrajScenarioModel, density_model):
    tp, dp = cs.traj_scenario_from_dict(
        req_scenario.model_dump(exclude_none=True)
    )
    density = dp
    if density_model is not None:
        density = ln.mlp_from_dict(density_model.model_dump(exclude_none=True))
    return tp, dp, density


def create_app() -> FastAPI:
    app = FastAPI(
        title="neuropt",
        description="Learned-model NLP solving, fitting, and code generation",
    )

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/fit/flow", response_model=sc.FitResponse)
    def fit_flow(req: sc.FitFlowRequest) -> sc.FitResponse:
        try:
            fish, flow = _fish_inputs(req.scenario, None)
            kwargs = dict(n_samples=req.samples, seed=req.seed, hidden=tuple(req.hidden))
            if req.epochs is not None:
                kwargs["epochs"] = req.epochs
            if req.learning_rate is not None:
                kwargs["learning_rate"] = req.learning_rate
            if req.batch_size is not None:
                kwargs["batch_size"] = req.batch_size
            fit = cs.fit_flow_model(fish, flow, **kwargs)
        except _VALIDATION_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        return sc.FitResponse(
            mlp=sc.MlpModel(**ln.mlp_to_dict(fit.spec)),
            train_mse=fit.train_mse,
            holdout_mse=fit.holdout_mse,
            output_variance=fit.output_variance,
        )

    @app.post("/fit/density", response_model=sc.FitResponse)
    def fit_density(req: sc.FitDensityRequest) -> sc.FitResponse:
        try:
            tp, dp, _ = _traj_inputs(req.scenario, None)
            kwargs = dict(n_samples=req.samples, seed=req.seed, hidden=tuple(req.hidden))
            if req.epochs is not None:
                kwargs["epochs"] = req.epochs
            if req.learning_rate is not None:
                kwargs["learning_rate"] = req.learning_rate
            if req.batch_size is not None:
                kwargs["batch_size"] = req.batch_size
            fit = cs.fit_density_model(tp, dp, **kwargs)
        except _VALIDATION_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        return sc.FitResponse(
            mlp=sc.MlpModel(**ln.mlp_to_dict(fit.spec)),
            train_mse=fit.train_mse,
            holdout_mse=fit.holdout_mse,
            output_variance=fit.output_variance,
        )

    @app.post("/solve/fish", response_model=sc.SolveFishResponse)
    def solve_fish(req: sc.SolveFishRequest) -> sc.SolveFishResponse:
        try:
            fish, flow = _fish_inputs(req.scenario, req.flow)
            problem = cs.build_fish_nlp(fish, flow)
            sol = nl.solve(problem, nl.SolverOptions(tol=req.tol, max_iter=req.max_iter))
        except _VALIDATION_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        _, states, _ = cs.unpack_fish_solution(fish, sol.x)
        margins = np.hypot(states[:, 0], states[:, 1]) - fish.r_stone
        residuals = cs.dynamics_residuals(fish, flow, sol.x)
        return sc.SolveFishResponse(
            summary=_summary(sol),
            csv=cs.fish_trajectory_csv(fish, sol.x),
            dynamics_residual_max=float(residuals.max()),
            obstacle_margin_min=float(margins.min()),
        )

    @app.post("/solve/traj", response_model=sc.SolveTrajResponse)
    def solve_traj(req: sc.SolveTrajRequest) -> sc.SolveTrajResponse:
        try:
            tp, dp, density = _traj_inputs(req.scenario, req.density)
            opts = nl.SolverOptions(tol=req.tol, max_iter=req.max_iter)
            sol1, sol2 = cs.solve_two_phase(tp, density, opts, mu_phase2=req.mu_phase2)
        except cs.TwoPhaseError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from None
        except _VALIDATION_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        coeffs = cs.coefficients_from_solution(tp, sol2.x)
        densities = [
            cs.density_value(density, cs.poly_eval(coeffs, t)) for t in tp.grid
        ]
        return sc.SolveTrajResponse(
            phase1=_summary(sol1),
            phase2=_summary(sol2),
            csv=cs.trajectory_csv(tp, coeffs, density),
            max_density=float(max(densities)),
        )

    @app.post("/check-grad", response_model=sc.CheckGradResponse)
    def check_grad(req: sc.CheckGradRequest) -> sc.CheckGradResponse:
        try:
            spec = ln.mlp_from_dict(req.mlp.model_dump(exclude_none=True))
            passed, worst = ln.check_gradients(
                spec, trials=req.trials, seed=req.seed, rtol=req.tolerance
            )
        except _VALIDATION_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        return sc.CheckGradResponse(passed=passed, max_rel_error=worst, trials=req.trials)

    @app.post("/codegen", response_model=sc.CodegenResponse)
    def codegen(req: sc.CodegenRequest) -> sc.CodegenResponse:
        try:
            spec = ln.mlp_from_dict(req.mlp.model_dump(exclude_none=True))
            if req.x_dim != spec.in_features:
                raise cg.TapeError(
                    f"x_dim {req.x_dim} does not match the model's "
                    f"{spec.in_features} inputs"
                )
            g = sg.ExprGraph()
            x = g.symbol("x", spec.in_features, 1)
            fn = sg.SymFunction([x], [ln.embed_mlp(spec, x)])
            tape = cg.lower(fn)
            source = cg.emit_source(tape, req.function_name) if req.emit_source_text else None
        except _VALIDATION_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        return sc.CodegenResponse(
            ir=cg.emit_ir_text(tape),
            source=source,
            registers=tape.n_registers,
            instructions=len(tape.instructions),
        )

    return app


app = create_app()

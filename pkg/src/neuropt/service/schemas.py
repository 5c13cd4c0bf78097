"""Request/response models for the HTTP surface.

These mirror the on-disk JSON formats (scenario files and the MLP weights
format); deep semantic validation stays in the core modules, which the
endpoint handlers call after structural validation here.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- weights -----------------------------------------------------------------

class MlpLayerModel(_Strict):
    weights: list[list[float]]
    biases: list[float]


class InputScalingModel(_Strict):
    offset: list[float]
    scale: list[float]


class MlpModel(_Strict):
    format: Literal["neuropt-mlp-v1"] = "neuropt-mlp-v1"
    in_features: int
    hidden_activation: str
    output_activation: str
    layers: list[MlpLayerModel]
    input_scaling: Optional[InputScalingModel] = None


# --- scenarios ---------------------------------------------------------------

class VortexModel(_Strict):
    center: list[float]
    circulation: float
    core_radius: float
    drift: list[float]


class FlowFieldModel(_Strict):
    u_inf: list[float] = Field(default_factory=lambda: [0.0, 0.0])
    vortices: list[VortexModel] = Field(default_factory=list)


class FishScenarioModel(_Strict):
    format: Literal["neuropt-fish-v1"] = "neuropt-fish-v1"
    p0: list[float]
    pf: list[float]
    n_steps: int
    dt: float
    u_lo: list[float]
    u_hi: list[float]
    p_lo: list[float]
    p_hi: list[float]
    r_stone: float
    flow: FlowFieldModel = Field(default_factory=FlowFieldModel)


class BlobModel(_Strict):
    center: list[float]
    radius: float
    amplitude: float
    sharpness: float


class DensityFieldModel(_Strict):
    blobs: list[BlobModel] = Field(default_factory=list)


class WaypointModel(_Strict):
    time: float
    point: list[float]


class TrajScenarioModel(_Strict):
    format: Literal["neuropt-traj-v1"] = "neuropt-traj-v1"
    p0: list[float]
    pf: list[float]
    total_time: float
    n_samples: int
    rho_bar: float = 1.0
    waypoints: Optional[list[WaypointModel]] = None
    density: DensityFieldModel = Field(default_factory=DensityFieldModel)


# --- requests / responses ----------------------------------------------------

class FitFlowRequest(_Strict):
    scenario: FishScenarioModel
    samples: int = 5000
    seed: int = 0
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    epochs: Optional[int] = None
    learning_rate: Optional[float] = None
    batch_size: Optional[int] = None


class FitDensityRequest(_Strict):
    scenario: TrajScenarioModel
    samples: int = 5000
    seed: int = 0
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    epochs: Optional[int] = None
    learning_rate: Optional[float] = None
    batch_size: Optional[int] = None


class FitResponse(_Strict):
    mlp: MlpModel
    train_mse: float
    holdout_mse: float
    output_variance: float


class SolutionSummaryModel(_Strict):
    status: str
    iterations: int
    objective: float
    kkt_error: float


class SolveFishRequest(_Strict):
    scenario: FishScenarioModel
    flow: Optional[MlpModel] = None  # omitted -> analytic scenario flow
    tol: float = 1e-8
    max_iter: int = 500


class SolveFishResponse(_Strict):
    summary: SolutionSummaryModel
    csv: str
    dynamics_residual_max: float
    obstacle_margin_min: float


class SolveTrajRequest(_Strict):
    scenario: TrajScenarioModel
    density: Optional[MlpModel] = None  # omitted -> analytic scenario field
    mu_phase2: float = 1e-4
    tol: float = 1e-8
    max_iter: int = 500


class SolveTrajResponse(_Strict):
    phase1: SolutionSummaryModel
    phase2: SolutionSummaryModel
    csv: str
    max_density: float


class CheckGradRequest(_Strict):
    mlp: MlpModel
    trials: int = 100
    seed: int = 0
    tolerance: float = 1e-6


class CheckGradResponse(_Strict):
    passed: bool
    max_rel_error: float
    trials: int


class CodegenRequest(_Strict):
    mlp: MlpModel
    x_dim: int
    function_name: str = "mlp_forward"
    emit_source_text: bool = True


class CodegenResponse(_Strict):
    ir: str
    source: Optional[str]
    registers: int
    instructions: int

"""Case studies: fish navigation in a flow field and minimum-snap
trajectories through a density field, plus the analytic oracles used to
train and validate their learned models."""

from .fish import (
    FishParams,
    FitResult,
    FlowFieldParams,
    ScenarioError,
    VortexSpec,
    analytic_flow,
    build_fish_nlp,
    default_fish_scenario,
    dynamics_residuals,
    fish_dynamics_function,
    fish_scenario_from_dict,
    fish_scenario_to_dict,
    fish_trajectory_csv,
    fit_flow_model,
    flow_value,
    solve_fish,
    unpack_fish_solution,
)
from .minsnap import (
    BlobSpec,
    DensityFieldParams,
    TrajParams,
    TwoPhaseError,
    Waypoint,
    DENSITY_MARGIN,
    analytic_density,
    build_min_snap_nlp,
    coefficients_from_solution,
    default_traj_scenario,
    default_waypoints,
    density_function,
    density_value,
    fit_density_model,
    poly_eval,
    solve_two_phase,
    traj_scenario_from_dict,
    traj_scenario_to_dict,
    traj_scenario_variants,
    trajectory_csv,
)

__all__ = [name for name in dir() if not name.startswith("_")]

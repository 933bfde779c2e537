# flake8: noqa: F401 (re-exports)
from .errors import (
    ConfigError,
    ContingencyError,
    DimensionError,
    GameError,
    MetricError,
    NonFiniteError,
    ObservationError,
    UnknownHypothesisError,
)
from .game import (
    AgentSpec,
    AgentState,
    ControlInput,
    GameSpec,
    SolverResult,
    Trajectory,
    VisibilityModel,
    VisibilitySchedule,
    trajectory_feasibility_residual,
    validate_game_spec,
)
from .nash import NashSolverConfig, kkt_residual, local_nash_check, solve_olne
from .contingency import (
    ContingencyPlan,
    ContingencySpec,
    build_contingency_game,
    select_branch,
    solve_contingency,
)
from .inverse import (
    EstimateResult,
    EstimatorConfig,
    ObservationSequence,
    estimate_game,
    estimate_game_ignorant,
    simulate_observations,
)
from .pipeline import (
    PipelineConfig,
    SimulationTrace,
    World,
    receding_horizon_nash,
    run_pipeline,
    run_pipeline_ignorant,
    run_planning_simulation,
)

try:
    from .version import version as __version__, version_tuple
except ImportError:
    __version__ = "0.0.0-dev"
    version_tuple = (0, 0, 0, "dev")

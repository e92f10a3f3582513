"""Resilient consensus and degree-maintaining CBF-QP control for proximity-graph robot swarms."""

from .consensus import (
    ConsensusConfig,
    ConsensusVerdict,
    check_resilient_consensus,
    linear_consensus_step,
    malicious_broadcast,
    wmsr_step,
)
from .control import (
    CbfWeights,
    ConstraintRow,
    InfeasibleConstraintError,
    InputBox,
    LocalView,
    broadcast_degree_cbf,
    cbf_qp_controller,
    collision_cbf,
    composed_cbf,
    constraint_row,
    degree_cbf,
    local_phi,
    qp_control,
    solve_box_qp,
)
from .graph import (
    AdjacencyParams,
    DegreeStats,
    GraphSizeError,
    GraphSnapshot,
    RobustnessCheck,
    RoleAssignment,
    adjacency_weight,
    adjacency_weight_gradient,
    build_graph,
    connectivity_level,
    connectivity_levels,
    degree_robustness_bound,
    degree_stats,
    is_rs_reachable,
    is_rs_robust,
    read_edge_list,
    required_degree_threshold,
    write_edge_list,
)
from .sim import (
    AttackModel,
    ConfigError,
    DesiredControllerSpec,
    FormationError,
    SimulationError,
    TrajectoryLog,
    WorldConfig,
    WorldState,
    config_from_mapping,
    desired_velocity,
    initial_state,
    initialize_formation,
    run_scenario,
    scenario_config,
    step_world,
)

__version__ = "0.1.0"

"""Steady incompressible flow on networks of parameterized components.

Non-overlapping optimization-based domain decomposition with full-order
stabilized finite elements per component, and component-based reduced
models (POD state/control spaces, pairwise port training, adaptive
enrichment) for fast network solves.
"""

from .geometry import (ArchetypeLabel, GeomParams, NetworkConfig, Network,
                       Port, build_network, attach_downstream, chain_config,
                       branching_config, random_tree_config)
from .mesh import FEMesh, FESpace, make_space, reference_mesh
from .fem import (FlowComponent, SolverError, assemble, newton_solve,
                  instantiate_network, solve_monolithic, reference_lift,
                  rotate_state)
from .ddopt import (NEW, STANDARD, DDProblem, DDResult, ControlLayout,
                    Formulation, GNMDivergenceError, RankDeficiencyError,
                    sqp_solve, gnm_solve, optimize, jump_norms,
                    compare_formulations, h_star_refinement_study)
from .rom import (ReducedBasis, ReducedSolveError, RomLocal, RomSetup, pod,
                  append_orthogonal_modes, rotate_control_basis,
                  instantiate_state_basis, build_test_space,
                  enrich_trial_space, make_rom_locals, rom_dd_solve,
                  eval_errors, eval_port_errors)
from .training import (BoundarySampler, MarkingPolicy, TrainingError,
                       pairwise_port_training, localized_state_training,
                       port_based_state_enrichment, adaptive_enrichment,
                       make_test_set, evaluate_test_set)
from .estimator import NetworkRomEstimator

__version__ = "0.1.0"

__all__ = [
    "ArchetypeLabel", "GeomParams", "NetworkConfig", "Network", "Port",
    "build_network", "attach_downstream", "chain_config", "branching_config",
    "random_tree_config",
    "FEMesh", "FESpace", "make_space", "reference_mesh",
    "FlowComponent", "SolverError", "assemble", "newton_solve",
    "instantiate_network", "solve_monolithic", "reference_lift",
    "rotate_state",
    "NEW", "STANDARD", "DDProblem", "DDResult", "ControlLayout",
    "Formulation", "GNMDivergenceError", "RankDeficiencyError",
    "sqp_solve", "gnm_solve", "optimize", "jump_norms",
    "compare_formulations", "h_star_refinement_study",
    "ReducedBasis", "ReducedSolveError", "RomLocal", "RomSetup", "pod",
    "append_orthogonal_modes", "rotate_control_basis",
    "instantiate_state_basis", "build_test_space", "enrich_trial_space",
    "make_rom_locals", "rom_dd_solve", "eval_errors", "eval_port_errors",
    "BoundarySampler", "MarkingPolicy", "TrainingError",
    "pairwise_port_training", "localized_state_training",
    "port_based_state_enrichment", "adaptive_enrichment", "make_test_set",
    "evaluate_test_set",
    "NetworkRomEstimator",
    "__version__",
]

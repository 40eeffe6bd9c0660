"""Internal DLA on cylinder graphs ``G x Z``: simulation, couplings and experiments."""

__version__ = "0.1.0"

from .graphs import (BaseGraph, GraphError, MixingProfile, TransitionPowers, build_graph,
                     graph_for_size, lazy_transition_matrix, load_edge_list, mixing_time,
                     quasi_regularity, stationary_distribution, tv_distance)
from .walk import CylinderSite, WalkMode, WalkState, hit_level, walk_step, walk_until_exit
from .cluster import (ClusterState, ClusterStats, comb_cluster, idla_step, new_cluster,
                      run_process, shifted_step)
from .abelian import (InstructionStacks, Odometer, ParticleConfig, idla_via_stacks, stabilize,
                      topple)
from .coupling import (CouplingOutcome, SkeletonProcess, coupled_idla_pair,
                       level_crossing_coupled_pair, maximal_coupling_sample,
                       mismatched_start_alignment, water_level_run)
from .experiments import ExperimentRecord, ExperimentSpec, run, scaling_fit, stationary_sampler

__all__ = [
    "BaseGraph", "GraphError", "MixingProfile", "TransitionPowers", "build_graph", "graph_for_size",
    "lazy_transition_matrix", "load_edge_list", "mixing_time", "quasi_regularity",
    "stationary_distribution", "tv_distance", "CylinderSite", "WalkMode", "WalkState", "hit_level",
    "walk_step", "walk_until_exit", "ClusterState", "ClusterStats", "comb_cluster", "idla_step",
    "new_cluster", "run_process", "shifted_step", "InstructionStacks", "Odometer", "ParticleConfig",
    "idla_via_stacks", "stabilize", "topple", "CouplingOutcome", "SkeletonProcess",
    "coupled_idla_pair", "level_crossing_coupled_pair", "maximal_coupling_sample",
    "mismatched_start_alignment", "water_level_run", "ExperimentRecord", "ExperimentSpec", "run",
    "scaling_fit", "stationary_sampler",
]

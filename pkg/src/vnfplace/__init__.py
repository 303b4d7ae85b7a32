"""Joint VNF placement and CPU allocation for latency-bound services.

Placement heuristics (relaxation-guided MaxZ, greedy packing, affinity
co-location, exhaustive search), min-max delay CPU allocation and a
discrete-event simulator to cross-check the queueing formulas.
"""

from .allocation import AllocationResult, allocate, full_load_solve, optimize_allocation
from .baselines import affinity_place, brute_force, greedy_place
from .maxz import run_maxz
from .model import (CpuAllocation, Host, InfeasibleError, InvalidInstance, LinkMatrix, Placement, ProblemInstance,
                    ServiceClass, ValidatedInstance, VnfQueue, validate_instance)
from .traffic import class_delays, solve_traffic

__all__ = [
    "AllocationResult", "CpuAllocation", "Host", "InfeasibleError", "InvalidInstance", "LinkMatrix", "Placement",
    "ProblemInstance", "ServiceClass", "ValidatedInstance", "VnfQueue", "affinity_place", "allocate",
    "brute_force", "class_delays", "full_load_solve", "greedy_place", "optimize_allocation", "run_maxz",
    "solve_traffic", "validate_instance",
]

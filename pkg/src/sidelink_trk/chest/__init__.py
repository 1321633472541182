from .estimator import (CpdResult, IllConditionedGram, PathEstimateSet, SaConfig, augment,
                        augment_index, cpd_als, estimate, estimate_angles, estimate_delays,
                        extract_params, gain_floor, phase_slope_delay, select_rank)
from .kernels import BACKEND, available_backends

__all__ = [
    "BACKEND", "CpdResult", "IllConditionedGram", "PathEstimateSet", "SaConfig", "augment",
    "augment_index", "available_backends", "cpd_als", "estimate", "estimate_angles",
    "estimate_delays", "extract_params", "gain_floor", "phase_slope_delay", "select_rank",
]

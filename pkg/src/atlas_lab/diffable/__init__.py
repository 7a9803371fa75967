from .checkpoint import load_checkpoint, save_checkpoint
from .optim import AdamState, LRSchedule, StableAdamW, adamw_step
from .primitives import REGISTRY, NonFiniteError, assert_finite, grad_check, grad_check_all

__all__ = [
    "AdamState",
    "LRSchedule",
    "NonFiniteError",
    "REGISTRY",
    "StableAdamW",
    "adamw_step",
    "assert_finite",
    "grad_check",
    "grad_check_all",
    "load_checkpoint",
    "save_checkpoint",
]

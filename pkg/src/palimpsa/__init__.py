"""Dual-state fast-weight memory with importance-weighted blending.

Public surface re-exports the step rules, the chunk-parallel scan, the
variational objective helpers, the hand-rolled reverse-mode pass, and the
recall benchmark harness.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DomainError, NumericError, PalimpsaError, RuleContractError
from .types import DualState, HeadParams, MesaState, RuleKind, ScanOutputs, StepInput
from .rules import (
    INFINITE_WINDOW,
    alpha_from_step,
    deltanet_step,
    gated_deltanet_step,
    longhorn_step,
    mamba2_limit_step,
    memory_window,
    mesa_step,
    palimpsa_step,
    readout,
    sequential_scan,
)

__all__ = [
    "ConfigError",
    "DomainError",
    "DualState",
    "HeadParams",
    "INFINITE_WINDOW",
    "MesaState",
    "NumericError",
    "PalimpsaError",
    "RuleContractError",
    "RuleKind",
    "ScanOutputs",
    "StepInput",
    "alpha_from_step",
    "deltanet_step",
    "gated_deltanet_step",
    "longhorn_step",
    "mamba2_limit_step",
    "memory_window",
    "mesa_step",
    "palimpsa_step",
    "readout",
    "sequential_scan",
    "__version__",
]

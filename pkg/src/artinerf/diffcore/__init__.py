"""Reverse-mode differentiation engine, optimizer, and verification tools."""

from . import tensor
from .adam import AdamState, adam_update
from .checkpoint import (CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CheckpointError,
                         read_blocks, write_blocks)
from .gradcheck import (OP_CHECKS, GradCheckReport, gradient_check,
                        run_registry_checks)
from .mlp import MLPSpec, build_mlp_params, mlp_forward
from .params import Parameter, ParamStore, forward_backward
from .tensor import (ContractError, NumericError, Tensor, as_tensor, const,
                     no_grad)

__all__ = [
    "tensor", "Tensor", "as_tensor", "const", "no_grad",
    "ContractError", "NumericError",
    "Parameter", "ParamStore", "forward_backward",
    "AdamState", "adam_update",
    "MLPSpec", "build_mlp_params", "mlp_forward",
    "gradient_check", "GradCheckReport", "OP_CHECKS", "run_registry_checks",
    "write_blocks", "read_blocks", "CheckpointError",
    "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION",
]

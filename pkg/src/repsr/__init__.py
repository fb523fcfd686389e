"""Train multi-branch RepSR super-resolution networks and collapse them into plain 3x3 conv stacks."""
from .block import BlockParams, BlockSpec, BnPlacement, Residual, block_forward, build_block
from .model import Form, Model, ModelSpec, build_model, count_params_flops, model_forward
from .nn import BnMode, BnParams, ConvParams
from .reparam import collapse_block, collapse_model, verify_equivalence
from .weights import load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "BlockParams", "BlockSpec", "BnMode", "BnParams", "BnPlacement", "ConvParams", "Form", "Model",
    "ModelSpec", "Residual", "block_forward", "build_block", "build_model", "collapse_block",
    "collapse_model", "count_params_flops", "load_model", "model_forward", "save_model",
    "verify_equivalence",
]

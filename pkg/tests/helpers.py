"""Shared test utilities."""
from repsr.nn import BnMode


def randomize_bn(model_or_block, rng, mode=BnMode.INFERENCE):
    """Give every BN layer non-trivial statistics/affine terms and a population-stat mode."""
    for _, bn in model_or_block.bn_layers():
        c = bn.channels
        bn.gamma[:] = rng.uniform(0.5, 1.5, c)
        bn.beta[:] = rng.normal(0, 0.2, c)
        bn.running_mean[:] = rng.normal(0, 0.2, c)
        bn.running_var[:] = rng.uniform(0.5, 2.0, c)
        bn.mode = mode


def randomize_biases(model_or_block, rng, std=0.1):
    for name, arr, _ in model_or_block.named_tensors():
        if name.endswith("bias"):
            arr[:] = rng.normal(0, std, arr.shape)

"""Central finite differences for gradient checks."""
from contextlib import contextmanager

import torch
from torch import nn


def fd_grad(fn, x: torch.Tensor, h: float = 1e-5, coords=None) -> torch.Tensor:
    """d fn / d x by central differences, optionally only at flat indices ``coords``."""
    flat = x.detach().reshape(-1)
    idx = range(flat.numel()) if coords is None else coords
    out = torch.zeros(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for j, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn())
            flat[i] = orig - h
            fm = float(fn())
            flat[i] = orig
            out[j] = (fp - fm) / (2 * h)
    return out


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.reshape(-1).double(), b.reshape(-1).double()
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


@contextmanager
def frozen_relu_masks(*models):
    """Pin every ReLU to the on/off pattern of the first forward pass inside the block.

    The analytic gradient of a ReLU network is the derivative of the linear
    piece it sits on; central differences that straddle a kink measure
    something else. Replaying the recorded masks keeps the perturbed
    evaluations on the same piece, so the comparison isolates real gradient
    errors from kink crossings.
    """
    masks, handles = {}, []

    def hook(module, inputs, output):
        x = inputs[0]
        if module not in masks:
            masks[module] = (x > 0).to(x.dtype)
        return x * masks[module]

    for m in models:
        for sub in m.modules():
            if isinstance(sub, nn.ReLU):
                handles.append(sub.register_forward_hook(hook))
    try:
        yield
    finally:
        for h in handles:
            h.remove()

"""The rPPG estimator (temporal-derivative network) and the pulse-signal magnifier (3D U-Net).

Tensors are laid out (B, C, T, H, W). Clips at the API boundary are
:class:`VideoClip` objects holding (T, H, W, 3) arrays.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError
from .signal import PulseSignal


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3)
    fps: float = 30.0

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ShapeError(f"clip must be T x H x W x 3, got {f.shape}")
        if f.shape[0] < 1 or f.shape[1] < 8 or f.shape[2] < 8:
            raise ShapeError(f"clip needs T >= 1 and H, W >= 8, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("clip contains non-finite values")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", f)

    @property
    def shape(self):
        return self.frames.shape

    def __len__(self):
        return self.frames.shape[0]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        """(1, 3, T, H, W) view for the networks."""
        return torch.from_numpy(np.ascontiguousarray(self.frames)).to(dtype).permute(3, 0, 1, 2).unsqueeze(0)

    @classmethod
    def from_tensor(cls, x: torch.Tensor, fps: float):
        return cls(x.detach().squeeze(0).permute(1, 2, 3, 0).cpu().numpy(), fps)


class MagnifiedClip(VideoClip):
    """Magnifier output; same shape as its source, values are not clamped."""

    def clamped(self) -> VideoClip:
        return VideoClip(np.clip(self.frames, 0.0, 1.0), self.fps)


def temporal_diff(x: torch.Tensor) -> torch.Tensor:
    """x[t+1] - x[t] along dim 2, zero-padded at the end."""
    d = x[:, :, 1:] - x[:, :, :-1]
    return F.pad(d, (0, 0, 0, 0, 0, 1))


class TDM(nn.Module):
    """rPPG estimator built from temporal derivatives of order 0..orders-1.

    Each derivative order runs through its own two-layer 3D conv stack; the
    stacks are mixed by learnable scalar coefficients (a truncated Taylor-style
    sum), pooled over space, and a temporal conv head emits one value per
    frame. The output is centered per clip but not rescaled, so the MSE
    objective sees its scale.
    """

    kind = "tdm"

    def __init__(self, size: int = 96, stem_pool: int = 4, widths=(8, 16), orders: int = 3, head_kernel: int = 5):
        super().__init__()
        if size % stem_pool:
            raise ShapeError(f"input size {size} not divisible by stem_pool {stem_pool}")
        self.config = dict(size=size, stem_pool=stem_pool, widths=list(widths), orders=orders, head_kernel=head_kernel)
        self.size, self.stem_pool, self.orders = size, stem_pool, orders
        self.branches = nn.ModuleList()
        for _ in range(orders):
            layers, cin = [], 3
            for w in widths:
                layers += [nn.Conv3d(cin, w, 3, padding=1, padding_mode="replicate"), nn.ReLU()]
                cin = w
            self.branches.append(nn.Sequential(*layers))
        self.coeffs = nn.Parameter(torch.ones(orders))
        self.head_kernel = head_kernel
        self.head = nn.Conv1d(widths[-1], 1, head_kernel)
        self.frozen = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != 3 or x.shape[-2:] != (self.size, self.size):
            raise ShapeError(f"TDM expects (B, 3, T, {self.size}, {self.size}), got {tuple(x.shape)}")
        if self.stem_pool > 1:
            x = F.avg_pool3d(x, (1, self.stem_pool, self.stem_pool))
        feats, d = 0, x
        for i, branch in enumerate(self.branches):
            if i:
                d = temporal_diff(d)
            feats = feats + self.coeffs[i] * branch(d)
        z = feats.mean(dim=(-2, -1))  # (B, C, T)
        half = self.head_kernel // 2
        z = F.pad(z, (half, self.head_kernel - 1 - half), mode="replicate")
        y = self.head(z).squeeze(1)
        return y - y.mean(dim=-1, keepdim=True)


class _ConvBlock(nn.Sequential):
    # conv -> ReLU -> instance norm, in that order
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv3d(cin, cout, 3, padding=1),
            nn.ReLU(),
            nn.InstanceNorm3d(cout, affine=True),
        )


class PSMN(nn.Module):
    """3D U-Net mapping a clip to a same-shaped clip in which the pulse is amplified.

    Pooling and upsampling act on space only so the time axis keeps its length.
    The network predicts an additive residual; the residual head is zero at
    initialisation, so a fresh model is the identity map. ``residual_scale``
    is a fixed gain on that residual, kept small because the pulse is a
    fraction of a gray level while one optimizer step on the head moves
    pixels by roughly the learning rate times its fan-in.
    """

    kind = "psmn"

    def __init__(self, widths=(16, 32, 64), residual_scale: float = 1e-3):
        super().__init__()
        self.config = dict(widths=list(widths), residual_scale=residual_scale)
        self.residual_scale = residual_scale
        self.levels = len(widths)
        self.enc = nn.ModuleList()
        cin = 3
        for w in widths:
            self.enc.append(_ConvBlock(cin, w))
            cin = w
        self.bottleneck = nn.Sequential(_ConvBlock(widths[-1], widths[-1]), _ConvBlock(widths[-1], widths[-1]))
        self.dec = nn.ModuleList()
        cin = widths[-1]
        outs = list(widths[-2::-1]) + [widths[0]]
        for skip, cout in zip(reversed(widths), outs):
            self.dec.append(_ConvBlock(cin + skip, cout))
            cin = cout
        self.residual = nn.Conv3d(cin, 3, 3, padding=1)
        nn.init.zeros_(self.residual.weight)
        nn.init.zeros_(self.residual.bias)
        self.frozen = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        div = 2 ** self.levels
        if x.dim() != 5 or x.shape[1] != 3 or x.shape[-1] % div or x.shape[-2] % div:
            raise ShapeError(f"PSMN needs (B, 3, T, H, W) with H and W divisible by {div}, got {tuple(x.shape)}")
        skips, h = [], x.contiguous(memory_format=torch.channels_last_3d)
        for block in self.enc:
            h = block(h)
            skips.append(h)
            h = F.avg_pool3d(h, (1, 2, 2))
        h = self.bottleneck(h)
        for block, skip in zip(self.dec, reversed(skips)):
            h = F.interpolate(h, scale_factor=(1, 2, 2), mode="nearest")
            h = block(torch.cat([h, skip], dim=1))
        return x + self.residual_scale * self.residual(h)


def _seeded(factory, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def init_tdm(seed: int = 0, **config) -> TDM:
    return _seeded(lambda: TDM(**config), seed)


def init_psmn(seed: int = 0, **config) -> PSMN:
    return _seeded(lambda: PSMN(**config), seed)


def freeze(model: nn.Module) -> nn.Module:
    model.requires_grad_(False)
    model.frozen = True
    return model


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def param_hash(model: nn.Module) -> str:
    """sha256 over parameter names and their float64 bytes."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().to(torch.float64).contiguous().numpy().tobytes())
    return h.hexdigest()


def config_hash(model: nn.Module) -> str:
    doc = json.dumps({"kind": model.kind, **model.config}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _dtype_of(model: nn.Module):
    return next(model.parameters()).dtype


def tdm_forward(theta: TDM, clip: VideoClip) -> PulseSignal:
    with torch.no_grad():
        y = theta(clip.tensor(_dtype_of(theta)))
    return PulseSignal(y[0].double().numpy(), clip.fps)


def psmn_forward(psi: PSMN, clip: VideoClip) -> MagnifiedClip:
    with torch.no_grad():
        m = psi(clip.tensor(_dtype_of(psi)))
    return MagnifiedClip.from_tensor(m, clip.fps)


def pipeline_forward(theta: TDM, psi: PSMN, clip: VideoClip) -> PulseSignal:
    with torch.no_grad():
        y = theta(psi(clip.tensor(_dtype_of(psi))).to(_dtype_of(theta)))
    return PulseSignal(y[0].double().numpy(), clip.fps)

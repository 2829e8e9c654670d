"""Training objectives: shift-tolerant temporal loss, spectral cross-entropy, and their sum.

All losses take torch tensors shaped (T,) or (B, T) so they can sit inside a
training graph; the PulseSignal wrappers in :mod:`pulsemag.signal` are only for
inspection.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
from torch import nn

from .errors import ConfigError, UnknownSubjectError
from .signal import DEFAULT_GRID, FrequencyGrid, dft_power, valid_slices

DEFAULT_OFFSETS = tuple(range(-15, 16))


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01
    grid: FrequencyGrid = field(default_factory=FrequencyGrid)
    epsilon: float = 1e-8
    use_temp: bool = True
    use_freq: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")


class ShiftDistribution(nn.Module):
    """Per-subject softmax distribution over integer frame offsets.

    Logits start at zero, i.e. uniform over the offsets.
    """

    def __init__(self, subjects: Iterable[str], offsets: Sequence[int] = DEFAULT_OFFSETS, dtype=torch.float32):
        super().__init__()
        offsets = tuple(int(k) for k in offsets)
        if 0 not in offsets or sorted(offsets) != sorted(-k for k in offsets):
            raise ConfigError(f"offsets must be symmetric around 0 and contain 0: {offsets}")
        if len(set(offsets)) != len(offsets):
            raise ConfigError("offsets must be distinct")
        self.offsets = tuple(sorted(offsets))
        self.subjects = list(dict.fromkeys(str(s) for s in subjects))
        self._index = {s: i for i, s in enumerate(self.subjects)}
        self.logits = nn.Parameter(torch.zeros(len(self.subjects), len(self.offsets), dtype=dtype))

    def index(self, subject) -> int:
        try:
            return self._index[str(subject)]
        except KeyError:
            raise UnknownSubjectError(f"subject {subject!r} not registered in shift distribution") from None

    def probabilities(self, subject) -> torch.Tensor:
        return torch.softmax(self.logits[self.index(subject)], dim=-1)

    def state(self) -> dict:
        """JSON-friendly snapshot ``{offsets, logits: {subject: [...]}}``."""
        rows = self.logits.detach().double().tolist()
        return {"offsets": list(self.offsets), "logits": {s: rows[i] for i, s in enumerate(self.subjects)}}

    @classmethod
    def from_state(cls, state: dict, dtype=torch.float32) -> "ShiftDistribution":
        dist = cls(state["logits"].keys(), state["offsets"], dtype=dtype)
        with torch.no_grad():
            for s, row in state["logits"].items():
                dist.logits[dist.index(s)] = torch.tensor(row, dtype=torch.float64).to(dtype)
        return dist


def shift_probabilities(dist: ShiftDistribution, subject) -> torch.Tensor:
    return dist.probabilities(subject)


def shifted_mse(pred: torch.Tensor, gt: torch.Tensor, k: int) -> torch.Tensor:
    """MSE between pred[t] and gt[t - k] over the frames where both exist."""
    p_idx, g_idx = valid_slices(pred.shape[-1], k)
    return ((pred[..., p_idx] - gt[..., g_idx]) ** 2).mean(dim=-1)


def _check_pair(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"pred and gt lengths differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")


def talos_loss(pred: torch.Tensor, gt: torch.Tensor, dist: ShiftDistribution, subject) -> torch.Tensor:
    """Expected shifted MSE under the subject's offset distribution.

    ``pred``/``gt`` are (T,) or (B, T); for a batch, ``subject`` is a sequence
    of B ids and the per-item losses are averaged.
    """
    _check_pair(pred, gt)
    n = pred.shape[-1]
    if max(abs(k) for k in dist.offsets) * 4 >= n:
        raise ValueError(f"max |offset| must be below T/4 (T={n})")
    per_k = torch.stack([shifted_mse(pred, gt, k) for k in dist.offsets], dim=-1)
    if pred.dim() == 1:
        probs = dist.probabilities(subject)
    else:
        subjects = [subject] * pred.shape[0] if isinstance(subject, str) else list(subject)
        probs = torch.stack([dist.probabilities(s) for s in subjects])
    return (per_k * probs.to(per_k.dtype)).sum(dim=-1).mean()


def freq_loss(pred: torch.Tensor, hr_gt, fs: float, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Cross-entropy of the normalised band power against a one-hot HR bin."""
    grid = cfg.grid
    hrs = [hr_gt] if pred.dim() == 1 else list(torch.as_tensor(hr_gt, dtype=torch.float64).reshape(-1).tolist())
    target = torch.tensor([grid.bin_index(float(h)) for h in hrs])
    power = dft_power(pred, fs, grid).reshape(len(hrs), -1) + cfg.epsilon
    logp = torch.log(power) - torch.log(power.sum(dim=-1, keepdim=True))
    return -logp.gather(1, target[:, None]).mean()


def combined_loss(pred, gt, hr_gt, dist, subject, fs: float, cfg: LossConfig = LossConfig()):
    """Temporal loss plus ``cfg.lam`` times the frequency loss.

    Returns ``(total, temp, freq)``; a disabled term contributes an exact zero.
    """
    zero = pred.new_zeros(())
    temp = talos_loss(pred, gt, dist, subject) if cfg.use_temp else zero
    freq = freq_loss(pred, hr_gt, fs, cfg) if cfg.use_freq else zero
    return temp + cfg.lam * freq, temp, freq

"""Window -> model-input features: patching, spectra, instance normalization.

Each channel of a 12 s window is cut into N patches of P samples with
stride S; the signal is first extended by repeating its final value S
times, which makes the patch count exactly floor((L - P) / S) + 2. Every
patch becomes a log-amplitude spectrum, and each channel's N x F block is
standardized to zero mean and unit population variance within the window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import Tensor, rfft_amplitude
from .signal_io import CANONICAL_RATE_HZ, WINDOW_SECONDS, Window

_CONSTANT_STD_FLOOR = 1e-9


@dataclass(frozen=True)
class PatchConfig:
    """Patch geometry and spectral-feature options."""

    patch_len: int = 256
    stride: int = 256
    log_eps: float = 1e-6

    def __post_init__(self):
        p, s = self.patch_len, self.stride
        if p < 2 or p & (p - 1):
            raise ConfigError(f"patch length must be a power of two, got {p}")
        if not 1 <= s <= p:
            raise ConfigError(f"stride must satisfy 1 <= S <= P, got S={s} P={p}")
        if self.log_eps <= 0:
            raise ConfigError("log epsilon must be positive")

    @property
    def feature_dim(self) -> int:
        return self.patch_len // 2

    def patch_count(self, signal_len: int) -> int:
        if signal_len < self.patch_len:
            raise ConfigError(
                f"signal length {signal_len} shorter than patch length "
                f"{self.patch_len}")
        return (signal_len - self.patch_len) // self.stride + 2


@dataclass
class FeatureTensor:
    """Normalized C x N x F features plus the per-channel stats removed."""

    values: Tensor
    norm_mean: Tensor
    norm_std: Tensor

    @property
    def patch_count(self) -> int:
        return self.values.shape[1]

    @property
    def channel_count(self) -> int:
        return self.values.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[2]


def patch(signal, cfg: PatchConfig) -> np.ndarray:
    """Slice a C x L signal into C x N x P patches (end-replication padded)."""
    data = signal.data if isinstance(signal, Tensor) else np.asarray(signal)
    if data.ndim != 2:
        raise DimensionError(f"expected C x L signal, got shape {data.shape}")
    c, length = data.shape
    n = cfg.patch_count(length)
    padded = np.concatenate(
        [data, np.repeat(data[:, -1:], cfg.stride, axis=1)], axis=1)
    return np.stack(
        [padded[:, i * cfg.stride:i * cfg.stride + cfg.patch_len]
         for i in range(n)], axis=1)


def featurize(win: Window, cfg: PatchConfig = PatchConfig()) -> FeatureTensor:
    """Per-patch log-amplitude spectra, instance-normalized per channel.

    Channels whose features are constant (population std below 1e-9) map to
    all zeros instead of dividing by ~0.
    """
    patches = patch(win.samples, cfg)
    feats = np.log(rfft_amplitude(patches) + cfg.log_eps)
    c = feats.shape[0]
    flat = feats.reshape(c, -1)
    mean = flat.mean(axis=1)
    std = np.sqrt(((flat - mean[:, None]) ** 2).mean(axis=1))
    normed = np.zeros_like(feats)
    live = std >= _CONSTANT_STD_FLOOR
    if live.any():
        normed[live] = ((feats[live] - mean[live, None, None])
                        / std[live, None, None])
    return FeatureTensor(Tensor(normed), Tensor(mean), Tensor(std))


def patch_time_span(patch_index: int, cfg: PatchConfig,
                    window_len: int = int(WINDOW_SECONDS * CANONICAL_RATE_HZ)
                    ) -> tuple[float, float]:
    """Seconds covered by one patch, clamped to the window end."""
    n = cfg.patch_count(window_len)
    if not 0 <= patch_index < n:
        raise ConfigError(f"patch index {patch_index} out of range [0, {n})")
    start = patch_index * cfg.stride / CANONICAL_RATE_HZ
    end = min(start + cfg.patch_len / CANONICAL_RATE_HZ,
              window_len / CANONICAL_RATE_HZ)
    return start, end


def stack_features(features: list[FeatureTensor]) -> np.ndarray:
    """Batch B feature tensors into one B x C x N x F array."""
    if not features:
        raise ConfigError("cannot stack an empty feature list")
    return np.stack([f.values.data for f in features])

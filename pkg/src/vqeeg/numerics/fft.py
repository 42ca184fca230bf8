"""Radix-2 iterative FFT and the one-sided amplitude spectrum.

Frame lengths are restricted to powers of two. The transform is vectorized
over leading axes so a whole (channels x patches x samples) block runs in
one call.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor


def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def fft_pow2(signal: np.ndarray) -> np.ndarray:
    """Complex DFT of the last axis. Length must be a power of two."""
    n = signal.shape[-1]
    if n < 2 or n & (n - 1):
        raise ConfigError(f"FFT frame length must be a power of two >= 2, got {n}")
    a = np.asarray(signal, dtype=np.complex128)[..., _bit_reversal(n)]
    lead = a.shape[:-1]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        a = a.reshape(lead + (n // size, size))
        even = a[..., :half]
        odd = a[..., half:] * twiddle
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return a


def rfft_amplitude(frame):
    """One-sided amplitude spectrum |DFT(frame)| for DFT bins 1..P/2.

    The DC bin is dropped, so a length-P frame yields P/2 magnitudes
    (index i holds bin i+1). Accepts an ndarray or Tensor with the frame
    axis last and returns the matching kind. Unnormalized magnitudes; not
    differentiable (preprocessing only).
    """
    is_tensor = isinstance(frame, Tensor)
    data = frame.data if is_tensor else np.asarray(frame, dtype=np.float64)
    n = data.shape[-1]
    if n % 2:
        raise ConfigError(f"frame length must be even, got {n}")
    amp = np.abs(fft_pow2(data)[..., 1:n // 2 + 1])
    return Tensor(amp) if is_tensor else amp

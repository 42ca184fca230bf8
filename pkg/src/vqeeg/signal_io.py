"""Signal-record file format, resampling, windowing, and synthetic data.

Record files are little-endian:

    magic "EEGR" (4 B) | format version u16 = 1 | channel count C u16 |
    sample rate u32 | sample count T u64 |
    C label entries (u8 length + UTF-8 bytes) |
    C x T float32 samples, channel-major

Samples are stored as float32, so SignalRecord quantizes its samples to
float32 precision at construction; every valid record then survives a
write/read round trip bitwise.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .numerics import Rng, Tensor

MAGIC = b"EEGR"
FORMAT_VERSION = 1
CANONICAL_RATE_HZ = 250
WINDOW_SECONDS = 12.0
WINDOW_SAMPLES = int(WINDOW_SECONDS * CANONICAL_RATE_HZ)  # 3000

# Standard 10-20 scalp montage, 19 electrodes.
MONTAGE_10_20 = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8",
    "T3", "C3", "Cz", "C4", "T4",
    "T5", "P3", "Pz", "P4", "T6",
    "O1", "O2",
]


def standard_channel_labels(count: int) -> list[str]:
    """10-20 labels for count <= 19, synthetic ch## labels beyond."""
    if count <= len(MONTAGE_10_20):
        return MONTAGE_10_20[:count]
    extra = [f"ch{i:02d}" for i in range(len(MONTAGE_10_20), count)]
    return MONTAGE_10_20 + extra


@dataclass
class SignalRecord:
    """Raw multivariate recording: C channels by T samples, microvolts."""

    channel_labels: list[str]
    sample_rate_hz: int
    samples: Tensor

    def __post_init__(self):
        if not isinstance(self.samples, Tensor):
            self.samples = Tensor(np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 2:
            raise ConfigError(f"samples must be C x T, got shape {self.samples.shape}")
        c, t = self.samples.shape
        if c < 1 or t < 1:
            raise ConfigError("record needs at least one channel and one sample")
        if len(self.channel_labels) != c:
            raise ConfigError(
                f"{len(self.channel_labels)} labels for {c} channels")
        if len(set(self.channel_labels)) != c:
            raise ConfigError("channel labels must be unique")
        if int(self.sample_rate_hz) < 1:
            raise ConfigError(f"sample rate must be >= 1 Hz, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)
        # float32 is the storage precision; quantize now so round trips are exact
        self.samples = Tensor(self.samples.data.astype(np.float32).astype(np.float64))

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def sample_count(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.sample_count / self.sample_rate_hz


@dataclass
class Window:
    """Fixed 12-second clip at 250 Hz, optionally labeled and masked."""

    record_id: str
    samples: Tensor
    label: int | None = None
    localization_mask: np.ndarray | None = None  # bool C x L, synthetic truth

    def __post_init__(self):
        if not isinstance(self.samples, Tensor):
            self.samples = Tensor(np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 2 or self.samples.shape[1] != WINDOW_SAMPLES:
            raise ConfigError(
                f"window must be C x {WINDOW_SAMPLES}, got {self.samples.shape}")
        if self.localization_mask is not None:
            mask = np.asarray(self.localization_mask, dtype=bool)
            if mask.shape != self.samples.shape:
                raise ConfigError("mask shape must match samples")
            self.localization_mask = mask

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]


def _read_exact(buf: io.BufferedReader, n: int, what: str) -> bytes:
    offset = buf.tell()
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(data)}",
                          offset=offset)
    return data


def write_record(rec: SignalRecord, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HHIQ", FORMAT_VERSION, rec.channel_count,
                            rec.sample_rate_hz, rec.sample_count))
        for label in rec.channel_labels:
            encoded = label.encode("utf-8")
            if len(encoded) > 255:
                raise ConfigError(f"channel label too long: {label!r}")
            f.write(struct.pack("<B", len(encoded)))
            f.write(encoded)
        f.write(rec.samples.data.astype("<f4").tobytes())


def read_record(path) -> SignalRecord:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0)
        header = _read_exact(f, 16, "header")
        version, channels, rate, count = struct.unpack("<HHIQ", header)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}", offset=4)
        if channels < 1:
            raise FormatError("zero channels", offset=6)
        if rate < 1:
            raise FormatError("zero sample rate", offset=8)
        if count < 1:
            raise FormatError("zero samples", offset=12)
        labels = []
        for _ in range(channels):
            (length,) = struct.unpack("<B", _read_exact(f, 1, "label length"))
            labels.append(_read_exact(f, length, "label").decode("utf-8"))
        payload_offset = f.tell()
        payload = _read_exact(f, 4 * channels * count, "sample payload")
        flat = np.frombuffer(payload, dtype="<f4")
        bad = np.flatnonzero(~np.isfinite(flat))
        if bad.size:
            raise FormatError("non-finite sample value",
                              offset=payload_offset + 4 * int(bad[0]))
        samples = flat.astype(np.float64).reshape(channels, count)
    return SignalRecord(labels, rate, Tensor(samples))


def header_size(channel_labels: list[str]) -> int:
    """Byte length of everything before the float32 payload."""
    return 20 + sum(1 + len(label.encode("utf-8")) for label in channel_labels)


def resample(rec: SignalRecord, target_hz: int = CANONICAL_RATE_HZ) -> SignalRecord:
    """Linear-interpolation resampling to target_hz.

    Output length is floor(T * target / source); equal rates return a copy.
    """
    if target_hz <= 0:
        raise ConfigError(f"target rate must be positive, got {target_hz}")
    if rec.sample_rate_hz == target_hz:
        return SignalRecord(list(rec.channel_labels), target_hz,
                            Tensor(rec.samples.data.copy()))
    t = rec.sample_count
    out_len = int(np.floor(t * target_hz / rec.sample_rate_hz))
    if out_len < 1:
        raise ConfigError("record too short to resample at the target rate")
    positions = np.arange(out_len) * (rec.sample_rate_hz / target_hz)
    source = np.arange(t)
    out = np.stack([np.interp(positions, source, ch) for ch in rec.samples.data])
    return SignalRecord(list(rec.channel_labels), target_hz, Tensor(out))


def window(rec: SignalRecord, overlap_s: float = 0.0,
           record_id: str = "rec") -> list[Window]:
    """Consecutive 12 s windows; the trailing remainder is dropped."""
    if rec.sample_rate_hz != CANONICAL_RATE_HZ:
        raise ConfigError(
            f"windowing requires {CANONICAL_RATE_HZ} Hz input, "
            f"got {rec.sample_rate_hz} Hz (resample first)")
    if not 0.0 <= overlap_s < WINDOW_SECONDS:
        raise ConfigError(f"overlap must be in [0, {WINDOW_SECONDS}) s")
    stride = int(round((WINDOW_SECONDS - overlap_s) * CANONICAL_RATE_HZ))
    out = []
    start = 0
    index = 0
    while start + WINDOW_SAMPLES <= rec.sample_count:
        clip = rec.samples.data[:, start:start + WINDOW_SAMPLES]
        out.append(Window(f"{record_id}-w{index:04d}", Tensor(clip.copy())))
        start += stride
        index += 1
    return out


@dataclass
class SynthSpec:
    """Parameters for the planted-burst synthetic corpus.

    Class 0 windows are background only (band-limited sinusoid mixture plus
    pink noise); class 1 windows add a spike-and-wave burst at burst_hz on a
    random channel subset, with a ground-truth sample mask.
    """

    channel_count: int = 19
    windows_per_class: int = 32
    seed: int = 0
    background_rms: float = 30.0          # microvolts, approximate target
    noise_scale: float = 1.0              # pink + white noise multiplier
    burst_hz: float = 3.0
    amplitude_ratio: float = 3.0          # burst amplitude over background RMS
    duration_range_s: tuple[float, float] = (2.0, 6.0)
    affected_channels: tuple[int, int] = (3, 6)  # inclusive subset size range

    def __post_init__(self):
        if self.channel_count < 1:
            raise ConfigError("need at least one channel")
        if self.amplitude_ratio < 0:
            raise ConfigError("amplitude ratio must be >= 0")
        lo, hi = self.duration_range_s
        if not 0 < lo <= hi <= WINDOW_SECONDS:
            raise ConfigError("burst duration range must fit inside the window")
        lo_c, hi_c = self.affected_channels
        if not 1 <= lo_c <= hi_c <= self.channel_count:
            raise ConfigError("affected-channel range must fit the montage")


# Frequency ladders for the background mixture.
_BANDS = ((4.0, 7.0), (8.0, 12.0), (13.0, 30.0))  # theta, alpha, beta
_PINK_FREQS = np.geomspace(0.5, 100.0, 48)


def _background(rng: Rng, channels: int) -> np.ndarray:
    t = np.arange(WINDOW_SAMPLES) / CANONICAL_RATE_HZ
    x = np.zeros((channels, WINDOW_SAMPLES))
    for lo, hi in _BANDS:
        freqs = rng.uniform(lo, hi, (channels, 1))
        amps = rng.uniform(0.3, 1.0, (channels, 1))
        phases = rng.uniform(0.0, 2 * np.pi, (channels, 1))
        x += amps * np.cos(2 * np.pi * freqs * t + phases)
    return x


def _pink_noise(rng: Rng, channels: int) -> np.ndarray:
    t = np.arange(WINDOW_SAMPLES) / CANONICAL_RATE_HZ
    x = np.zeros((channels, WINDOW_SAMPLES))
    for f in _PINK_FREQS:
        amps = rng.uniform(0.5, 1.0, (channels, 1)) / np.sqrt(f)
        phases = rng.uniform(0.0, 2 * np.pi, (channels, 1))
        x += amps * np.cos(2 * np.pi * f * t + phases)
    return x


def _spike_wave(phase: np.ndarray) -> np.ndarray:
    """One spike-and-wave cycle evaluated at phase in [0, 1)."""
    spike = np.exp(-0.5 * ((phase - 0.08) / 0.03) ** 2)
    wave = np.where(phase >= 0.15,
                    0.6 * np.sin(np.pi * (phase - 0.15) / 0.85), 0.0)
    return spike + wave


def _render_window(rng: Rng, spec: SynthSpec, with_event: bool,
                   record_id: str) -> Window:
    bg = _background(rng, spec.channel_count)
    bg += spec.noise_scale * (_pink_noise(rng, spec.channel_count)
                              + 0.3 * rng.normal((spec.channel_count,
                                                  WINDOW_SAMPLES)))
    rms = np.sqrt((bg * bg).mean(axis=1, keepdims=True))
    x = bg * (spec.background_rms / rms)

    mask = None
    if with_event:
        mask = np.zeros((spec.channel_count, WINDOW_SAMPLES), dtype=bool)
        lo_d, hi_d = spec.duration_range_s
        duration = float(rng.uniform(lo_d, hi_d))
        n_burst = int(round(duration * CANONICAL_RATE_HZ))
        margin = min(int(0.5 * CANONICAL_RATE_HZ), WINDOW_SAMPLES - n_burst)
        latest = WINDOW_SAMPLES - n_burst - margin
        start = margin if latest <= margin else int(rng.integers(margin, latest + 1))
        lo_c, hi_c = spec.affected_channels
        k = int(rng.integers(lo_c, hi_c + 1))
        chans = np.sort(rng.choice(spec.channel_count, k))
        tt = np.arange(n_burst) / CANONICAL_RATE_HZ
        phase = (tt * spec.burst_hz) % 1.0
        burst = _spike_wave(phase)
        taper = np.minimum(1.0, np.minimum(tt, tt[::-1]) / 0.25)
        amplitude = spec.amplitude_ratio * spec.background_rms
        for c in chans:
            jitter = float(rng.uniform(0.8, 1.2))
            x[c, start:start + n_burst] += amplitude * jitter * burst * taper
            mask[c, start:start + n_burst] = True

    label = 1 if with_event else 0
    # route through SignalRecord so samples get float32-quantized like files
    rec = SignalRecord(standard_channel_labels(spec.channel_count),
                       CANONICAL_RATE_HZ, Tensor(x))
    return Window(record_id, rec.samples, label=label, localization_mask=mask)


def synth_dataset(spec: SynthSpec) -> tuple[list[Window], list[dict]]:
    """Balanced background/burst windows plus manifest rows.

    Manifest rows carry record_id, window_index, label, mask_path; mask_path
    is filled in by the CLI once masks are written to disk.
    """
    rng = Rng(spec.seed).child("synth")
    windows = []
    manifest = []
    for i in range(spec.windows_per_class):
        windows.append(_render_window(rng, spec, False, f"synth-bg-{i:04d}"))
    for i in range(spec.windows_per_class):
        windows.append(_render_window(rng, spec, True, f"synth-ev-{i:04d}"))
    for w in windows:
        manifest.append({"record_id": w.record_id, "window_index": 0,
                         "label": w.label, "mask_path": ""})
    return windows, manifest


def write_manifest(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["record_id", "window_index", "label", "mask_path"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        row["window_index"] = int(row["window_index"])
        row["label"] = int(row["label"]) if row["label"] != "" else None
    return rows

"""Paired PPG/ABP waveforms: synthesis, masking, STFT/ISTFT and file I/O."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import tensor as T

__all__ = [
    "N_SAMPLES",
    "SAMPLE_RATE",
    "SignalSegment",
    "SynthParams",
    "synth_pair",
    "MaskConfig",
    "apply_mask",
    "mask_ppg",
    "derive_seed",
    "StftConfig",
    "Spectrogram",
    "stft",
    "istft",
    "stft_matrix",
    "istft_matrix",
    "stft_tensor",
    "istft_tensor",
    "write_segment",
    "read_segment",
    "ManifestRecord",
    "write_manifest",
    "read_manifest",
]

N_SAMPLES = 1024
SAMPLE_RATE = 125.0


@dataclass
class SignalSegment:
    samples: np.ndarray
    kind: str
    id: str = ""
    sample_rate: float = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.kind not in ("PPG", "ABP"):
            raise ValueError(f"kind must be 'PPG' or 'ABP', got {self.kind!r}")
        if self.samples.shape != (N_SAMPLES,):
            raise ValueError(f"segment must hold {N_SAMPLES} samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"segment {self.id!r} contains non-finite samples")


# ----------------------------------------------------------------------------
# synthetic generator
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthParams:
    """Knobs of the synthetic generator.

    Both waveforms share one beat-onset train. The ABP systolic peak sits
    ``abp_peak_offset`` seconds after each onset and the PPG peak trails it by
    ``pulse_delay`` seconds. A per-segment latent factor in [0, 1] sets the PPG
    amplitude and width as well as the ABP diastolic level and pulse amplitude,
    which is what makes ABP recoverable from PPG.
    """

    rate_range: tuple[float, float] = (0.9, 1.5)
    noise: float = 0.01
    pulse_delay: float = 0.2
    abp_peak_offset: float = 0.1
    onset_jitter: float = 0.02
    amp_jitter: float = 0.03
    dbp_range: tuple[float, float] = (60.0, 85.0)
    pulse_pressure_range: tuple[float, float] = (35.0, 60.0)


def synth_pair(seed: int, params: SynthParams | None = None, *,
               return_truth: bool = False):
    """Generate one (PPG, ABP) pair driven by a shared latent beat train.

    Returns ``(ppg, abp)`` segments, or ``(ppg, abp, truth)`` where ``truth``
    holds the configured systolic/diastolic levels and the beat onsets.
    """
    p = params or SynthParams()
    lo, hi = p.rate_range
    if not hi >= lo or lo <= 0:
        raise ValueError(f"beat-rate range {p.rate_range} is empty")
    if lo < 0.9 - 1e-12 or hi > 1.5 + 1e-12:
        raise ValueError(f"beat-rate range {p.rate_range} outside [0.9, 1.5] Hz")
    if p.noise < 0:
        raise ValueError("noise level must be non-negative")

    rng = np.random.default_rng(seed)
    rate = rng.uniform(lo, hi) if hi > lo else lo
    period = 1.0 / rate
    latent = rng.uniform()
    t = np.arange(N_SAMPLES) / SAMPLE_RATE
    duration = N_SAMPLES / SAMPLE_RATE

    n_beats = int(np.ceil((duration + 2 * period) / period)) + 1
    first = -rng.uniform(0.0, period) - period
    onsets = first + period * np.arange(n_beats) + rng.normal(0.0, p.onset_jitter * period, n_beats)
    beat_gain = 1.0 + rng.normal(0.0, p.amp_jitter, n_beats)

    dbp = p.dbp_range[0] + latent * (p.dbp_range[1] - p.dbp_range[0])
    pulse = p.pulse_pressure_range[0] + latent * (p.pulse_pressure_range[1] - p.pulse_pressure_range[0])
    abp_width = 0.07 + 0.02 * (1.0 - latent)
    ppg_amp = 0.6 + 0.8 * latent
    ppg_width = 0.11 - 0.03 * latent
    dicrotic_ratio = 0.45 - 0.25 * latent

    def gauss(centers, width):
        return np.exp(-0.5 * ((t[None, :] - centers[:, None]) / width) ** 2)

    abp_peaks = onsets + p.abp_peak_offset
    ppg_peaks = abp_peaks + p.pulse_delay
    abp_clean = dbp + pulse * (beat_gain[:, None] * (
        gauss(abp_peaks, abp_width) + 0.25 * gauss(abp_peaks + 0.25, 0.05))).sum(axis=0)
    ppg_clean = 0.2 + ppg_amp * (beat_gain[:, None] * (
        gauss(ppg_peaks, ppg_width) + dicrotic_ratio * gauss(ppg_peaks + 0.25, 0.07))).sum(axis=0)

    ppg = ppg_clean + p.noise * rng.standard_normal(N_SAMPLES)
    abp = abp_clean + p.noise * pulse * rng.standard_normal(N_SAMPLES)
    sid = f"syn{seed:08d}"
    pair = SignalSegment(ppg, "PPG", sid), SignalSegment(abp, "ABP", sid)
    if not return_truth:
        return pair
    visible = (abp_peaks >= 0) & (abp_peaks < duration)
    truth = {
        "sbp": float(dbp + pulse * beat_gain[visible].mean()),
        "dbp": float(dbp),
        "rate": float(rate),
        "latent": float(latent),
        "onsets": onsets,
    }
    return (*pair, truth)


# ----------------------------------------------------------------------------
# masking
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskConfig:
    ratio: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.ratio}")

    def length(self, n: int = N_SAMPLES) -> int:
        return int(round(self.ratio * n))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any sequence of printable parts."""
    digest = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def mask_ppg(x: np.ndarray, ratio: float, seed: int) -> np.ndarray:
    """Zero one contiguous block of ``round(ratio * len(x))`` samples."""
    cfg = MaskConfig(ratio, seed)
    x = np.array(x, dtype=np.float64)
    n = x.shape[-1]
    length = cfg.length(n)
    if length == 0:
        return x
    start = int(np.random.default_rng(seed).integers(0, n - length + 1))
    x[..., start:start + length] = 0.0
    return x


def apply_mask(x: SignalSegment, cfg: MaskConfig) -> SignalSegment:
    return SignalSegment(mask_ppg(x.samples, cfg.ratio, cfg.rng_seed), x.kind, x.id, x.sample_rate)


# ----------------------------------------------------------------------------
# STFT / ISTFT as dense linear maps
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 64
    hop: int = 16
    centered: bool = True
    n_samples: int = N_SAMPLES

    def __post_init__(self):
        if self.window_len <= 0 or self.hop <= 0 or self.window_len % self.hop:
            raise ValueError(f"hop {self.hop} must divide window_len {self.window_len}")
        if self.n_samples % self.hop:
            raise ValueError(f"hop {self.hop} must divide the segment length {self.n_samples}")
        cola = self.cola_sums()
        if np.ptp(cola) > 1e-10:
            raise ValueError(f"Hann/{self.window_len}/{self.hop} violates constant overlap-add "
                             f"(spread {np.ptp(cola):.3g})")

    @property
    def window(self) -> np.ndarray:
        return hann(self.window_len)

    @property
    def bins(self) -> int:
        return self.window_len // 2 + 1

    @property
    def frames(self) -> int:
        if self.centered:
            return self.n_samples // self.hop
        return 1 + (self.n_samples - self.window_len) // self.hop

    @property
    def offset(self) -> int:
        return self.window_len // 2 if self.centered else 0

    def cola_sums(self) -> np.ndarray:
        """Sum over frame shifts of the squared window, one value per position within a hop."""
        w2 = self.window**2
        return w2.reshape(-1, self.hop).sum(axis=0)


def hann(length: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(length) / length)


@dataclass
class Spectrogram:
    real: np.ndarray
    imag: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.real = np.asarray(self.real, dtype=np.float64)
        self.imag = np.asarray(self.imag, dtype=np.float64)
        want = (self.config.frames, self.config.bins)
        if self.real.shape[-2:] != want or self.imag.shape != self.real.shape:
            raise ValueError(f"spectrogram planes {self.real.shape}/{self.imag.shape} do not match "
                             f"config frames x bins {want}")

    def features(self) -> np.ndarray:
        """Per-frame feature rows ``[real bins | imag bins]``, shape (..., F, 2B)."""
        return np.concatenate([self.real, self.imag], axis=-1)

    @classmethod
    def from_features(cls, feats: np.ndarray, config: StftConfig | None = None) -> "Spectrogram":
        config = config or StftConfig()
        b = config.bins
        feats = np.asarray(feats)
        if feats.shape[-1] != 2 * b:
            raise ValueError(f"feature width {feats.shape[-1]} does not match 2 x {b} bins")
        return cls(feats[..., :b], feats[..., b:], config)


def _frame_index(cfg: StftConfig) -> np.ndarray:
    """Source sample index for every (frame, tap), folding reflect padding back in."""
    n = cfg.n_samples
    pos = np.arange(cfg.frames)[:, None] * cfg.hop + np.arange(cfg.window_len)[None, :] - cfg.offset
    pos = np.where(pos < 0, -pos, pos)
    pos = np.where(pos >= n, 2 * (n - 1) - pos, pos)
    return pos


def _stft_frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    frames = x[..., _frame_index(cfg)] * cfg.window
    return np.fft.rfft(frames, axis=-1)


@lru_cache(maxsize=8)
def stft_matrix(cfg: StftConfig) -> np.ndarray:
    """(N, F*2B) matrix ``A`` with ``x @ A`` equal to the flattened feature layout."""
    spec = _stft_frames(np.eye(cfg.n_samples), cfg)
    feats = np.concatenate([spec.real, spec.imag], axis=-1)
    mat = feats.reshape(cfg.n_samples, -1)
    mat.setflags(write=False)
    return mat


def _overlap_add(frames: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Windowed overlap-add over the original sample range, normalised by the window envelope."""
    idx = np.arange(cfg.frames)[:, None] * cfg.hop + np.arange(cfg.window_len)[None, :] - cfg.offset
    keep = (idx >= 0) & (idx < cfg.n_samples)
    w = np.broadcast_to(cfg.window, idx.shape)
    env = np.zeros(cfg.n_samples)
    np.add.at(env, idx[keep], (w * w)[keep])
    if env.min() <= 1e-12:
        raise ValueError("window envelope vanishes somewhere; ISTFT is not invertible")
    lead = frames.shape[:-2]
    out = np.zeros(lead + (cfg.n_samples,))
    flat = (frames * cfg.window)[..., keep]
    out_flat = out.reshape(-1, cfg.n_samples)
    flat = flat.reshape(-1, flat.shape[-1])
    for r in range(out_flat.shape[0]):
        out_flat[r] = np.bincount(idx[keep], weights=flat[r], minlength=cfg.n_samples)
    return out / env


@lru_cache(maxsize=8)
def istft_matrix(cfg: StftConfig) -> np.ndarray:
    """(F*2B, N) matrix ``S`` with ``feats.reshape(-1) @ S`` the reconstructed signal."""
    width = cfg.frames * 2 * cfg.bins
    basis = np.eye(width).reshape(width, cfg.frames, 2 * cfg.bins)
    spec = basis[..., :cfg.bins] + 1j * basis[..., cfg.bins:]
    frames = np.fft.irfft(spec, n=cfg.window_len, axis=-1)
    mat = _overlap_add(frames, cfg)
    mat.setflags(write=False)
    return mat


def stft(x, cfg: StftConfig | None = None) -> Spectrogram:
    """Half-spectrum STFT of a segment (or any array whose last axis is time)."""
    cfg = cfg or StftConfig()
    samples = x.samples if isinstance(x, SignalSegment) else np.asarray(x, dtype=np.float64)
    if samples.shape[-1] != cfg.n_samples:
        raise ValueError(f"expected {cfg.n_samples} samples, got {samples.shape[-1]}")
    feats = (samples @ stft_matrix(cfg)).reshape(samples.shape[:-1] + (cfg.frames, 2 * cfg.bins))
    return Spectrogram.from_features(feats, cfg)


def istft(u: Spectrogram, kind: str = "ABP", id: str = ""):
    """Weighted overlap-add inverse; returns a segment for a single spectrogram, else an array."""
    cfg = u.config
    if u.real.shape[-1] != cfg.bins or u.real.shape[-2] != cfg.frames:
        raise ValueError(f"planes {u.real.shape} do not match declared {cfg.frames} frames x "
                         f"{cfg.bins} bins")
    feats = u.features()
    x = feats.reshape(feats.shape[:-2] + (-1,)) @ istft_matrix(cfg)
    if x.ndim == 1:
        return SignalSegment(x, kind, id)
    return x


def stft_tensor(x: T.Tensor, cfg: StftConfig | None = None) -> T.Tensor:
    """Differentiable STFT: (b, N) -> (b, F, 2B)."""
    cfg = cfg or StftConfig()
    out = T.matmul(x, T.Tensor(stft_matrix(cfg)))
    return T.reshape(out, x.shape[:-1] + (cfg.frames, 2 * cfg.bins))


def istft_tensor(u: T.Tensor, cfg: StftConfig | None = None) -> T.Tensor:
    """Differentiable ISTFT: (b, F, 2B) -> (b, N)."""
    cfg = cfg or StftConfig()
    if u.shape[-2:] != (cfg.frames, 2 * cfg.bins):
        raise ValueError(f"spectrogram features {u.shape} do not match ({cfg.frames}, {2 * cfg.bins})")
    flat = T.reshape(u, u.shape[:-2] + (cfg.frames * 2 * cfg.bins,))
    return T.matmul(flat, T.Tensor(istft_matrix(cfg)))


# ----------------------------------------------------------------------------
# files
# ----------------------------------------------------------------------------

SEGMENT_BYTES = N_SAMPLES * 4


def write_segment(path, x) -> None:
    """Raw little-endian float32, no header."""
    samples = x.samples if isinstance(x, SignalSegment) else np.asarray(x)
    if samples.shape != (N_SAMPLES,):
        raise ValueError(f"segment must hold {N_SAMPLES} samples, got shape {samples.shape}")
    Path(path).write_bytes(samples.astype("<f4").tobytes())


def read_segment(path, kind: str = "PPG", id: str = "") -> SignalSegment:
    raw = Path(path).read_bytes()
    if len(raw) != SEGMENT_BYTES:
        raise ValueError(f"{path}: expected {SEGMENT_BYTES} bytes, found {len(raw)}")
    return SignalSegment(np.frombuffer(raw, dtype="<f4").astype(np.float64), kind, id)


@dataclass
class ManifestRecord:
    id: str
    ppg_path: str
    abp_path: str
    split: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"id": self.id, "ppg_path": self.ppg_path, "abp_path": self.abp_path,
                "split": self.split, **self.extra}


def write_manifest(path, records) -> None:
    doc = {"records": [r.to_json() if isinstance(r, ManifestRecord) else dict(r) for r in records]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=False) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    """Load records; relative segment paths resolve against the manifest's directory."""
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent
    out = []
    for raw in doc["records"]:
        raw = dict(raw)
        rec = ManifestRecord(raw.pop("id"), raw.pop("ppg_path"), raw.pop("abp_path"),
                             raw.pop("split"), raw)
        for p in (rec.ppg_path, rec.abp_path):
            full = p if os.path.isabs(p) else base / p
            if not Path(full).is_file():
                raise FileNotFoundError(f"manifest {path} references missing file {full}")
        out.append(rec)
    return out


def resolve(manifest_path, rel: str) -> Path:
    return Path(rel) if os.path.isabs(rel) else Path(manifest_path).parent / rel

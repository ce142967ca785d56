"""Audio-side transforms: waveform <-> normalized log-mel grids, Griffin-Lim
phase retrieval, and the evaluation metrics used throughout the project.

The mel grid is fixed at 64 bands x 64 frames; values live in [0, 1] via
dB = 10*log10(power + 1e-10) against a full-scale reference, clamped to
[-80, 0] and affinely mapped. Magnitudes are scaled by 2/sum(window) so a
full-scale sinusoid sits near 0 dB, which keeps the mapping sample
independent (a silent input maps exactly to 0).
"""

from __future__ import annotations

import warnings
import wave
from dataclasses import dataclass, replace

import numpy as np


class DspError(ValueError):
    pass


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 10500
    fft_size: int = 1024
    hop: int = 330
    n_mels: int = 64
    n_frames: int = 64
    fmin: float = 40.0
    fmax: float | None = None          # defaults to Nyquist
    floor_db: float = -80.0
    crop_len: int = 21000
    griffin_lim_iters: int = 64
    mel_inv_iters: int = 50

    @property
    def fmax_hz(self) -> float:
        return self.fmax if self.fmax is not None else self.sample_rate / 2.0


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise DspError("waveform contains non-finite samples")


@dataclass
class MelSpectrogram:
    grid: np.ndarray                   # (n_mels, n_frames) in [0, 1]
    config: DspConfig

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.shape != (self.config.n_mels, self.config.n_frames):
            raise DspError(f"mel grid must be {self.config.n_mels}x"
                           f"{self.config.n_frames}, got {self.grid.shape}")


def hann_window(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(samples: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """Hann-windowed, centered (reflect padded) STFT; (fft/2+1, frames)."""
    if fft_size & (fft_size - 1):
        raise DspError(f"fft_size must be a power of two, got {fft_size}")
    if hop <= 0:
        raise DspError(f"hop must be positive, got {hop}")
    x = np.asarray(samples, dtype=np.float64)
    pad = fft_size // 2
    if x.size <= pad:
        raise DspError("waveform shorter than fft_size after padding")
    xp = np.pad(x, (pad, pad), mode="reflect")
    n_frames = 1 + (xp.size - fft_size) // hop
    window = hann_window(fft_size)
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx] * window
    return np.fft.rfft(frames, axis=1).T


def istft(spec: np.ndarray, fft_size: int, hop: int, length: int) -> np.ndarray:
    """Overlap-add inverse of stft() with squared-window normalization."""
    frames = np.fft.irfft(spec.T, n=fft_size, axis=1)
    window = hann_window(fft_size)
    n_frames = frames.shape[0]
    total = fft_size + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = window * window
    for t in range(n_frames):
        out[t * hop:t * hop + fft_size] += frames[t] * window
        norm[t * hop:t * hop + fft_size] += wsq
    out /= np.maximum(norm, 1e-12)
    pad = fft_size // 2
    out = out[pad:pad + length]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """Unit-peak triangular filters, (n_mels, fft_size/2+1)."""
    n_bins = cfg.fft_size // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax_hz),
                                  cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - freqs) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


_FB_CACHE: dict = {}


def _filterbank_cached(cfg: DspConfig) -> np.ndarray:
    key = (cfg.sample_rate, cfg.fft_size, cfg.n_mels, cfg.fmin, cfg.fmax_hz)
    got = _FB_CACHE.get(key)
    if got is None:
        got = _FB_CACHE[key] = mel_filterbank(cfg)
    return got


def mel_spectrogram(wav: Waveform, cfg: DspConfig | None = None) -> MelSpectrogram:
    """The waveform -> normalized log-mel map; output exactly 64x64."""
    cfg = cfg or DspConfig()
    x = wav.samples
    if x.size != cfg.crop_len:
        raise DspError(f"expected {cfg.crop_len} samples, got {x.size}; "
                       "crop or pad upstream")
    spec = stft(x, cfg.fft_size, cfg.hop)
    if spec.shape[1] < cfg.n_frames:
        raise DspError(f"only {spec.shape[1]} frames available, "
                       f"need {cfg.n_frames}")
    gain = 2.0 / hann_window(cfg.fft_size).sum()
    power = np.abs(spec[:, :cfg.n_frames] * gain) ** 2
    melpow = _filterbank_cached(cfg) @ power
    db = 10.0 * np.log10(melpow + 1e-10)
    rel = np.clip(db, cfg.floor_db, 0.0)
    grid = (rel - cfg.floor_db) / (-cfg.floor_db)
    return MelSpectrogram(grid=grid, config=cfg)


def denormalize_mel_power(mel: MelSpectrogram) -> np.ndarray:
    db = mel.grid * (-mel.config.floor_db) + mel.config.floor_db
    return np.maximum(10.0 ** (db / 10.0) - 1e-10, 0.0)


def invert_filterbank(melpow: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Non-negative least squares FB @ P ~= M by multiplicative updates."""
    fb = _filterbank_cached(cfg)
    p = fb.T @ melpow
    for _ in range(cfg.mel_inv_iters):
        p *= (fb.T @ melpow) / (fb.T @ (fb @ p) + 1e-12)
    return p


def griffin_lim(mel: MelSpectrogram, iters: int | None = None) -> Waveform:
    """Waveform recovery: mel inversion + iterative phase retrieval."""
    cfg = mel.config
    iters = cfg.griffin_lim_iters if iters is None else iters
    if iters < 1:
        raise DspError(f"iters must be >= 1, got {iters}")
    if mel.grid.max() <= 0.0:          # everything at the dB floor
        return Waveform(np.zeros(cfg.crop_len), cfg.sample_rate)
    melpow = denormalize_mel_power(mel)
    gain = 2.0 / hann_window(cfg.fft_size).sum()
    mag = np.sqrt(invert_filterbank(melpow, cfg)) / gain

    x = istft(mag.astype(complex), cfg.fft_size, cfg.hop, cfg.crop_len)
    for _ in range(iters):
        spec = stft(x, cfg.fft_size, cfg.hop)[:, :mag.shape[1]]
        phase = spec / np.maximum(np.abs(spec), 1e-12)
        x = istft(mag * phase, cfg.fft_size, cfg.hop, cfg.crop_len)

    peak = np.max(np.abs(x))
    if peak < 1e-8:
        return Waveform(np.zeros(cfg.crop_len), cfg.sample_rate)
    return Waveform(x * (0.95 / peak), cfg.sample_rate)


def corr2d(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation over flattened grids."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DspError(f"corr2d: shapes {a.shape} and {b.shape} differ")
    ac = a - a.mean()
    bc = b - b.mean()
    na = np.sqrt(np.sum(ac * ac))
    nb = np.sqrt(np.sum(bc * bc))
    if na == 0.0 and nb == 0.0:
        raise DspError("corr2d undefined: both grids are constant")
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(ac, bc) / (na * nb))


def log_spectral_distance(a: MelSpectrogram, b: MelSpectrogram) -> float:
    """RMS of dB differences after de-normalization."""
    if a.config != b.config:
        raise DspError("log_spectral_distance requires matching configs")
    scale = -a.config.floor_db
    diff = (a.grid - b.grid) * scale
    return float(np.sqrt(np.mean(diff * diff)))


# -- file I/O -----------------------------------------------------------------

def write_wav(path, wav: Waveform) -> None:
    q = np.clip(np.round(wav.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate)
        fh.writeframes(q.tobytes())


def read_wav(path, expected_rate: int | None = None) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise DspError(f"{path}: expected mono, got "
                               f"{fh.getnchannels()} channels")
            if fh.getsampwidth() != 2 or fh.getcomptype() != "NONE":
                raise DspError(f"{path}: only 16-bit PCM WAV is supported")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise DspError(f"{path}: malformed WAV file ({exc})") from exc
    except EOFError as exc:
        raise DspError(f"{path}: truncated WAV header") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    if expected_rate is not None and rate != expected_rate:
        warnings.warn(f"{path}: sample rate {rate} differs from configured "
                      f"{expected_rate}; not resampling", stacklevel=2)
    return Waveform(samples, rate)


def write_pgm(path, grid: np.ndarray) -> None:
    """P5 grayscale image of a [0,1] grid, low rows at the bottom."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    img = np.round(np.flipud(g) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())

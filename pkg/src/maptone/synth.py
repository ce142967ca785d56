"""Synthetic paired-data generator.

Each sample couples a harmonic "voice" waveform to a motion-feature matrix
through one shared latent gesture trajectory: per-gesture activation curves
drive both the audio's energy/formant structure and the displacement
magnitudes of the simulated tracks. Weighting maps come from the real NMF
path, so the translator sees the same kind of input it would in production.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsp, nmf
from .tensor import make_rng


@dataclass(frozen=True)
class UtteranceTemplate:
    name: str
    # per-gesture (center, width, amplitude) as fractions of the utterance
    bursts: tuple
    # per-gesture formant targets (f1, f2) in Hz
    formants: tuple
    f0_base: float = 120.0
    f0_slope: float = 0.0              # relative drift over the utterance


def default_templates() -> tuple:
    souk = UtteranceTemplate(
        name="a souk",
        bursts=((0.18, 0.08, 1.0), (0.52, 0.10, 0.85), (0.80, 0.07, 0.6), (0.0, 0.0, 0.0)),
        formants=((700.0, 1200.0), (320.0, 900.0), (380.0, 1100.0), (500.0, 1500.0)),
        f0_base=118.0,
        f0_slope=-0.12,
    )
    geese = UtteranceTemplate(
        name="a geese",
        bursts=((0.12, 0.05, 0.7), (0.38, 0.12, 1.0), (0.0, 0.0, 0.0), (0.68, 0.16, 0.9)),
        formants=((650.0, 1100.0), (280.0, 2100.0), (500.0, 1500.0), (300.0, 2300.0)),
        f0_base=145.0,
        f0_slope=0.10,
    )
    return (souk, geese)


@dataclass
class SyntheticCorpusSpec:
    n_subjects: int = 6
    n_repetitions: int = 10
    utterances: tuple = field(default_factory=default_templates)
    crop_len: int = 21000
    width_range: tuple = (5745, 11938)
    audio_len_range: tuple = (21832, 24175)
    n_frames: int = 26
    subject_f0_spread: float = 0.12
    subject_formant_spread: float = 0.05
    nmf_iters: int = 80
    seed_salt: int = 0


@dataclass
class Sample:
    subject_id: str
    utterance_id: str
    h: np.ndarray
    mel: dsp.MelSpectrogram
    waveform: dsp.Waveform | None = None


def _gesture_activations(template: UtteranceTemplate, t_frac: np.ndarray,
                         jitter: np.ndarray) -> np.ndarray:
    """Per-gesture activation curves over normalized time, (G, len(t))."""
    acts = np.zeros((len(template.bursts), t_frac.size))
    for g, (center, width, amp) in enumerate(template.bursts):
        if amp <= 0:
            continue
        c = center + jitter[g]
        acts[g] = amp * np.exp(-0.5 * ((t_frac - c) / max(width, 1e-3)) ** 2)
    return acts


def synthesize_voice(template: UtteranceTemplate, n_samples: int, sample_rate: int,
                     f0_scale: float, formant_scale: float,
                     jitter: np.ndarray, rng) -> np.ndarray:
    """Formant-shaped harmonic synthesis from the gesture trajectory."""
    t_frac = np.arange(n_samples) / n_samples
    acts = _gesture_activations(template, t_frac, jitter)
    total = acts.sum(axis=0)
    env = total / max(total.max(), 1e-9)

    weights = acts + 1e-6
    weights /= weights.sum(axis=0, keepdims=True)
    formants = np.asarray(template.formants) * formant_scale
    f1 = weights.T @ formants[:, 0]
    f2 = weights.T @ formants[:, 1]

    f0 = template.f0_base * f0_scale * (1.0 + template.f0_slope * t_frac)
    f0 = f0 * (1.0 + 0.015 * np.sin(2 * np.pi * 4.5 * t_frac * n_samples / sample_rate))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    x = np.zeros(n_samples)
    base = template.f0_base * f0_scale
    for k in range(1, int((sample_rate / 2 - 100) / base)):
        fk = base * k
        gain = (np.exp(-0.5 * ((fk - f1) / 160.0) ** 2)
                + 0.6 * np.exp(-0.5 * ((fk - f2) / 220.0) ** 2)
                + 0.05 / k)
        x += gain * np.sin(k * phase)
    x *= env
    x += 0.003 * rng.standard_normal(n_samples) * env
    peak = np.max(np.abs(x))
    return x * (0.8 / max(peak, 1e-9))


def synthesize_motion_features(template: UtteranceTemplate, width: int,
                               n_frames: int, jitter: np.ndarray, rng,
                               amp_scale: float = 1.0) -> np.ndarray:
    """Non-negative motion features (6 x width), frame-major columns.

    Tracks are partitioned across gestures; each track's displacement
    magnitude follows its gesture's activation over the frames, and its
    fixed direction feeds the angle-derived channels.
    """
    n_gestures = len(template.bursts)
    n_tracks = -(-width // n_frames)
    t_frac = (np.arange(n_frames) + 0.5) / n_frames
    acts = _gesture_activations(template, t_frac, jitter)          # (G, T)

    group = rng.integers(0, n_gestures, size=n_tracks)
    angle = group * (2 * np.pi / n_gestures) + 0.25 * rng.standard_normal(n_tracks)
    amp = amp_scale * (0.7 + 0.6 * rng.random(n_tracks))

    mag = acts[group] * amp[:, None]                               # (tracks, T)
    mag = mag + 0.01 * rng.random(mag.shape)
    vel = np.abs(np.diff(mag, axis=1, prepend=mag[:, :1]))
    cx = 0.5 * (1.0 + np.cos(angle))[:, None]
    cy = 0.5 * (1.0 + np.sin(angle))[:, None]

    feats = np.stack([mag, mag * cx, mag * cy, vel, vel * cx, vel * cy])
    x = feats.transpose(0, 2, 1).reshape(6, n_frames * n_tracks)   # frame-major
    x = x[:, :width] + 1e-3
    return x


def _canonicalize_rows(factors: nmf.NmfFactors) -> np.ndarray:
    """Order H rows by activation center of mass (row order in NMF is
    arbitrary; a fixed order makes maps comparable across samples)."""
    h = factors.h
    cols = np.arange(h.shape[1])
    mass = h.sum(axis=1)
    com = (h @ cols) / np.maximum(mass, 1e-12)
    order = np.argsort(com, kind="stable")
    return h[order]


def make_weighting_map(x: np.ndarray, nmf_iters: int, seed: int,
                       rank: int = 20) -> np.ndarray:
    cfg = nmf.NmfConfig(rank=rank, lam=1.0, eta=0.1, k_neighbors=5,
                        max_iters=nmf_iters, seed=seed)
    factors = nmf.nmf_factorize(x, cfg)
    return _canonicalize_rows(factors)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, rng=None,
                              dsp_cfg: dsp.DspConfig | None = None,
                              keep_waveforms: bool = True) -> list:
    """Deterministic corpus of (subject, utterance, repetition) samples."""
    rng = rng if rng is not None else make_rng(spec.seed_salt)
    dsp_cfg = dsp_cfg or dsp.DspConfig(crop_len=spec.crop_len)
    samples = []
    for s in range(spec.n_subjects):
        f0_scale = 1.0 + spec.subject_f0_spread * float(rng.standard_normal())
        formant_scale = 1.0 + spec.subject_formant_spread * float(rng.standard_normal())
        for template in spec.utterances:
            for rep in range(spec.n_repetitions):
                jitter = 0.02 * rng.standard_normal(len(template.bursts))
                n_audio = int(rng.integers(spec.audio_len_range[0],
                                           spec.audio_len_range[1] + 1))
                width = int(rng.integers(spec.width_range[0],
                                         spec.width_range[1] + 1))
                voice = synthesize_voice(template, n_audio, dsp_cfg.sample_rate,
                                         f0_scale, formant_scale, jitter, rng)
                wav = dsp.Waveform(voice, dsp_cfg.sample_rate)
                offset = (n_audio - spec.crop_len) // 2
                crop = dsp.Waveform(voice[offset:offset + spec.crop_len],
                                    dsp_cfg.sample_rate)
                mel = dsp.mel_spectrogram(crop, dsp_cfg)
                x = synthesize_motion_features(template, width, spec.n_frames,
                                               jitter, rng)
                h = make_weighting_map(x, spec.nmf_iters,
                                       seed=int(rng.integers(2**31)))
                samples.append(Sample(subject_id=f"s{s:02d}",
                                      utterance_id=template.name,
                                      h=h, mel=mel,
                                      waveform=wav if keep_waveforms else None))
    return samples

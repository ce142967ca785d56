"""Corpus persistence: per-sample containers/WAVs plus a TSV manifest.

Manifest lines: subject_id, utterance_id, H path, WAV path (tab separated,
paths relative to the manifest's directory). Targets are recomputed from
the WAV's centered crop on load, matching generation.
"""

from __future__ import annotations

import configparser
import os

import numpy as np

from . import dsp
from .containers import load_matrix, save_matrix
from .synth import Sample, SyntheticCorpusSpec


class CorpusError(ValueError):
    pass


def save_corpus(samples, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    with open(manifest_path, "w") as manifest:
        for i, s in enumerate(samples):
            if s.waveform is None:
                raise CorpusError(f"sample {i} has no waveform to persist")
            h_name = f"h_{i:04d}.nmfh"
            wav_name = f"audio_{i:04d}.wav"
            save_matrix(os.path.join(out_dir, h_name), s.h, rank=s.h.shape[0])
            dsp.write_wav(os.path.join(out_dir, wav_name), s.waveform)
            manifest.write(f"{s.subject_id}\t{s.utterance_id}\t{h_name}\t{wav_name}\n")
    return manifest_path


def load_corpus(manifest_path, dsp_cfg: dsp.DspConfig | None = None) -> list:
    dsp_cfg = dsp_cfg or dsp.DspConfig()
    base = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    try:
        lines = open(manifest_path).read().splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read manifest {manifest_path}: {exc}") from exc
    for ln, line in enumerate(lines):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise CorpusError(f"{manifest_path}:{ln + 1}: expected 4 tab-separated "
                              f"fields, got {len(parts)}")
        subject, utterance, h_rel, wav_rel = parts
        h, _ = load_matrix(os.path.join(base, h_rel))
        wav = dsp.read_wav(os.path.join(base, wav_rel),
                           expected_rate=dsp_cfg.sample_rate)
        offset = max(0, (wav.samples.size - dsp_cfg.crop_len) // 2)
        crop = dsp.Waveform(wav.samples[offset:offset + dsp_cfg.crop_len],
                            wav.sample_rate)
        mel = dsp.mel_spectrogram(crop, dsp_cfg)
        samples.append(Sample(subject_id=subject, utterance_id=utterance,
                              h=h.astype(np.float64), mel=mel, waveform=wav))
    return samples


def parse_corpus_spec(path) -> SyntheticCorpusSpec:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise CorpusError(f"cannot read corpus spec: {path}")
    if parser.sections() != ["corpus"]:
        raise CorpusError(f"{path}: expected a single [corpus] section")
    known_int = {"n_subjects", "n_repetitions", "crop_len", "n_frames",
                 "nmf_iters", "seed_salt"}
    known_float = {"subject_f0_spread", "subject_formant_spread"}
    known_pair = {"width_range", "audio_len_range"}
    kwargs = {}
    for key, raw in parser.items("corpus"):
        if key in known_int:
            kwargs[key] = int(raw)
        elif key in known_float:
            kwargs[key] = float(raw)
        elif key in known_pair:
            lo, hi = (int(v) for v in raw.split(","))
            kwargs[key] = (lo, hi)
        else:
            raise CorpusError(f"{path}: unknown corpus spec key '{key}'")
    return SyntheticCorpusSpec(**kwargs)

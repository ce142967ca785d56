"""Losses, adversarial training loop, augmentation, and evaluation harness.

The translator minimizes MSE + beta*MMD (utterance consistency on the
latent's utterance channels) + lambda*GAN; the discriminator minimizes the
standard real/fake binary cross-entropy. Updates alternate one
discriminator step and one translator step per batch.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import pdist

from . import dsp, tensor as T
from .checkpoint import save_checkpoint
from .model import Discriminator, ModelConfig, Translator
from .synth import Sample
from .tensor import SGD, Tensor, backward, make_rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_t: float = 1e-3
    lr_d: float = 1e-4
    momentum: float = 0.5
    beta: float = 0.75
    lambda_gan: float = 1.0
    epochs: int = 200
    batch: int = 8
    seed: int = 0
    mmd_bandwidths: tuple = (1.0, 2.0, 4.0, 8.0)
    literal_generator_loss: bool = False
    augment: bool = True
    precision: str = "float32"
    eval_cap: int = 16                 # train samples scored per epoch

    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


# -- losses -------------------------------------------------------------------

def mse_loss(s_hat, s) -> Tensor:
    s_hat = T.as_tensor(s_hat)
    s = T.as_tensor(s, dtype=s_hat.dtype)
    if s_hat.shape != s.shape:
        raise T.ShapeError(f"mse_loss: shapes {s_hat.shape} and {s.shape} differ")
    diff = s_hat - s
    return T.mean(diff * diff)


def _as_set(f) -> Tensor:
    f = T.as_tensor(f)
    return f.reshape(1, f.shape[0]) if len(f.shape) == 1 else f


def _kernel_matrix(x: Tensor, y: Tensor, med_sq: float, bandwidths) -> Tensor:
    x2 = T.sum_(x * x, axis=1, keepdims=True)
    y2 = T.sum_(y * y, axis=1, keepdims=True)
    d2 = T.relu(x2 + y2.reshape(1, y.shape[0]) - 2.0 * T.matmul(x, T.transpose(y, (1, 0))))
    acc = None
    for bw in bandwidths:
        k = T.exp(d2 * (-float(bw) / med_sq))
        acc = k if acc is None else acc + k
    return acc * (1.0 / len(bandwidths))


def _offdiag_sum(k: Tensor) -> Tensor:
    n = k.shape[0]
    mask = 1.0 - np.eye(n)
    return T.sum_(k * mask)


def mmd_loss(f_u_i, f_u_j, same_utterance: bool,
             bandwidths=(1.0, 2.0, 4.0, 8.0)) -> Tensor:
    """Unbiased squared MMD between two latent sample sets.

    Gaussian kernel mixture with scales med/bw for bw in bandwidths, where
    med is the median pooled pairwise squared distance (treated as a
    constant). Different-utterance pairs contribute exactly zero. For equal
    sample sizes the paired estimator is used, which is identically zero on
    identical sets.
    """
    if not same_utterance:
        return Tensor(0.0)
    x = _as_set(f_u_i)
    y = _as_set(f_u_j)
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        log.warning("mmd_loss: fewer than 2 samples per side (%d, %d); returning 0", m, n)
        return Tensor(0.0)
    pooled = np.concatenate([x.data, y.data], axis=0)
    d2 = pdist(pooled, "sqeuclidean")
    med_sq = max(float(np.median(d2)), 1e-12)

    kxx = _kernel_matrix(x, x, med_sq, bandwidths)
    kyy = _kernel_matrix(y, y, med_sq, bandwidths)
    kxy = _kernel_matrix(x, y, med_sq, bandwidths)
    if m == n:
        cross = T.sum_(kxy) - T.sum_(kxy * np.eye(m))
        val = (_offdiag_sum(kxx) + _offdiag_sum(kyy) - 2.0 * cross) * (1.0 / (m * (m - 1)))
    else:
        val = (_offdiag_sum(kxx) * (1.0 / (m * (m - 1)))
               + _offdiag_sum(kyy) * (1.0 / (n * (n - 1)))
               - 2.0 * T.mean(kxy))
    return val


_LOG_EPS = 1e-12


def discriminator_loss(disc: Discriminator, s_real: Tensor, s_fake: Tensor) -> Tensor:
    """BCE: -[log D(real) + log(1 - D(fake))], fake detached from T."""
    d_real = disc.forward(s_real)
    d_fake = disc.forward(s_fake.detach())
    return -(T.mean(T.log(d_real + _LOG_EPS))
             + T.mean(T.log(1.0 - d_fake + _LOG_EPS)))


def generator_gan_loss(disc: Discriminator, s_fake: Tensor,
                       literal: bool = False) -> Tensor:
    """Non-saturating -log D(fake); `literal` restores -log(1 - D(fake))."""
    d_fake = disc.forward(s_fake)
    if literal:
        return -T.mean(T.log(1.0 - d_fake + _LOG_EPS))
    return -T.mean(T.log(d_fake + _LOG_EPS))


def gan_losses(disc: Discriminator, s_real, s_fake,
               literal: bool = False) -> tuple[Tensor, Tensor]:
    s_real = T.as_tensor(s_real)
    s_fake = T.as_tensor(s_fake) if not isinstance(s_fake, Tensor) else s_fake
    return (discriminator_loss(disc, s_real, s_fake),
            generator_gan_loss(disc, s_fake, literal))


def total_translator_loss(loss_mse: Tensor, loss_mmd: Tensor, loss_gan_t: Tensor,
                          config: TrainConfig) -> Tensor:
    return loss_mse + config.beta * loss_mmd + config.lambda_gan * loss_gan_t


# -- augmentation -------------------------------------------------------------

def augment_H(h: np.ndarray, rng) -> np.ndarray:
    """Randomly drop columns so the width rounds down to the nearest hundred."""
    width = h.shape[1]
    if width < 100:
        raise ValueError(f"augment_H requires width >= 100, got {width}")
    drop = width % 100
    if drop == 0:
        return h
    drop_idx = rng.choice(width, size=drop, replace=False)
    return np.delete(h, drop_idx, axis=1)


def augment_audio(wav: dsp.Waveform, crop_len: int = 21000, n: int = 100) -> list:
    """n crops of crop_len samples at evenly spaced offsets."""
    total = wav.samples.size
    if total < crop_len:
        raise ValueError(f"waveform has {total} samples, need >= {crop_len}")
    offsets = np.round(np.linspace(0, total - crop_len, n)).astype(int)
    return [dsp.Waveform(wav.samples[o:o + crop_len], wav.sample_rate)
            for o in offsets]


# -- training loop ------------------------------------------------------------

@dataclass
class TrainResult:
    history: list
    best_corr: float
    best_state: dict
    checkpoint_path: str | None = None
    metrics_path: str | None = None


def _group_by_utterance(samples) -> dict:
    groups: dict = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.utterance_id, []).append(i)
    return groups


def _make_batches(samples, batch_size: int, rng) -> list:
    """Shuffled batches, topped up so one utterance has >=4 members
    (two per MMD side) whenever the corpus allows."""
    n = len(samples)
    order = list(rng.permutation(n))
    groups = _group_by_utterance(samples)
    batches = []
    for i in range(0, n, batch_size):
        b = list(order[i:i + batch_size])
        focal = samples[b[0]].utterance_id
        members = [j for j in b if samples[j].utterance_id == focal]
        want = min(4, len(b))
        pool = [j for j in groups[focal] if j not in b]
        while len(members) < want and pool:
            j = pool.pop(int(rng.integers(len(pool))))
            for pos in range(len(b) - 1, -1, -1):
                if samples[b[pos]].utterance_id != focal:
                    b[pos] = j
                    members.append(j)
                    break
            else:
                break
        batches.append(b)
    return batches


def _target_grid(sample: Sample, cfg: TrainConfig, dsp_cfg: dsp.DspConfig,
                 rng) -> np.ndarray:
    """Ground-truth grid, optionally re-cropped from the full waveform."""
    if cfg.augment and sample.waveform is not None \
            and sample.waveform.samples.size > dsp_cfg.crop_len:
        crops = augment_audio(sample.waveform, dsp_cfg.crop_len, 100)
        pick = int(rng.integers(len(crops)))
        return dsp.mel_spectrogram(crops[pick], dsp_cfg).grid
    return sample.mel.grid


def _batch_mmd(translator: Translator, latents, batch_samples, cfg: TrainConfig) -> Tensor:
    by_utt: dict = {}
    for latent, s in zip(latents, batch_samples):
        by_utt.setdefault(s.utterance_id, []).append(latent)
    total = None
    count = 0
    for members in by_utt.values():
        if len(members) < 4:
            continue
        vecs = [translator.utterance_part(f) for f in members]
        x = T.stack(vecs[0::2])
        y = T.stack(vecs[1::2])
        k = min(x.shape[0], y.shape[0])
        term = mmd_loss(x[:k], y[:k], True, cfg.mmd_bandwidths)
        total = term if total is None else total + term
        count += 1
    if count == 0:
        return Tensor(0.0)
    return total * (1.0 / count)


def _corr_scores(translator: Translator, samples) -> float:
    vals = [dsp.corr2d(translator.translate(s.h), s.mel.grid) for s in samples]
    return float(np.mean(vals)) if vals else float("nan")


def train(samples, config: TrainConfig, out_dir=None, val_samples=(),
          fold: int = 0, model_cfg: ModelConfig | None = None,
          dsp_cfg: dsp.DspConfig | None = None, max_steps: int | None = None) -> TrainResult:
    """Alternating adversarial training over an in-memory corpus.

    Writes metrics.csv and best.pltc under out_dir when given; the retained
    checkpoint is the best by validation Corr2D (training Corr2D when no
    validation set is supplied).
    """
    if not samples:
        raise TrainingError("empty training corpus")
    dsp_cfg = dsp_cfg or dsp.DspConfig()
    model_cfg = model_cfg or ModelConfig()
    history = []
    with T.precision(config.dtype()):
        translator = Translator(model_cfg, seed=config.seed)
        disc = Discriminator(model_cfg, make_rng(config.seed + 1))
        opt_t = SGD(list(translator.parameters().values()), config.lr_t, config.momentum)
        opt_d = SGD(list(disc.parameters().values()), config.lr_d, config.momentum)
        rng = make_rng(config.seed + 2)

        best_corr = -np.inf
        best_state = {k: v.data.copy() for k, v in translator.parameters().items()}
        steps = 0
        for epoch in range(config.epochs):
            if max_steps is not None and steps >= max_steps:
                break
            sums = {"mse": 0.0, "mmd": 0.0, "gan_t": 0.0, "gan_d": 0.0}
            batches = _make_batches(samples, config.batch, rng)
            for bi, batch_idx in enumerate(batches):
                if max_steps is not None and steps >= max_steps:
                    break
                batch_samples = [samples[j] for j in batch_idx]
                outputs = []
                latents = []
                targets = []
                loss_mse = None
                for s in batch_samples:
                    h = augment_H(s.h, rng) if config.augment and s.h.shape[1] >= 100 else s.h
                    out, latent = translator.forward(h)
                    tgt = _target_grid(s, config, dsp_cfg, rng)
                    term = mse_loss(out, tgt)
                    loss_mse = term if loss_mse is None else loss_mse + term
                    outputs.append(out)
                    latents.append(latent)
                    targets.append(tgt)
                loss_mse = loss_mse * (1.0 / len(batch_samples))

                loss_mmd = (_batch_mmd(translator, latents, batch_samples, config)
                            if config.beta > 0 else Tensor(0.0))

                loss_gan_t = Tensor(0.0)
                loss_gan_d = Tensor(0.0)
                if config.lambda_gan > 0:
                    fake = T.stack(outputs)
                    real = Tensor(np.stack(targets))
                    loss_gan_d = discriminator_loss(disc, real, fake)
                    backward(loss_gan_d)
                    opt_d.step()
                    loss_gan_t = generator_gan_loss(disc, fake,
                                                    config.literal_generator_loss)

                total = total_translator_loss(loss_mse, loss_mmd, loss_gan_t, config)
                if not np.isfinite(total.item()):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} batch {bi}: "
                        f"mse={loss_mse.item():.4g} mmd={loss_mmd.item():.4g} "
                        f"gan_t={loss_gan_t.item():.4g}")
                backward(total)
                opt_t.step()
                steps += 1
                sums["mse"] += loss_mse.item()
                sums["mmd"] += loss_mmd.item()
                sums["gan_t"] += loss_gan_t.item()
                sums["gan_d"] += loss_gan_d.item()

            done = len(batches)
            train_corr = _corr_scores(translator, samples[:config.eval_cap])
            val_corr = _corr_scores(translator, val_samples) if val_samples else None
            history.append({
                "epoch": epoch, "fold": fold, "seed": config.seed,
                "loss_mse": sums["mse"] / done, "loss_mmd": sums["mmd"] / done,
                "loss_gan_t": sums["gan_t"] / done, "loss_gan_d": sums["gan_d"] / done,
                "train_corr2d": train_corr, "val_corr2d": val_corr,
            })
            score = val_corr if val_corr is not None else train_corr
            if score > best_corr:
                best_corr = score
                best_state = {k: v.data.copy() for k, v in translator.parameters().items()}

    result = TrainResult(history=history, best_corr=float(best_corr),
                         best_state=best_state)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.metrics_path = os.path.join(out_dir, "metrics.csv")
        write_history_csv(result.metrics_path, history)
        result.checkpoint_path = os.path.join(out_dir, "best.pltc")
        save_checkpoint(result.checkpoint_path, best_state)
    return result


def write_history_csv(path, history) -> None:
    cols = ["epoch", "fold", "seed", "loss_mse", "loss_mmd", "loss_gan_t",
            "loss_gan_d", "train_corr2d", "val_corr2d"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in history:
            out = []
            for c in cols:
                v = row[c]
                if v is None:
                    out.append("")
                elif isinstance(v, float):
                    out.append(f"{v:.10g}")
                else:
                    out.append(str(v))
            writer.writerow(out)


# -- evaluation ---------------------------------------------------------------

def evaluate(translator: Translator, samples, fold: int = 0, seed: int = 0,
             csv_path=None, permute_seed: int = 0,
             wav_dir=None, gl_iters: int | None = None) -> dict:
    """Per-sample Corr2D and log-spectral distance, plus the permuted-target
    baseline (predictions scored against a seeded derangement of targets)."""
    rows = []
    n = len(samples)
    perm = make_rng(permute_seed).permutation(n)
    shifted = np.roll(perm, 1)
    partner = dict(zip(perm, shifted))
    preds = [translator.translate(s.h) for s in samples]
    for i, s in enumerate(samples):
        pred_mel = dsp.MelSpectrogram(np.clip(preds[i], 0.0, 1.0), s.mel.config)
        corr = dsp.corr2d(preds[i], s.mel.grid)
        corr_perm = dsp.corr2d(preds[i], samples[partner[i]].mel.grid) if n > 1 else None
        lsd = dsp.log_spectral_distance(pred_mel, s.mel)
        rows.append({"fold": fold, "seed": seed, "sample": i,
                     "subject_id": s.subject_id, "utterance_id": s.utterance_id,
                     "corr2d": corr, "lsd_db": lsd, "corr2d_permuted": corr_perm})
        if wav_dir is not None:
            os.makedirs(wav_dir, exist_ok=True)
            wav = dsp.griffin_lim(pred_mel, gl_iters)
            dsp.write_wav(os.path.join(wav_dir, f"sample_{i:03d}.wav"), wav)
    if csv_path is not None:
        _write_eval_csv(csv_path, rows)
    corr = [r["corr2d"] for r in rows]
    permuted = [r["corr2d_permuted"] for r in rows if r["corr2d_permuted"] is not None]
    return {
        "rows": rows,
        "corr2d_mean": float(np.mean(corr)),
        "corr2d_std": float(np.std(corr)),
        "lsd_mean": float(np.mean([r["lsd_db"] for r in rows])),
        "corr2d_permuted_mean": float(np.mean(permuted)) if permuted else None,
    }


def _write_eval_csv(path, rows) -> None:
    cols = ["fold", "seed", "sample", "subject_id", "utterance_id",
            "corr2d", "lsd_db", "corr2d_permuted"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([f"{r[c]:.10g}" if isinstance(r[c], float) else
                             ("" if r[c] is None else r[c]) for c in cols])


def leave_one_out(samples, config: TrainConfig, seeds=(0, 1, 2),
                  model_cfg: ModelConfig | None = None,
                  dsp_cfg: dsp.DspConfig | None = None) -> dict:
    """Subject-independent folds: each subject held out once per seed."""
    subjects = sorted({s.subject_id for s in samples})
    fold_rows = []
    for fold, subject in enumerate(subjects):
        train_set = [s for s in samples if s.subject_id != subject]
        test_set = [s for s in samples if s.subject_id == subject]
        for seed in seeds:
            cfg = replace(config, seed=seed)
            result = train(train_set, cfg, fold=fold,
                           model_cfg=model_cfg, dsp_cfg=dsp_cfg)
            with T.precision(cfg.dtype()):
                translator = Translator(model_cfg or ModelConfig(), seed=seed)
                translator.load_state(result.best_state)
                scores = evaluate(translator, test_set, fold=fold, seed=seed,
                                  permute_seed=seed)
            fold_rows.append({"fold": fold, "subject_id": subject, "seed": seed,
                              "corr2d_mean": scores["corr2d_mean"],
                              "corr2d_permuted_mean": scores["corr2d_permuted_mean"]})
    corr = [r["corr2d_mean"] for r in fold_rows]
    permuted = [r["corr2d_permuted_mean"] for r in fold_rows]
    return {
        "rows": fold_rows,
        "corr2d_mean": float(np.mean(corr)),
        "corr2d_std": float(np.std(corr)),
        "corr2d_permuted_mean": float(np.mean(permuted)),
    }

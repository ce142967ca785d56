"""Command-line toolchain: factorize, synthesize, train, eval, gen-corpus,
gradcheck.

Every command honors --seed, prints one machine-parseable key=value summary
line to stdout, and appends details to a log file. Exit codes: 1 usage,
2 input format, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import dsp, nmf, tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, default_config, load_config
from .containers import ContainerError, load_matrix, save_matrix
from .model import ModelError, Translator
from .training import TrainingError

EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_NUMERIC = 3

log = logging.getLogger("maptone")


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _positive_int(raw):
    value = int(raw)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {raw}")
    return value


def _setup_logging(path):
    logging.basicConfig(filename=path, filemode="a", level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def _summary(**kv):
    print(" ".join(f"{k}={v}" for k, v in kv.items()))


def _load_project(args):
    if getattr(args, "config", None):
        return load_config(args.config)
    return default_config()


# -- subcommands ---------------------------------------------------------------

def cmd_factorize(args):
    x, _ = load_matrix(args.input)
    cfg = nmf.NmfConfig(rank=args.rank, lam=args.lam, eta=args.eta,
                        k_neighbors=args.k, max_iters=args.max_iters,
                        tol=args.tol, seed=args.seed)
    factors = nmf.nmf_factorize(x.astype(np.float64), cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    w_path = os.path.join(args.out_dir, "W.nmfh")
    h_path = os.path.join(args.out_dir, "H.nmfh")
    trace_path = os.path.join(args.out_dir, "trace.csv")
    save_matrix(w_path, factors.w, rank=factors.rank)
    save_matrix(h_path, factors.h, rank=factors.rank)
    with open(trace_path, "w") as fh:
        fh.write("iteration,objective\n")
        for i, val in enumerate(factors.objective_trace):
            fh.write(f"{i},{val:.10g}\n")
    log.info("factorize: %s -> rank %d, %d iterations, final objective %.6g",
             args.input, factors.rank, len(factors.objective_trace),
             factors.objective_trace[-1])
    _summary(command="factorize", rank=factors.rank,
             iterations=len(factors.objective_trace),
             objective=f"{factors.objective_trace[-1]:.10g}",
             out_dir=args.out_dir)
    return 0


def cmd_synthesize(args):
    project = _load_project(args)
    h, _ = load_matrix(args.h)
    if h.shape[1] > project.model.max_width:
        raise ModelError(f"width {h.shape[1]} exceeds supported maximum "
                         f"{project.model.max_width}")
    state = load_checkpoint(args.checkpoint)
    dtype = np.float32 if args.precision == "float32" else np.float64
    with T.precision(dtype):
        translator = Translator(project.model, seed=args.seed)
        translator.load_state(state)
        t0 = time.perf_counter()
        grid = np.clip(translator.translate(h.astype(dtype)), 0.0, 1.0)
        encode_ms = (time.perf_counter() - t0) * 1e3
    save_matrix(args.out, grid)
    mel = dsp.MelSpectrogram(grid.astype(np.float64), project.dsp)
    if args.plot:
        dsp.write_pgm(args.plot, mel.grid)
    if args.wav:
        wav = dsp.griffin_lim(mel, args.gl_iters)
        dsp.write_wav(args.wav, wav)
    log.info("synthesize: %s (%dx%d) -> %s in %.1f ms", args.h, h.shape[0],
             h.shape[1], args.out, encode_ms)
    _summary(command="synthesize", width=h.shape[1],
             encode_ms=f"{encode_ms:.3f}", out=args.out,
             wav=args.wav or "-", plot=args.plot or "-")
    return 0


def cmd_train(args):
    from dataclasses import replace
    from .corpus_io import load_corpus
    from .training import train

    project = _load_project(args)
    tcfg = project.train
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    samples = load_corpus(args.corpus, project.dsp)
    if args.holdout_subject:
        val = [s for s in samples if s.subject_id == args.holdout_subject]
        fit = [s for s in samples if s.subject_id != args.holdout_subject]
        if not val:
            raise TrainingError(f"holdout subject {args.holdout_subject} "
                                "not present in corpus")
    else:
        fit, val = samples, ()
    result = train(fit, tcfg, out_dir=args.out_dir, val_samples=val,
                   model_cfg=project.model, dsp_cfg=project.dsp)
    log.info("train: %d samples, %d epochs, best corr2d %.4f",
             len(fit), tcfg.epochs, result.best_corr)
    _summary(command="train", samples=len(fit), epochs=tcfg.epochs,
             best_corr2d=f"{result.best_corr:.6f}",
             checkpoint=result.checkpoint_path, metrics=result.metrics_path)
    return 0


def cmd_eval(args):
    from .corpus_io import load_corpus
    from .training import evaluate

    project = _load_project(args)
    samples = load_corpus(args.corpus, project.dsp)
    state = load_checkpoint(args.checkpoint)
    translator = Translator(project.model, seed=args.seed)
    translator.load_state(state)
    scores = evaluate(translator, samples, fold=args.fold, seed=args.seed,
                      csv_path=args.metrics, permute_seed=args.seed,
                      wav_dir=args.wav_dir,
                      gl_iters=project.dsp.griffin_lim_iters)
    log.info("eval: %d samples, corr2d %.4f +/- %.4f", len(samples),
             scores["corr2d_mean"], scores["corr2d_std"])
    _summary(command="eval", samples=len(samples),
             corr2d_mean=f"{scores['corr2d_mean']:.6f}",
             corr2d_std=f"{scores['corr2d_std']:.6f}",
             lsd_mean=f"{scores['lsd_mean']:.4f}",
             corr2d_permuted=f"{scores['corr2d_permuted_mean']:.6f}"
             if scores["corr2d_permuted_mean"] is not None else "-",
             metrics=args.metrics)
    return 0


def cmd_gen_corpus(args):
    from .corpus_io import parse_corpus_spec, save_corpus
    from .synth import SyntheticCorpusSpec, generate_synthetic_corpus
    from .tensor import make_rng

    spec = parse_corpus_spec(args.spec) if args.spec else SyntheticCorpusSpec()
    samples = generate_synthetic_corpus(spec, make_rng(args.seed))
    manifest = save_corpus(samples, args.out_dir)
    log.info("gen-corpus: %d samples -> %s", len(samples), manifest)
    _summary(command="gen-corpus", samples=len(samples), seed=args.seed,
             manifest=manifest)
    return 0


def cmd_gradcheck(args):
    from .gradcheck import model_gradcheck, ops_gradcheck

    tol = 1e-4
    if args.scope == "ops":
        results = ops_gradcheck(seed=args.seed)
    else:
        results = model_gradcheck(seed=args.seed)
    for name, err in results.items():
        log.info("gradcheck %s: %s max_rel_err=%.3e", args.scope, name, err)
    worst = max(results.values())
    _summary(command="gradcheck", scope=args.scope,
             max_rel_err=f"{worst:.6e}",
             passed=str(worst < tol).lower())
    return 0 if worst < tol else EXIT_NUMERIC


# -- argument parsing ------------------------------------------------------------

def build_parser() -> CliParser:
    parser = CliParser(
        prog="maptone",
        description="NMF weighting-map to speech-spectrogram toolchain. "
                    "Exit codes: 1 usage error, 2 malformed input, "
                    "3 numerical failure.")
    parser.add_argument("--log", default="maptone.log",
                        help="log file for per-command details")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("factorize", help="estimate weighting maps by NMF")
    p.add_argument("--input", required=True, help="motion-feature .nmfh container")
    p.add_argument("--rank", type=_positive_int, default=20)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="manifold regularization weight")
    p.add_argument("--eta", type=float, default=0.1,
                   help="sparsity regularization weight")
    p.add_argument("--k", type=_positive_int, default=5,
                   help="graph neighbors per sample")
    p.add_argument("--max-iters", type=_positive_int, default=200)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser("synthesize", help="weighting map -> spectrogram/audio")
    p.add_argument("--h", required=True, help="weighting-map .nmfh container")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output spectrogram container")
    p.add_argument("--wav", help="optional Griffin-Lim waveform output")
    p.add_argument("--plot", help="optional P5 PGM spectrogram image")
    p.add_argument("--gl-iters", type=_positive_int, default=None)
    p.add_argument("--config")
    p.add_argument("--precision", choices=("float32", "float64"),
                   default="float32")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", help="train the translator on a corpus")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True, help="corpus manifest file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--holdout-subject",
                   help="subject id excluded from training, used as validation")
    p.add_argument("--epochs", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--metrics", required=True, help="output CSV path")
    p.add_argument("--config")
    p.add_argument("--wav-dir", help="emit Griffin-Lim WAVs per sample")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-corpus", help="generate a synthetic paired corpus")
    p.add_argument("--spec", help="corpus spec file (key=value, [corpus] section)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--scope", choices=("ops", "model"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log)
    try:
        return args.func(args)
    except (ContainerError, CheckpointError, ConfigError, ModelError,
            dsp.DspError) as exc:
        log.error("%s", exc)
        sys.stderr.write(f"maptone: {exc}\n")
        return EXIT_FORMAT
    except nmf.NmfError as exc:
        log.error("%s", exc)
        sys.stderr.write(f"maptone: {exc}\n")
        return EXIT_NUMERIC if "diverged" in str(exc) else EXIT_FORMAT
    except (TrainingError, T.NonFiniteError, FloatingPointError) as exc:
        log.error("%s", exc)
        sys.stderr.write(f"maptone: {exc}\n")
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("%s", exc)
        sys.stderr.write(f"maptone: {exc}\n")
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: data generation, training, interpolation,
evaluation, ablations, and gradient checking.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 numeric abort,
5 check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import data as data_mod
from . import evaluation, gradcheck
from .checkpoint import CheckpointError
from .data import DataError
from .model import ConfigError, InterpolationModel, ModelConfig
from .training import NumericAbort, TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5


class _Tracked(argparse.Action):
    """Store the value and remember that the flag was given explicitly."""

    def __call__(self, parser, ns, values, option_string=None):
        setattr(ns, self.dest, values)
        ns._explicit.add(self.dest)


class _TrackedFlag(argparse.Action):
    def __init__(self, *args, **kwargs):
        kwargs["nargs"] = 0
        super().__init__(*args, **kwargs)

    def __call__(self, parser, ns, values, option_string=None):
        setattr(ns, self.dest, True)
        ns._explicit.add(self.dest)


# ---------------------------------------------------------------------------
# Config files: UTF-8 `key = value` lines, '#' comments, keys matching the
# TrainConfig / ModelConfig field names.  Explicit flags win.
# ---------------------------------------------------------------------------

_FIELD_TYPES = {}
for _cls in (TrainConfig, ModelConfig):
    for _f in dataclasses.fields(_cls):
        _FIELD_TYPES[_f.name] = (_cls, _f.type)


def parse_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, lineno, path)
    return values


def _coerce(key, raw, lineno, path):
    typename = _FIELD_TYPES[key][1]
    try:
        if typename == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typename == "int":
            return int(raw)
        if typename == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: bad value {raw!r} for {key}") from None


def _build_configs(ns) -> tuple[ModelConfig, TrainConfig]:
    file_values = parse_config_file(ns.config) if getattr(ns, "config", None) else {}
    model_kwargs, train_kwargs = {}, {}
    for key, val in file_values.items():
        (model_kwargs if _FIELD_TYPES[key][0] is ModelConfig else train_kwargs)[key] = val
    flag_map = {
        "k_train": ("train", "k_train"), "mixed": ("train", "mixed_training"),
        "epochs": ("train", "epochs"), "batch": ("train", "batch_size"),
        "lr": ("train", "learning_rate"), "seed": ("train", "seed"),
        "checkpoint_every": ("train", "checkpoint_every"), "grad_clip": ("train", "grad_clip"),
        "width_mult": ("model", "width_mult"), "k_neighbors": ("model", "k_neighbors"),
        "no_norm": ("model", "use_norm"),
    }
    for flag, (kind, field) in flag_map.items():
        if flag in getattr(ns, "_explicit", set()):
            val = getattr(ns, flag)
            if flag == "no_norm":
                val = not val
            (model_kwargs if kind == "model" else train_kwargs)[field] = val
    model_cfg = ModelConfig(**model_kwargs)
    model_cfg.validate()
    return model_cfg, TrainConfig(**train_kwargs)


def _threads(ns) -> int:
    if getattr(ns, "threads", None):
        return ns.threads
    env = os.environ.get("DPCI_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_make_synth(ns) -> int:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    seq, truth = data_mod.gen_synthetic(
        kind=ns.kind, n_points=ns.points, n_frames=ns.frames, shape=ns.shape,
        shuffle_frames=ns.shuffle, seed=ns.seed, amplitude=ns.amplitude)
    data_mod.save_sequence(seq, out / "seq.dpcs")
    data_mod.save_truth(truth, out / "truth.json")
    print(f"wrote {out / 'seq.dpcs'} ({len(seq)} frames, {seq.num_points} points) and truth.json")
    return EXIT_OK


def cmd_train(ns) -> int:
    model_cfg, train_cfg = _build_configs(ns)
    sequences = [data_mod.load_sequence(p) for p in ns.data]
    result = train(sequences, model_cfg=model_cfg, train_cfg=train_cfg, out_dir=ns.out,
                   resume_from=ns.resume,
                   log=(lambda e, l, ms: print(f"epoch {e}: loss {l:.6g} ({ms:.0f} ms)"))
                   if ns.verbose else None)
    print(f"final loss {result.epoch_losses[-1]:.6g}" if result.epoch_losses
          else "no epochs run; wrote initialization checkpoint")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _interp_times(ns) -> list[float]:
    if ns.steps is not None:
        if ns.steps < 2:
            raise ConfigError("--steps must be >= 2")
        return [j / ns.steps for j in range(1, ns.steps)]
    if ns.t is None:
        raise ConfigError("one of --t or --steps is required")
    return [float(v) for v in str(ns.t).split(",")]


def cmd_interp(ns) -> int:
    model = InterpolationModel.load(ns.checkpoint)
    if ns.seq:
        seq = data_mod.load_sequence(ns.seq)
        if ns.pair is None or ns.pair + 1 >= len(seq.frames):
            raise ConfigError(f"--pair must address two frames of {ns.seq}")
        p0, p1 = seq.frames[ns.pair], seq.frames[ns.pair + 1]
    else:
        if not (ns.frame0 and ns.frame1):
            raise ConfigError("provide either --seq/--pair or --frame0/--frame1")
        p0 = data_mod.load_xyz_frame(ns.frame0)
        p1 = data_mod.load_xyz_frame(ns.frame1)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in _interp_times(ns):
        picked, internals, transform = model.interpolate(p0, p1, t)
        data_mod.save_xyz_frame(picked, out / f"interp_t{t:.6f}.xyz")
        if ns.dump_internals:
            evaluation.export_alignment_diagnostics(
                internals.alignment.matrix, out / f"alignment_t{t:.6f}")
            for tag, tens in (("coarse0", internals.coarse_0), ("coarse1", internals.coarse_1),
                              ("delta0", internals.delta_0), ("delta1", internals.delta_1),
                              ("o0", internals.o_0), ("o1", internals.o_1)):
                if tens is not None:
                    data_mod.save_xyz_frame(tens.data, out / f"{tag}_t{t:.6f}.xyz")
    print(f"wrote {len(_interp_times(ns))} interpolated frame(s) to {out}")
    return EXIT_OK


def cmd_eval(ns) -> int:
    seq = data_mod.load_sequence(ns.seq)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in (int(v) for v in str(ns.k_test).split(",")):
        report = evaluation.evaluate(ns.checkpoint, seq, k, threads=_threads(ns))
        path = out / f"report_k{k}.csv"
        evaluation.write_report(report, path, milli=ns.milli)
        print(f"k_test={k}: mean emd {report.mean_emd:.6g}, mean cd {report.mean_cd:.6g} -> {path}")
    return EXIT_OK


def cmd_ablate(ns) -> int:
    model_cfg, train_cfg = _build_configs(ns)
    seq = data_mod.load_sequence(ns.seq)
    spec = evaluation.AblationSpec(variant=ns.variant, model_cfg=model_cfg,
                                   train_cfg=train_cfg, k_test=ns.k_test)
    out = Path(ns.out)
    report, _ = evaluation.run_ablation(spec, seq, out_dir=out / ns.variant)
    path = out / f"report_{ns.variant}.csv"
    evaluation.write_report(report, path, milli=ns.milli)
    print(f"variant {ns.variant}: mean emd {report.mean_emd:.6g}, mean cd {report.mean_cd:.6g} -> {path}")
    return EXIT_OK


def cmd_gradcheck(ns) -> int:
    result = gradcheck.full_model_gradcheck(n=ns.n, width_mult=ns.width_mult, seed=ns.seed,
                                            samples=ns.samples)
    print(f"max relative gradient error {result.max_rel_error:.3e} "
          f"over {result.checked} sampled parameters (worst: {result.worst_param})")
    if not result.passed(ns.tol):
        print(f"FAIL: exceeds tolerance {ns.tol:g}")
        return EXIT_CHECK
    print(f"OK: below tolerance {ns.tol:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="dpci",
                                     description="Dynamic point-cloud temporal interpolation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synth", formatter_class=fmt,
                       help="generate a synthetic sequence with ground truth")
    p.add_argument("--kind", required=True, choices=["translate", "rotate", "sine"])
    p.add_argument("--points", type=int, required=True, help="points per frame")
    p.add_argument("--frames", type=int, required=True, help="number of frames")
    p.add_argument("--shape", default="cube", choices=["cube", "sphere"])
    p.add_argument("--shuffle", action="store_true", help="independently permute each frame's rows")
    p.add_argument("--amplitude", type=float, default=0.25, help="sine displacement amplitude")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("train", formatter_class=fmt, help="train on one or more sequences")
    p.add_argument("--data", nargs="+", required=True, help=".dpcs files or .xyz directories")
    p.add_argument("--out", required=True, help="output directory for checkpoints and loss.csv")
    p.add_argument("--config", default=None, help="key = value config file (flags override)")
    p.add_argument("--k-train", dest="k_train", type=int, default=3, action=_Tracked,
                   help="endpoint stride for training pairs")
    p.add_argument("--mixed", dest="mixed", default=False, action=_TrackedFlag,
                   help="one random in-between target per pair per epoch")
    p.add_argument("--epochs", type=int, default=1000, action=_Tracked)
    p.add_argument("--batch", type=int, default=14, action=_Tracked)
    p.add_argument("--lr", type=float, default=1e-4, action=_Tracked)
    p.add_argument("--width-mult", dest="width_mult", type=float, default=1.0, action=_Tracked)
    p.add_argument("--k-neighbors", dest="k_neighbors", type=int, default=20, action=_Tracked)
    p.add_argument("--no-norm", dest="no_norm", default=False, action=_TrackedFlag,
                   help="disable per-channel normalization layers")
    p.add_argument("--grad-clip", dest="grad_clip", type=float, default=0.0, action=_Tracked,
                   help="global gradient max-norm (0 = off)")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0,
                   action=_Tracked, help="epochs between checkpoints (0 = final only)")
    p.add_argument("--seed", type=int, default=0, action=_Tracked)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("interp", formatter_class=fmt, help="interpolate between two frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seq", default=None, help="sequence file; pair picked with --pair")
    p.add_argument("--pair", type=int, default=None, help="index of the first endpoint frame")
    p.add_argument("--frame0", default=None, help="first endpoint as a single .xyz file")
    p.add_argument("--frame1", default=None, help="second endpoint as a single .xyz file")
    p.add_argument("--t", default=None, help="interpolation time(s), comma separated")
    p.add_argument("--steps", type=int, default=None,
                   help="emit frames at t = 1/n ... (n-1)/n instead of --t")
    p.add_argument("--dump-internals", dest="dump_internals", action="store_true",
                   help="also write alignment diagnostics, coarse frames, and increments "
                        "(in normalized model coordinates)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("eval", formatter_class=fmt, help="score a checkpoint on held-out frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--k-test", dest="k_test", default="3",
                   help="subsampling stride(s), comma separated")
    p.add_argument("--milli", action="store_true", help="report metric values scaled by 1e3")
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap (default: DPCI_THREADS or available parallelism)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", formatter_class=fmt, help="train and score an ablation variant")
    p.add_argument("--variant", required=True,
                   choices=list(evaluation.ABLATION_VARIANTS) + list("abcdef"))
    p.add_argument("--seq", required=True)
    p.add_argument("--k-test", dest="k_test", type=int, default=3)
    p.add_argument("--config", default=None, help="key = value config file (flags override)")
    p.add_argument("--k-train", dest="k_train", type=int, default=3, action=_Tracked)
    p.add_argument("--mixed", dest="mixed", default=False, action=_TrackedFlag)
    p.add_argument("--epochs", type=int, default=1000, action=_Tracked)
    p.add_argument("--batch", type=int, default=14, action=_Tracked)
    p.add_argument("--lr", type=float, default=1e-4, action=_Tracked)
    p.add_argument("--width-mult", dest="width_mult", type=float, default=1.0, action=_Tracked)
    p.add_argument("--k-neighbors", dest="k_neighbors", type=int, default=20, action=_Tracked)
    p.add_argument("--no-norm", dest="no_norm", default=False, action=_TrackedFlag)
    p.add_argument("--seed", type=int, default=0, action=_Tracked)
    p.add_argument("--milli", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", formatter_class=fmt,
                       help="finite-difference check of the full loss gradient")
    p.add_argument("--n", type=int, default=32, help="points per cloud")
    p.add_argument("--width-mult", dest="width_mult", type=float, default=0.125)
    p.add_argument("--samples", type=int, default=150, help="parameter entries to sample")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv, namespace=argparse.Namespace(_explicit=set()))
    try:
        return ns.func(ns)
    except (DataError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

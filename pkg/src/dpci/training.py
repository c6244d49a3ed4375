"""Loss assembly, Adam, endpoint-pair sampling, and the epoch loop.

Each training sample is an endpoint pair (stride k apart in the source
sequence) plus one ground-truth in-between frame.  Every pair is jointly
normalized before the forward pass; the loss is the mean of the per-branch
matched distances against the target mapped through the same normalization.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, geometry, tensor
from .data import DataError, Sequence
from .model import InterpolationModel, InterpolationOutput, ModelConfig
from .tensor import Tensor


class NumericAbort(RuntimeError):
    """Training hit a NaN; the message names the offending sample or parameter."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1000
    batch_size: int = 14
    k_train: int = 3
    mixed_training: bool = False
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    grad_clip: float = 0.0  # 0: off; otherwise global max-norm

    def validate(self):
        if self.k_train < 2:
            raise ValueError(f"k_train must be >= 2 (need at least one in-between frame), got {self.k_train}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainingSample:
    p0: np.ndarray
    p1: np.ndarray
    target: np.ndarray
    t: float
    seq_name: str
    pair_index: int
    j: int

    def ident(self) -> str:
        return f"{self.seq_name or 'seq'}[pair={self.pair_index}, j={self.j}]"


def dual_loss(out: InterpolationOutput, target, cap: int = geometry.EXACT_ASSIGNMENT_CAP) -> Tensor:
    """Mean of the per-branch matched-distance losses against the target."""
    terms = [geometry.emd_loss(out.o_0, target, cap=cap)]
    if out.o_1 is not None:
        terms.append(geometry.emd_loss(out.o_1, target, cap=cap))
    total = terms[0]
    for extra in terms[1:]:
        total = tensor.add(total, extra)
    return tensor.scale(total, 1.0 / len(terms))


def loss_term_count(out: InterpolationOutput) -> int:
    return 1 if out.o_1 is None else 2


def make_samples(seq: Sequence, cfg: TrainConfig, rng: np.random.Generator | None = None) -> list[TrainingSample]:
    """Endpoint pairs (m*k, (m+1)*k) with their in-between targets.

    Without mixed training every in-between offset of every pair is yielded;
    with it, exactly one offset per pair is drawn uniformly from the seeded
    generator per call.
    """
    cfg.validate()
    k = cfg.k_train
    if len(seq.frames) < k + 1:
        raise DataError(f"sequence {seq.name!r} has {len(seq.frames)} frames; needs >= {k + 1}")
    if cfg.mixed_training and rng is None:
        rng = np.random.default_rng(cfg.seed)
    samples = []
    for pair, start in enumerate(range(0, len(seq.frames) - k, k)):
        offsets = [int(rng.integers(1, k))] if cfg.mixed_training else list(range(1, k))
        for j in offsets:
            samples.append(TrainingSample(
                p0=seq.frames[start], p1=seq.frames[start + k], target=seq.frames[start + j],
                t=j / k, seq_name=seq.name, pair_index=pair, j=j))
    return samples


def sample_stream_digest(samples: list[TrainingSample]) -> str:
    """Order-sensitive digest of the sample identifiers (data-pipeline fingerprint)."""
    h = hashlib.sha256()
    for s in samples:
        h.update(f"{s.seq_name}|{s.pair_index}|{s.j}|{s.t:.12g};".encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam update at a constant learning rate.

    Parameters whose gradient is None (unused in the last passes) are left
    untouched.  A NaN gradient aborts, naming the parameter.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    if cfg.grad_clip > 0:
        sq = sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None)
        norm = np.sqrt(sq)
        if norm > cfg.grad_clip:
            factor = cfg.grad_clip / norm
            for p in params.values():
                if p.grad is not None:
                    p.grad = p.grad * factor
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if np.isnan(g).any():
            raise NumericAbort(f"NaN gradient in parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: InterpolationModel
    epoch_losses: list[float]
    iteration_losses: list[float]
    checkpoint_path: Path | None = None
    loss_csv_path: Path | None = None


def _optimizer_arrays(state: AdamState, epoch: int) -> dict[str, np.ndarray]:
    arrays = {"opt.step": np.float32(state.step), "opt.epoch": np.float32(epoch)}
    for name, m in state.m.items():
        arrays[f"opt.m.{name}"] = m
        arrays[f"opt.v.{name}"] = state.v[name]
    return arrays


def _restore_optimizer(arrays: dict[str, np.ndarray], dtype) -> tuple[AdamState, int]:
    state = AdamState(step=int(arrays["opt.step"]))
    for name, val in arrays.items():
        if name.startswith("opt.m."):
            state.m[name[len("opt.m."):]] = np.asarray(val, dtype=dtype).copy()
        elif name.startswith("opt.v."):
            state.v[name[len("opt.v."):]] = np.asarray(val, dtype=dtype).copy()
    return state, int(arrays["opt.epoch"])


def train(dataset, model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
          out_dir=None, resume_from=None, emd_cap: int = geometry.EXACT_ASSIGNMENT_CAP,
          log=None) -> TrainResult:
    """Train on one sequence or a list of sequences.

    Per epoch: regenerate samples (one uniform in-between draw per pair when
    mixed training is on), shuffle, batch, jointly normalize each pair, run
    the dual-branch forward, average the loss over the batch, accumulate
    gradients in index order, and take one Adam step per batch.  Writes
    `loss.csv` and checkpoints under `out_dir` when given; `resume_from`
    restores model weights and optimizer state.
    """
    sequences = [dataset] if isinstance(dataset, Sequence) else list(dataset)
    if not sequences:
        raise DataError("training needs at least one sequence")
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    train_cfg.validate()

    model = InterpolationModel(model_cfg, seed=train_cfg.seed)
    opt = AdamState()
    start_epoch = 0
    if resume_from is not None:
        arrays = checkpoint.load_arrays(resume_from, dtype=np.float64)
        model.load_state(arrays)
        opt_path = Path(str(resume_from) + ".opt")
        if opt_path.exists():
            opt, start_epoch = _restore_optimizer(
                checkpoint.load_arrays(opt_path, dtype=np.float64), model_cfg.np_dtype)

    rng = np.random.default_rng(train_cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    epoch_losses: list[float] = []
    iteration_losses: list[float] = []
    csv_rows: list[tuple[int, float, float]] = []
    ckpt_path = None

    for epoch in range(start_epoch, start_epoch + train_cfg.epochs):
        t0 = time.perf_counter()
        samples = []
        for seq in sequences:
            samples.extend(make_samples(seq, train_cfg, rng=rng))
        order = rng.permutation(len(samples))
        batch_losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [samples[i] for i in order[lo : lo + train_cfg.batch_size]]
            tensor.zero_grads(model.params)
            vals = []
            for s in batch:
                x, y, transform = geometry.normalize_pair(s.p0, s.p1)
                target = transform.apply(s.target)
                out = model.forward(x, y, s.t, mode="train")
                loss = tensor.scale(dual_loss(out, target, cap=emd_cap), 1.0 / len(batch))
                if np.isnan(loss.data):
                    raise NumericAbort(f"NaN loss on sample {s.ident()}")
                tensor.backward(loss)
                vals.append(float(loss.data) * len(batch))
            adam_step(model.params, opt, train_cfg)
            batch_loss = float(np.mean(vals))
            batch_losses.append(batch_loss)
            iteration_losses.append(batch_loss)
        mean_loss = float(np.mean(batch_losses))
        epoch_losses.append(mean_loss)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        csv_rows.append((epoch, mean_loss, wall_ms))
        if log:
            log(epoch, mean_loss, wall_ms)
        due = (train_cfg.checkpoint_every > 0
               and (epoch + 1 - start_epoch) % train_cfg.checkpoint_every == 0)
        if out_dir is not None and due:
            ckpt_path = _write_checkpoint(out_dir / f"ckpt_{epoch + 1:06d}.idea", model, opt, epoch + 1)

    loss_csv = None
    if out_dir is not None:
        ckpt_path = _write_checkpoint(out_dir / "ckpt_final.idea", model, opt,
                                      start_epoch + train_cfg.epochs)
        loss_csv = out_dir / "loss.csv"
        with open(loss_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_loss", "wall_ms"])
            for row in csv_rows:
                w.writerow([row[0], f"{row[1]:.9g}", f"{row[2]:.3f}"])

    return TrainResult(model=model, epoch_losses=epoch_losses,
                       iteration_losses=iteration_losses,
                       checkpoint_path=ckpt_path, loss_csv_path=loss_csv)


def _write_checkpoint(path: Path, model: InterpolationModel, opt: AdamState, epoch: int) -> Path:
    model.save(path)
    checkpoint.save_arrays(Path(str(path) + ".opt"), _optimizer_arrays(opt, epoch))
    return path

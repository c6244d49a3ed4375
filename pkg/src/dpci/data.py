"""Point-cloud sequence ingestion, temporal subsampling, and synthetic motion.

Two on-disk formats: a directory of `frame_%04d.xyz` ASCII files (one
`x y z` triple per line) and a single `.dpcs` binary file (magic "DPCS",
u32 version=1, u32 num_frames, u32 num_points, then little-endian f32
coordinates).  Binary payloads are f32, so a save/load cycle is bit-exact
for f32-valued data; synthetic sequences are generated in f64.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DPCS_MAGIC = b"DPCS"
DPCS_VERSION = 1

_FRAME_RE = re.compile(r"frame_(\d+)\.xyz$")


class DataError(ValueError):
    """Malformed or inconsistent sequence data."""


@dataclass
class Sequence:
    """Ordered point-cloud frames with uniform time spacing and a shared point count."""

    frames: list[np.ndarray]
    frame_interval: float = 1.0
    name: str = ""

    def __post_init__(self):
        if not self.frames:
            raise DataError("sequence has no frames")
        n = self.frames[0].shape[0]
        for i, f in enumerate(self.frames):
            if f.ndim != 2 or f.shape[1] != 3:
                raise DataError(f"frame {i} is not an N x 3 array (shape {f.shape})")
            if f.shape[0] != n:
                raise DataError(f"frame {i} has {f.shape[0]} points, expected {n}")
            if not np.isfinite(f).all():
                raise DataError(f"frame {i} contains non-finite coordinates")

    @property
    def num_points(self) -> int:
        return self.frames[0].shape[0]

    def __len__(self) -> int:
        return len(self.frames)


def load_sequence(path) -> Sequence:
    """Load a sequence from an `.xyz` directory or a `.dpcs` binary file."""
    path = Path(path)
    if path.is_dir():
        return _load_xyz_dir(path)
    return _load_dpcs(path)


def save_sequence(seq: Sequence, path):
    """Save to `.dpcs` when the path has that suffix, else to an `.xyz` directory."""
    path = Path(path)
    if path.suffix == ".dpcs":
        _save_dpcs(seq, path)
    else:
        path.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            lines = [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in frame]
            (path / f"frame_{i:04d}.xyz").write_text("\n".join(lines) + "\n")


def _load_xyz_dir(path: Path) -> Sequence:
    indexed = []
    for child in path.iterdir():
        m = _FRAME_RE.search(child.name)
        if m:
            indexed.append((int(m.group(1)), child))
    if not indexed:
        raise DataError(f"no frame_*.xyz files in {path}")
    indexed.sort()
    frames = [load_xyz_frame(fp) for _, fp in indexed]
    return Sequence(frames=frames, name=path.name)


def _save_dpcs(seq: Sequence, path: Path):
    payload = bytearray()
    payload += DPCS_MAGIC
    payload += struct.pack("<III", DPCS_VERSION, len(seq.frames), seq.num_points)
    for frame in seq.frames:
        payload += np.ascontiguousarray(frame, dtype="<f4").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def _load_dpcs(path: Path) -> Sequence:
    blob = path.read_bytes()
    if blob[:4] != DPCS_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    version, num_frames, num_points = struct.unpack_from("<III", blob, 4)
    if version != DPCS_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    need = 16 + num_frames * num_points * 12
    if len(blob) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(blob)}")
    raw = np.frombuffer(blob, dtype="<f4", offset=16)
    frames = [
        raw[i * num_points * 3 : (i + 1) * num_points * 3]
        .reshape(num_points, 3)
        .astype(np.float64)
        for i in range(num_frames)
    ]
    return Sequence(frames=frames, name=path.stem)


def load_xyz_frame(path) -> np.ndarray:
    """Parse a single `.xyz` file into an N x 3 array."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed float in {line!r}") from None
    if not rows:
        raise DataError(f"{path}: empty frame")
    return np.asarray(rows, dtype=np.float64)


def save_xyz_frame(frame: np.ndarray, path):
    lines = [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(frame)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Temporal subsampling
# ---------------------------------------------------------------------------

@dataclass
class LtrSplit:
    """Low-temporal-resolution frames plus the held-out in-between ground truth."""

    ltr: Sequence
    heldout: dict[tuple[int, int], np.ndarray]  # (pair index, offset j) -> frame
    stride: int
    tail: list[np.ndarray] = field(default_factory=list)  # frames after the last kept one

    def reconstruct(self) -> Sequence:
        """Interleave LTR and held-out frames back into the original order."""
        frames = []
        for pair in range(len(self.ltr.frames) - 1):
            frames.append(self.ltr.frames[pair])
            for j in range(1, self.stride):
                frames.append(self.heldout[(pair, j)])
        frames.append(self.ltr.frames[-1])
        frames.extend(self.tail)
        return Sequence(frames=frames, frame_interval=self.ltr.frame_interval / self.stride,
                        name=self.ltr.name)


def subsample_ltr(seq: Sequence, k: int) -> LtrSplit:
    """Keep frames 0, k, 2k, ...; store the skipped frames keyed by (pair, j)."""
    if k < 1:
        raise ValueError(f"subsample stride must be >= 1, got {k}")
    if len(seq.frames) < k + 1:
        raise DataError(f"sequence of {len(seq.frames)} frames is too short for stride {k}")
    kept = list(range(0, len(seq.frames), k))
    ltr = Sequence(frames=[seq.frames[i] for i in kept],
                   frame_interval=seq.frame_interval * k, name=seq.name)
    heldout = {}
    for pair in range(len(kept) - 1):
        for j in range(1, k):
            heldout[(pair, j)] = seq.frames[kept[pair] + j]
    tail = [seq.frames[i] for i in range(kept[-1] + 1, len(seq.frames))]
    return LtrSplit(ltr=ltr, heldout=heldout, stride=k, tail=tail)


# ---------------------------------------------------------------------------
# Synthetic sequences with ground-truth trajectories
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTruth:
    """Closed-form trajectories and the per-frame row-to-trajectory permutations."""

    kind: str
    base: np.ndarray  # canonical positions, one row per trajectory id
    times: np.ndarray  # tau of each frame in [0, 1]
    perms: list[np.ndarray]  # perms[f][row] = trajectory id
    params: dict

    def trajectory(self, ids, tau: float) -> np.ndarray:
        """Positions of the given trajectory ids at time tau."""
        ids = np.asarray(ids)
        base = self.base[ids]
        if self.kind == "translate":
            return base + np.asarray(self.params["velocity"]) * tau
        if self.kind == "rotate":
            rot = _axis_angle_matrix(np.asarray(self.params["axis"]), self.params["angle"] * tau)
            return base @ rot.T
        if self.kind == "sine":
            amp = self.params["amplitude"]
            phases = np.asarray(self.params["phases"])[ids]
            dirs = np.asarray(self.params["directions"])[ids]
            return base + amp * np.sin(2 * np.pi * tau + phases)[:, None] * dirs
        raise ValueError(f"unknown synthetic kind {self.kind!r}")

    def frame_positions(self, f: int) -> np.ndarray:
        """Frame f as stored in the sequence (rows permuted per perms[f])."""
        return self.trajectory(self.perms[f], float(self.times[f]))

    def correspondents(self, frame_a: int, frame_b: int) -> np.ndarray:
        """For each row of frame_a, the row index of the same trajectory in frame_b."""
        inv_b = np.empty_like(self.perms[frame_b])
        inv_b[self.perms[frame_b]] = np.arange(len(inv_b))
        return inv_b[self.perms[frame_a]]

    def to_dict(self) -> dict:
        params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()}
        return {
            "kind": self.kind,
            "base": self.base.tolist(),
            "times": self.times.tolist(),
            "permutations": [p.tolist() for p in self.perms],
            "params": params,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTruth":
        params = dict(d["params"])
        for key in ("velocity", "axis", "phases", "directions"):
            if key in params:
                params[key] = np.asarray(params[key], dtype=np.float64)
        return cls(
            kind=d["kind"],
            base=np.asarray(d["base"], dtype=np.float64),
            times=np.asarray(d["times"], dtype=np.float64),
            perms=[np.asarray(p, dtype=np.int64) for p in d["permutations"]],
            params=params,
        )


def save_truth(truth: SyntheticTruth, path):
    Path(path).write_text(json.dumps(truth.to_dict()))


def load_truth(path) -> SyntheticTruth:
    return SyntheticTruth.from_dict(json.loads(Path(path).read_text()))


def _axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    ux, uy, uz = axis
    c, s = np.cos(angle), np.sin(angle)
    cross = np.array([[0, -uz, uy], [uz, 0, -ux], [-uy, ux, 0]])
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(axis, axis)


def _sample_shape(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "cube":
        # uniform over the surface of the cube with half-side 0.5
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-0.5, 0.5, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face % 3
        sign = np.where(face < 3, 0.5, -0.5)
        for i in range(n):
            others = [a for a in range(3) if a != axis[i]]
            pts[i, axis[i]] = sign[i]
            pts[i, others[0]] = uv[i, 0]
            pts[i, others[1]] = uv[i, 1]
        return pts
    if shape == "sphere":
        v = rng.normal(size=(n, 3))
        return 0.5 * v / np.linalg.norm(v, axis=1, keepdims=True)
    raise ValueError(f"unknown shape {shape!r}")


def gen_synthetic(kind: str, n_points: int, n_frames: int, shape: str = "cube",
                  shuffle_frames: bool = False, seed: int = 0,
                  velocity=(1.0, 0.0, 0.0), angle: float = np.pi / 2,
                  axis=(0.0, 0.0, 1.0), amplitude: float = 0.25) -> tuple[Sequence, SyntheticTruth]:
    """Generate a moving surface-sampled shape with per-frame ground truth.

    Kinds: `translate` (rigid offset velocity*tau), `rotate` (about a fixed
    axis by angle*tau), `sine` (per-point displacement amplitude *
    sin(2*pi*tau + phase_i) along per-point directions).  When
    shuffle_frames is set, each frame's rows are independently permuted and
    the permutations recorded in the returned truth.
    """
    if n_points < 8:
        raise ValueError(f"need at least 8 points, got {n_points}")
    if n_frames < 2:
        raise ValueError(f"need at least 2 frames, got {n_frames}")
    rng = np.random.default_rng(seed)
    base = _sample_shape(shape, n_points, rng)
    times = np.arange(n_frames) / (n_frames - 1)

    params: dict = {}
    if kind == "translate":
        params["velocity"] = np.asarray(velocity, dtype=np.float64)
    elif kind == "rotate":
        params["axis"] = np.asarray(axis, dtype=np.float64)
        params["angle"] = float(angle)
    elif kind == "sine":
        params["amplitude"] = float(amplitude)
        params["phases"] = rng.uniform(0, 2 * np.pi, size=n_points)
        dirs = rng.normal(size=(n_points, 3))
        params["directions"] = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")

    perms = []
    for _ in range(n_frames):
        if shuffle_frames:
            perms.append(rng.permutation(n_points).astype(np.int64))
        else:
            perms.append(np.arange(n_points, dtype=np.int64))

    truth = SyntheticTruth(kind=kind, base=base, times=times, perms=perms, params=params)
    frames = [truth.frame_positions(f) for f in range(n_frames)]
    seq = Sequence(frames=frames, name=f"{kind}-{shape}-{n_points}")
    return seq, truth


def alignment_accuracy(a: np.ndarray, truth: SyntheticTruth, pair: tuple[int, int]) -> float:
    """Fraction of rows whose alignment argmax hits the ground-truth correspondent."""
    if truth.perms is None or not len(truth.perms):
        raise ValueError("alignment_accuracy requires synthetic ground-truth permutations")
    expected = truth.correspondents(pair[0], pair[1])
    got = np.argmax(a, axis=1)
    return float((got == expected).mean())

"""The dual-branch interpolation network.

Pipeline per frame pair: a shared graph-convolution embedding maps each cloud
to per-point features (local edge features plus a pooled global descriptor);
inverse feature distances, row-standardized and row-softmaxed, give a
nonnegative row-stochastic alignment matrix; the alignment drives a coarse
linear blend of the two frames and of their features; a shared per-point MLP
regresses bounded increments that compensate the nonlinear part of each
trajectory.  The second branch runs the same computation through the
alignment transpose from the opposite endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint, geometry, tensor
from .tensor import NormState, Tensor

ALIGNMENT_SOURCES = ("features", "coordinates", "random_perm")
OUTPUT_MODES = ("coarse_plus_delta", "endpoint_plus_delta", "delta_only", "coarse_only")

# Channel widths at width_mult 1.  Edge blocks are (input, output); the raw
# 3-coordinate input and the final 3-coordinate increment are never scaled.
EDGE_BLOCKS = ((3, 64), (64, 64), (64, 128), (128, 256))
POINT_CONV_WIDTH = 512
HEAD_WIDTHS = (512, 256, 128)
COMPENSATION_WIDTHS = (1152, 576, 288)


class ConfigError(ValueError):
    """Inconsistent model configuration."""


@dataclass
class ModelConfig:
    k_neighbors: int = 20
    width_mult: float = 1.0
    eps_dist: float = 1e-8
    eps_std: float = 1e-8
    renormalize_transpose: bool = False
    use_norm: bool = True
    norm_momentum: float = 0.1
    norm_eps: float = 1e-5
    dtype: str = "float32"
    # ablation wiring; the defaults are the full model
    alignment_source: str = "features"
    output_mode: str = "coarse_plus_delta"
    branches: int = 2

    def validate(self):
        if self.alignment_source not in ALIGNMENT_SOURCES:
            raise ConfigError(f"alignment_source must be one of {ALIGNMENT_SOURCES}")
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigError(f"output_mode must be one of {OUTPUT_MODES}")
        if self.branches not in (1, 2):
            raise ConfigError("branches must be 1 or 2")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be 'float32' or 'float64'")
        for w in set(sum(([i, o] for i, o in EDGE_BLOCKS[1:]), [])) | {
            POINT_CONV_WIDTH, *HEAD_WIDTHS, *COMPENSATION_WIDTHS}:
            scaled = w * self.width_mult
            if scaled <= 0 or abs(scaled - round(scaled)) > 1e-9:
                raise ConfigError(
                    f"width_mult {self.width_mult} does not scale width {w} to a positive integer")

    def scaled(self, width: int) -> int:
        return int(round(width * self.width_mult))

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def feature_width(self) -> int:
        return self.scaled(HEAD_WIDTHS[-1]) + 2 * self.scaled(POINT_CONV_WIDTH)


@dataclass
class AlignmentResult:
    """Row-stochastic alignment plus the pre-normalization stages for diagnostics."""

    a: Tensor
    inverse_distances: np.ndarray
    standardized: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return self.a.data


@dataclass
class InterpolationOutput:
    coarse_0: Tensor
    coarse_1: Tensor | None
    delta_0: Tensor
    delta_1: Tensor | None
    o_0: Tensor
    o_1: Tensor | None
    picked: Tensor
    t: float
    alignment: AlignmentResult


class InterpolationModel:
    """Holds all learnable parameters and runs the dual-branch forward pass."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.config.validate()
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.norm_states: dict[str, NormState] = {}
        self._perm_cache: dict[int, np.ndarray] = {}
        self._build(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------

    def _add_linear(self, name: str, fan_in: int, fan_out: int, rng, with_norm: bool):
        dt = self.config.np_dtype
        bound = 1.0 / np.sqrt(fan_in)
        self.params[f"{name}.weight"] = Tensor(
            rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dt), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(
            rng.uniform(-bound, bound, size=fan_out).astype(dt), requires_grad=True)
        if with_norm and self.config.use_norm:
            state = NormState.create(fan_out, dtype=dt, momentum=self.config.norm_momentum,
                                     eps=self.config.norm_eps)
            self.norm_states[f"{name}.norm"] = state
            self.params[f"{name}.norm.gamma"] = state.gamma
            self.params[f"{name}.norm.beta"] = state.beta

    def _build(self, rng):
        cfg = self.config
        for i, (base_in, base_out) in enumerate(EDGE_BLOCKS, start=1):
            c_in = base_in if i == 1 else cfg.scaled(base_in)
            self._add_linear(f"embed.edge{i}", 2 * c_in, cfg.scaled(base_out), rng, True)
        cat_width = sum(cfg.scaled(o) for _, o in EDGE_BLOCKS)
        self._add_linear("embed.point", cat_width, cfg.scaled(POINT_CONV_WIDTH), rng, True)
        head_in = cfg.scaled(POINT_CONV_WIDTH) * 3  # pointwise + max/avg global
        for i, base_out in enumerate(HEAD_WIDTHS, start=1):
            self._add_linear(f"embed.head{i}", head_in, cfg.scaled(base_out), rng, True)
            head_in = cfg.scaled(base_out)
        comp_in = cfg.feature_width
        for i, base_out in enumerate(COMPENSATION_WIDTHS, start=1):
            self._add_linear(f"comp.fc{i}", comp_in, cfg.scaled(base_out), rng, True)
            comp_in = cfg.scaled(base_out)
        self._add_linear("comp.fc4", comp_in, 3, rng, False)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    # -- layers --------------------------------------------------------------

    def _linear(self, name: str, x: Tensor) -> Tensor:
        z = tensor.matmul(x, self.params[f"{name}.weight"])
        return tensor.add(z, self.params[f"{name}.bias"])

    def _norm(self, name: str, x: Tensor, mode: str) -> Tensor:
        if not self.config.use_norm:
            return x
        return tensor.channel_norm(x, self.norm_states[f"{name}.norm"], mode)

    def _edge_block(self, i: int, h: Tensor, mode: str) -> Tensor:
        # graph rebuilt from the current features before every block
        k = self.config.k_neighbors
        n, c = h.data.shape
        idx = geometry.knn_indices(h.data, k)
        neighbors = tensor.gather_neighbors(h, idx)
        centers = tensor.expand_mid(h, k)
        edge = tensor.concat_last([centers, tensor.sub(neighbors, centers)])
        flat = tensor.reshape(edge, (n * k, 2 * c))
        z = self._norm(f"embed.edge{i}", self._linear(f"embed.edge{i}", flat), mode)
        z = tensor.leaky_relu(z, 0.2)
        return tensor.neighbor_max(tensor.reshape(z, (n, k, z.data.shape[1])))

    def embed(self, points: np.ndarray, mode: str = "train") -> Tensor:
        """Per-point features: stacked edge-conv outputs plus a pooled global code."""
        cfg = self.config
        n = points.shape[0]
        if n <= cfg.k_neighbors:
            raise ValueError(f"embed needs more than k_neighbors={cfg.k_neighbors} points, got {n}")
        h = Tensor(np.asarray(points, dtype=cfg.np_dtype))
        blocks = []
        for i in range(1, len(EDGE_BLOCKS) + 1):
            h = self._edge_block(i, h, mode)
            blocks.append(h)
        cat = tensor.concat_last(blocks)
        x5 = tensor.leaky_relu(self._norm("embed.point", self._linear("embed.point", cat), mode), 0.2)
        pooled = tensor.concat_last([tensor.pool_points(x5, "max"), tensor.pool_points(x5, "avg")])
        global_rows = tensor.repeat_rows(pooled, n)
        z = tensor.concat_last([x5, global_rows])
        for i in range(1, len(HEAD_WIDTHS) + 1):
            z = tensor.leaky_relu(self._norm(f"embed.head{i}", self._linear(f"embed.head{i}", z), mode), 0.2)
        return tensor.concat_last([z, global_rows])

    def alignment(self, f0: Tensor, f1: Tensor) -> AlignmentResult:
        """Row-stochastic soft correspondence from inverse feature distances."""
        if f0.data.shape != f1.data.shape:
            raise ValueError(f"alignment: feature shapes differ, {f0.data.shape} vs {f1.data.shape}")
        dists = tensor.pairwise_distance(f0, f1)
        inv = tensor.reciprocal(tensor.add_scalar(dists, self.config.eps_dist))
        std = tensor.row_standardize(inv, self.config.eps_std)
        a = tensor.row_softmax(std)
        return AlignmentResult(a=a, inverse_distances=inv.data.copy(), standardized=std.data.copy())

    def _permutation_alignment(self, n: int) -> AlignmentResult:
        if n not in self._perm_cache:
            self._perm_cache[n] = np.random.default_rng((self.seed, n)).permutation(n)
        mat = np.zeros((n, n), dtype=self.config.np_dtype)
        mat[np.arange(n), self._perm_cache[n]] = 1
        a = Tensor(mat)
        return AlignmentResult(a=a, inverse_distances=mat.copy(), standardized=mat.copy())

    def _coordinate_alignment(self, p0: np.ndarray, p1: np.ndarray) -> AlignmentResult:
        return self.alignment(Tensor(np.asarray(p0, dtype=self.config.np_dtype)),
                              Tensor(np.asarray(p1, dtype=self.config.np_dtype)))

    def _transpose_alignment(self, a: Tensor) -> Tensor:
        at = tensor.transpose(a)
        if self.config.renormalize_transpose:
            at = tensor.mul(at, tensor.reciprocal(tensor.row_sums(at)))
        return at

    def coarse_interpolate(self, p0, p1, a: Tensor, t: float) -> tuple[Tensor, Tensor]:
        """Linear blend of the endpoint frames through the alignment (both branches)."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"interpolation time t={t} outside [0, 1]")
        dt = self.config.np_dtype
        P0 = Tensor(np.asarray(p0, dtype=dt))
        P1 = Tensor(np.asarray(p1, dtype=dt))
        first = tensor.add(tensor.scale(P0, 1 - t), tensor.scale(tensor.matmul(a, P1), t))
        at = self._transpose_alignment(a)
        second = tensor.add(tensor.scale(tensor.matmul(at, P0), 1 - t), tensor.scale(P1, t))
        return first, second

    def fuse_features(self, f0: Tensor, f1: Tensor, a: Tensor, t: float) -> tuple[Tensor, Tensor]:
        """The same alignment-driven blend applied to the feature matrices."""
        first = tensor.add(tensor.scale(f0, 1 - t), tensor.scale(tensor.matmul(a, f1), t))
        at = self._transpose_alignment(a)
        second = tensor.add(tensor.scale(tensor.matmul(at, f0), 1 - t), tensor.scale(f1, t))
        return first, second

    def compensate(self, fused: Tensor, mode: str = "train") -> Tensor:
        """Shared per-point MLP regressing bounded xyz increments."""
        expected = self.config.feature_width
        if fused.data.shape[1] != expected:
            raise ConfigError(
                f"compensate: fused feature width {fused.data.shape[1]} != configured {expected}")
        z = fused
        for i in range(1, len(COMPENSATION_WIDTHS) + 1):
            z = tensor.relu(self._norm(f"comp.fc{i}", self._linear(f"comp.fc{i}", z), mode))
        return tensor.tanh(self._linear("comp.fc4", z))

    # -- full pass -----------------------------------------------------------

    def forward(self, p0: np.ndarray, p1: np.ndarray, t: float, mode: str = "train") -> InterpolationOutput:
        """Dual-branch interpolation of a normalized frame pair at time t."""
        cfg = self.config
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"interpolation time t={t} outside [0, 1]")
        p0 = np.asarray(p0, dtype=cfg.np_dtype)
        p1 = np.asarray(p1, dtype=cfg.np_dtype)
        f0 = self.embed(p0, mode)
        f1 = self.embed(p1, mode)

        if cfg.alignment_source == "features":
            align = self.alignment(f0, f1)
        elif cfg.alignment_source == "coordinates":
            align = self._coordinate_alignment(p0, p1)
        else:
            align = self._permutation_alignment(p0.shape[0])

        coarse_0, coarse_1 = self.coarse_interpolate(p0, p1, align.a, t)
        fused_0, fused_1 = self.fuse_features(f0, f1, align.a, t)

        two = cfg.branches == 2
        if cfg.output_mode == "coarse_only":
            delta_0 = Tensor(np.zeros_like(coarse_0.data))
            delta_1 = Tensor(np.zeros_like(coarse_1.data)) if two else None
        else:
            delta_0 = self.compensate(fused_0, mode)
            delta_1 = self.compensate(fused_1, mode) if two else None

        if cfg.output_mode == "endpoint_plus_delta":
            coarse_0 = Tensor(p0.copy())
            coarse_1 = Tensor(p1.copy()) if two else None
        elif cfg.output_mode == "delta_only":
            coarse_0 = Tensor(np.zeros_like(p0))
            coarse_1 = Tensor(np.zeros_like(p1)) if two else None
        elif not two:
            coarse_1 = None

        o_0 = tensor.add(coarse_0, delta_0)
        o_1 = tensor.add(coarse_1, delta_1) if two else None
        picked = o_0 if (t < 0.5 or not two) else o_1
        return InterpolationOutput(coarse_0=coarse_0, coarse_1=coarse_1, delta_0=delta_0,
                                   delta_1=delta_1, o_0=o_0, o_1=o_1, picked=picked, t=t,
                                   alignment=align)

    def interpolate(self, p0_raw, p1_raw, t: float, mode: str = "eval", denormalize: bool = True):
        """Normalize a raw pair, run forward, and map the picked frame back.

        Returns (picked ndarray, InterpolationOutput, PairTransform).
        """
        x, y, transform = geometry.normalize_pair(p0_raw, p1_raw)
        if mode == "eval":
            with tensor.no_grad():
                out = self.forward(x, y, t, mode="eval")
        else:
            out = self.forward(x, y, t, mode=mode)
        picked = out.picked.data.astype(np.float64)
        if denormalize:
            picked = transform.invert(picked)
        return picked, out, transform

    # -- persistence ----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            arrays[name] = p.data
        for name, st in self.norm_states.items():
            arrays[f"{name}.running_mean"] = st.running_mean
            arrays[f"{name}.running_var"] = st.running_var
        for n, perm in self._perm_cache.items():
            arrays[f"alignment.perm_{n}"] = perm.astype(np.float32)
        arrays.update(_config_arrays(self.config, self.seed))
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray]):
        dt = self.config.np_dtype
        for name, p in self.params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint is missing parameter {name!r}")
            val = np.asarray(arrays[name], dtype=dt)
            if val.shape != p.data.shape:
                raise ConfigError(
                    f"checkpoint parameter {name!r} has shape {val.shape}, expected {p.data.shape}")
            p.data = val.copy()
        for name, st in self.norm_states.items():
            st.running_mean = np.asarray(arrays[f"{name}.running_mean"], dtype=dt).copy()
            st.running_var = np.asarray(arrays[f"{name}.running_var"], dtype=dt).copy()
        for name, val in arrays.items():
            if name.startswith("alignment.perm_"):
                self._perm_cache[int(name.rsplit("_", 1)[1])] = np.asarray(val).astype(np.int64)

    def save(self, path):
        checkpoint.save_arrays(path, self.state_arrays())

    @classmethod
    def load(cls, path, config: ModelConfig | None = None) -> "InterpolationModel":
        arrays = checkpoint.load_arrays(path, dtype=np.float64)
        if config is None:
            config, seed = _config_from_arrays(arrays)
        else:
            seed = int(arrays.get("config.perm_seed", np.float32(0)))
        m = cls(config, seed=seed)
        m.load_state(arrays)
        return m


_CONFIG_SCALARS = ("k_neighbors", "width_mult", "eps_dist", "eps_std", "norm_momentum",
                   "norm_eps", "branches")
_CONFIG_FLAGS = ("renormalize_transpose", "use_norm")


def _config_arrays(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    out = {f"config.{k}": np.float32(getattr(cfg, k)) for k in _CONFIG_SCALARS}
    out.update({f"config.{k}": np.float32(int(getattr(cfg, k))) for k in _CONFIG_FLAGS})
    out["config.alignment_source"] = np.float32(ALIGNMENT_SOURCES.index(cfg.alignment_source))
    out["config.output_mode"] = np.float32(OUTPUT_MODES.index(cfg.output_mode))
    out["config.perm_seed"] = np.float32(seed)
    return out


def _config_from_arrays(arrays: dict[str, np.ndarray]) -> tuple[ModelConfig, int]:
    if "config.width_mult" not in arrays:
        raise ConfigError("checkpoint carries no model configuration; pass one explicitly")
    cfg = ModelConfig(
        k_neighbors=int(arrays["config.k_neighbors"]),
        width_mult=float(arrays["config.width_mult"]),
        eps_dist=float(arrays["config.eps_dist"]),
        eps_std=float(arrays["config.eps_std"]),
        renormalize_transpose=bool(int(arrays["config.renormalize_transpose"])),
        use_norm=bool(int(arrays["config.use_norm"])),
        norm_momentum=float(arrays["config.norm_momentum"]),
        norm_eps=float(arrays["config.norm_eps"]),
        alignment_source=ALIGNMENT_SOURCES[int(arrays["config.alignment_source"])],
        output_mode=OUTPUT_MODES[int(arrays["config.output_mode"])],
        branches=int(arrays["config.branches"]),
    )
    return cfg, int(arrays["config.perm_seed"])


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    """Model wiring for the ablation variants (a)-(f); 'full' returns the base."""
    table = {
        "full": {},
        "a_random_perm": {"alignment_source": "random_perm"},
        "b_coord_distance": {"alignment_source": "coordinates"},
        "c_no_linear": {"output_mode": "endpoint_plus_delta"},
        "d_direct_regress": {"output_mode": "delta_only"},
        "e_no_compensation": {"output_mode": "coarse_only"},
        "f_single_branch": {"branches": 1},
    }
    short = {"a": "a_random_perm", "b": "b_coord_distance", "c": "c_no_linear",
             "d": "d_direct_regress", "e": "e_no_compensation", "f": "f_single_branch"}
    key = short.get(variant, variant)
    if key not in table:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    return replace(base, **table[key])

"""Velocity-field transformer conditioned on a per-frame timestep vector.

The network maps an N x d latent video and a length-N timestep vector to an
N x d velocity field.  Each frame gets its own sinusoidal timestep embedding
(plus a shared label embedding), and every block derives *per-frame*
scale/shift/gate modulation from that embedding:

    h += gate1 * Attn(mod1(rms_norm(h)))
    h += gate2 * MLP(mod2(rms_norm(h)))        mod(x) = x * (1 + scale) + shift

Attention is a single head over the N frames with no positional encoding, so
the network is permutation-equivariant in (frames, timesteps) unless the
optional learned frame embeddings are enabled.  Modulation projections and the
output head start at zero, making every block the identity at init and the
initial velocity field exactly zero.

Checkpoints are flat name -> tensor maps.  Low-rank adapters live next to
their base weight as ``<name>.lora_a`` / ``<name>.lora_b`` and compose at
forward time as W + (alpha/rank) * (A @ B); with B all-zero the composition is
bit-identical to the base model.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fnmatch import fnmatchcase

import numpy as np

from . import tensor as T
from .data import read_container, write_container
from .errors import ValidationError
from .tensor import Tensor, derive_seed
from .timestep import as_timestep_vector, embed_timesteps

LORA_A_SUFFIX = ".lora_a"
LORA_B_SUFFIX = ".lora_b"
DEFAULT_LORA_TARGETS = ("*.attn.w?", "*.mod.w")
_CONFIG_ENTRY = "meta.config"
_MLP_RATIO = 4


@dataclass(frozen=True)
class ModelConfig:
    n_frames: int = 8
    frame_dim: int = 64
    hidden: int = 64
    time_embed_dim: int = 32
    blocks: int = 2
    heads: int = 1
    num_labels: int = 4
    lora_rank: int = 4
    lora_alpha: float = 8.0
    frame_embeddings: bool = False

    def __post_init__(self):
        for name in ("n_frames", "frame_dim", "hidden", "time_embed_dim",
                     "blocks", "num_labels", "lora_rank"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"config field {name} must be positive")
        if self.heads != 1:
            raise ValidationError("attention is single-head; heads must be 1")
        if self.time_embed_dim % 2 != 0:
            raise ValidationError("time_embed_dim must be even")
        if self.lora_alpha <= 0:
            raise ValidationError("lora_alpha must be positive")

    def to_vector(self) -> np.ndarray:
        return np.array([
            self.n_frames, self.frame_dim, self.hidden, self.time_embed_dim,
            self.blocks, self.heads, self.num_labels, self.lora_rank,
            self.lora_alpha, float(self.frame_embeddings),
        ], dtype=np.float64)

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "ModelConfig":
        if vec.shape != (10,):
            raise ValidationError(f"config vector must have 10 entries, got {vec.shape}")
        return cls(
            n_frames=int(vec[0]), frame_dim=int(vec[1]), hidden=int(vec[2]),
            time_embed_dim=int(vec[3]), blocks=int(vec[4]), heads=int(vec[5]),
            num_labels=int(vec[6]), lora_rank=int(vec[7]), lora_alpha=float(vec[8]),
            frame_embeddings=bool(vec[9]),
        )


@dataclass(eq=False)
class Checkpoint:
    """Model config plus a flat parameter-path -> Tensor map."""

    config: ModelConfig
    params: dict[str, Tensor]

    def base_names(self) -> list[str]:
        return [n for n in self.params
                if not n.endswith(LORA_A_SUFFIX) and not n.endswith(LORA_B_SUFFIX)]

    def lora_names(self) -> list[str]:
        return [n for n in self.params
                if n.endswith(LORA_A_SUFFIX) or n.endswith(LORA_B_SUFFIX)]

    def has_lora(self) -> bool:
        return any(n.endswith(LORA_A_SUFFIX) for n in self.params)


@dataclass(frozen=True, eq=False)
class AttentionRecord:
    """Row-stochastic N x N attention maps, one per block, for one forward pass."""

    maps: tuple[np.ndarray, ...]


def structure_kind(name: str) -> str:
    """Coarse parameter family used by the drift report."""
    base = name.removesuffix(LORA_A_SUFFIX).removesuffix(LORA_B_SUFFIX)
    if ".attn." in base:
        return "attention"
    if ".mod." in base:
        return "modulation"
    if ".mlp." in base:
        return "mlp"
    if base.startswith("embed."):
        return "embeddings"
    if base.startswith("head."):
        return "head"
    return "other"


def block_index(name: str) -> int | None:
    parts = name.split(".")
    if parts[0] == "block" and len(parts) > 1 and parts[1].isdigit():
        return int(parts[1])
    return None


def init_model(config: ModelConfig, seed: int) -> Checkpoint:
    """Deterministic init: 1/sqrt(fan_in) weights, zero modulation and head.

    Zero modulation projections mean scale = shift = gate = 0 everywhere, so
    every block starts as the identity; the zero head makes the initial
    velocity field exactly zero.
    """
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "init")))
    d, D, Dt = config.frame_dim, config.hidden, config.time_embed_dim
    hidden_mlp = _MLP_RATIO * D
    params: dict[str, Tensor] = {}

    def randn(shape, fan_in):
        return Tensor(rng.standard_normal(shape) / np.sqrt(fan_in), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params["embed.input.w"] = randn((d, D), d)
    params["embed.input.b"] = zeros((1, D))
    params["embed.label"] = randn((config.num_labels, Dt), Dt)
    if config.frame_embeddings:
        params["embed.frame"] = zeros((config.n_frames, Dt))
    for i in range(config.blocks):
        prefix = f"block.{i}"
        for proj in ("wq", "wk", "wv", "wo"):
            params[f"{prefix}.attn.{proj}"] = randn((D, D), D)
        params[f"{prefix}.mlp.w1"] = randn((D, hidden_mlp), D)
        params[f"{prefix}.mlp.b1"] = zeros((1, hidden_mlp))
        params[f"{prefix}.mlp.w2"] = randn((hidden_mlp, D), hidden_mlp)
        params[f"{prefix}.mlp.b2"] = zeros((1, D))
        params[f"{prefix}.mod.w"] = zeros((Dt, 6 * D))
        params[f"{prefix}.mod.b"] = zeros((1, 6 * D))
    params["final.mod.w"] = zeros((Dt, 2 * D))
    params["final.mod.b"] = zeros((1, 2 * D))
    params["head.w"] = zeros((D, d))
    params["head.b"] = zeros((1, d))
    return Checkpoint(config=config, params=params)


def effective_weight(ckpt: Checkpoint, name: str) -> Tensor:
    """Base weight, or base + (alpha/rank) * (A @ B) when an adapter is attached."""
    base = ckpt.params[name]
    a = ckpt.params.get(name + LORA_A_SUFFIX)
    if a is None:
        return base
    b = ckpt.params[name + LORA_B_SUFFIX]
    return T.add(base, T.scale(T.matmul(a, b), ckpt.config.lora_alpha / ckpt.config.lora_rank))


def _modulate(x: Tensor, scale_vec: Tensor, shift_vec: Tensor) -> Tensor:
    return T.add(T.mul(x, T.add(scale_vec, 1.0)), shift_vec)


def _conditioning(ckpt: Checkpoint, tau: np.ndarray, label: int) -> Tensor:
    cfg = ckpt.config
    if not 0 <= label < cfg.num_labels:
        raise ValidationError(f"label {label} outside [0, {cfg.num_labels})")
    cond = embed_timesteps(tau, cfg.time_embed_dim)
    onehot = np.zeros((1, cfg.num_labels))
    onehot[0, label] = 1.0
    cond = T.add_row(cond, T.matmul(Tensor(onehot), ckpt.params["embed.label"]))
    if cfg.frame_embeddings:
        cond = T.add(cond, ckpt.params["embed.frame"])
    return cond


def modulation_vectors(ckpt: Checkpoint, tau, label: int, block: int) -> np.ndarray:
    """The raw N x 6D modulation output of one block (diagnostics/tests)."""
    cfg = ckpt.config
    if not 0 <= block < cfg.blocks:
        raise ValidationError(f"block {block} outside [0, {cfg.blocks})")
    tau = as_timestep_vector(tau, cfg.n_frames)
    with T.no_grad():
        cond = _conditioning(ckpt, tau, label)
        mod = T.add_row(T.matmul(cond, effective_weight(ckpt, f"block.{block}.mod.w")),
                        ckpt.params[f"block.{block}.mod.b"])
    return mod.data


def _forward(ckpt: Checkpoint, z: Tensor, tau: np.ndarray, label: int,
             collect: list | None) -> Tensor:
    cfg = ckpt.config
    D = cfg.hidden
    cond = _conditioning(ckpt, tau, label)
    h = T.add_row(T.matmul(z, effective_weight(ckpt, "embed.input.w")),
                  ckpt.params["embed.input.b"])
    inv_sqrt_d = 1.0 / np.sqrt(D)
    for i in range(cfg.blocks):
        prefix = f"block.{i}"
        mod = T.add_row(T.matmul(cond, effective_weight(ckpt, f"{prefix}.mod.w")),
                        ckpt.params[f"{prefix}.mod.b"])
        chunks = [T.slice_cols(mod, k * D, (k + 1) * D) for k in range(6)]
        scale1, shift1, gate1, scale2, shift2, gate2 = chunks

        x = _modulate(T.rms_norm(h), scale1, shift1)
        q = T.matmul(x, effective_weight(ckpt, f"{prefix}.attn.wq"))
        k = T.matmul(x, effective_weight(ckpt, f"{prefix}.attn.wk"))
        v = T.matmul(x, effective_weight(ckpt, f"{prefix}.attn.wv"))
        weights = T.softmax_rows(T.scale(T.matmul(q, T.transpose(k)), inv_sqrt_d))
        if collect is not None:
            collect.append(weights.data)
        attn = T.matmul(T.matmul(weights, v), effective_weight(ckpt, f"{prefix}.attn.wo"))
        h = T.add(h, T.mul(gate1, attn))

        y = _modulate(T.rms_norm(h), scale2, shift2)
        hid = T.gelu(T.add_row(T.matmul(y, effective_weight(ckpt, f"{prefix}.mlp.w1")),
                               ckpt.params[f"{prefix}.mlp.b1"]))
        mlp = T.add_row(T.matmul(hid, effective_weight(ckpt, f"{prefix}.mlp.w2")),
                        ckpt.params[f"{prefix}.mlp.b2"])
        h = T.add(h, T.mul(gate2, mlp))

    final = T.add_row(T.matmul(cond, effective_weight(ckpt, "final.mod.w")),
                      ckpt.params["final.mod.b"])
    fscale = T.slice_cols(final, 0, D)
    fshift = T.slice_cols(final, D, 2 * D)
    out = _modulate(T.rms_norm(h), fscale, fshift)
    return T.add_row(T.matmul(out, effective_weight(ckpt, "head.w")), ckpt.params["head.b"])


def _check_input(ckpt: Checkpoint, z) -> Tensor:
    cfg = ckpt.config
    if not isinstance(z, Tensor):
        z = Tensor(z)
    if z.data.shape != (cfg.n_frames, cfg.frame_dim):
        raise ValidationError(
            f"input shape {z.data.shape}, expected ({cfg.n_frames}, {cfg.frame_dim})")
    return z


def forward(ckpt: Checkpoint, z, tau, label: int) -> Tensor:
    """Predicted velocity field for latents z under per-frame timesteps tau."""
    z = _check_input(ckpt, z)
    tau = as_timestep_vector(tau, ckpt.config.n_frames)
    return _forward(ckpt, z, tau, label, None)


def forward_scalar(ckpt: Checkpoint, z, t: float, label: int) -> Tensor:
    """Classic scalar-timestep forward: broadcasts t and runs the same code path."""
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"t must lie in [0, 1], got {t}")
    z = _check_input(ckpt, z)
    tau = np.full(ckpt.config.n_frames, float(t))
    return _forward(ckpt, z, tau, label, None)


def forward_with_attention(ckpt: Checkpoint, z, tau, label: int) -> tuple[Tensor, AttentionRecord]:
    z = _check_input(ckpt, z)
    tau = as_timestep_vector(tau, ckpt.config.n_frames)
    maps: list[np.ndarray] = []
    out = _forward(ckpt, z, tau, label, maps)
    return out, AttentionRecord(maps=tuple(maps))


# ---------------------------------------------------------------------------
# adapters


def attach_lora(ckpt: Checkpoint, targets=DEFAULT_LORA_TARGETS,
                rank: int | None = None, alpha: float | None = None,
                seed: int = 0) -> Checkpoint:
    """Return a new checkpoint with rank-r adapters on every matching weight.

    A factors are random with std 1/sqrt(fan_in); B factors are zero, so the
    adapted model's forward pass is bit-identical to the base until training
    moves B.  Base tensors are re-wrapped frozen (requires_grad=False): in
    adapt mode only the low-rank factors receive gradients and updates.
    """
    rank = ckpt.config.lora_rank if rank is None else int(rank)
    alpha = ckpt.config.lora_alpha if alpha is None else float(alpha)
    if rank <= 0:
        raise ValidationError(f"lora rank must be positive, got {rank}")
    if alpha <= 0:
        raise ValidationError(f"lora alpha must be positive, got {alpha}")
    if ckpt.has_lora():
        raise ValidationError("checkpoint already has adapters attached")
    targets = tuple(targets)
    if not targets:
        raise ValidationError("no lora target patterns given")
    base = ckpt.base_names()
    matched: list[str] = []
    for pattern in targets:
        hits = [n for n in base if fnmatchcase(n, pattern)]
        if not hits:
            raise ValidationError(f"lora target pattern {pattern!r} matches no parameter")
        matched.extend(h for h in hits if h not in matched)

    params: dict[str, Tensor] = {
        name: t.detached(requires_grad=False) for name, t in ckpt.params.items()
    }
    for name in matched:
        w = ckpt.params[name]
        if w.data.ndim != 2:
            raise ValidationError(f"lora target {name!r} is not a matrix")
        fan_in = w.data.shape[0]
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "lora", name)))
        params[name + LORA_A_SUFFIX] = Tensor(
            rng.standard_normal((fan_in, rank)) / np.sqrt(fan_in), requires_grad=True)
        params[name + LORA_B_SUFFIX] = Tensor(
            np.zeros((rank, w.data.shape[1])), requires_grad=True)
    config = dataclasses.replace(ckpt.config, lora_rank=rank, lora_alpha=alpha)
    return Checkpoint(config=config, params=params)


def merge_lora(ckpt: Checkpoint) -> Checkpoint:
    """Fold every adapter into its base weight and drop the low-rank entries."""
    if not ckpt.has_lora():
        raise ValidationError("checkpoint has no adapters to merge")
    scaling = ckpt.config.lora_alpha / ckpt.config.lora_rank
    params: dict[str, Tensor] = {}
    for name in ckpt.base_names():
        t = ckpt.params[name]
        a = ckpt.params.get(name + LORA_A_SUFFIX)
        if a is None:
            params[name] = Tensor(t.data, requires_grad=True)
        else:
            b = ckpt.params[name + LORA_B_SUFFIX]
            params[name] = Tensor(t.data + scaling * (a.data @ b.data), requires_grad=True)
    return Checkpoint(config=ckpt.config, params=params)


def scale_lora_alpha(ckpt: Checkpoint, factor: float) -> Checkpoint:
    """Inference-time adapter strength: multiplies the effective alpha."""
    if not ckpt.has_lora():
        raise ValidationError("checkpoint has no adapters to scale")
    if factor <= 0:
        raise ValidationError(f"alpha scale must be positive, got {factor}")
    config = dataclasses.replace(ckpt.config, lora_alpha=ckpt.config.lora_alpha * factor)
    return Checkpoint(config=config, params=dict(ckpt.params))


# ---------------------------------------------------------------------------
# checkpoint files


def write_ckpt(path, ckpt: Checkpoint) -> None:
    entries = {name: t.data for name, t in ckpt.params.items()}
    entries[_CONFIG_ENTRY] = ckpt.config.to_vector()
    write_container(path, entries)


def read_ckpt(path) -> Checkpoint:
    entries = read_container(path)
    vec = entries.pop(_CONFIG_ENTRY, None)
    if vec is None:
        raise ValidationError(f"{path}: missing {_CONFIG_ENTRY} entry")
    config = ModelConfig.from_vector(vec)
    params = {name: Tensor(arr, requires_grad=True) for name, arr in entries.items()}
    return Checkpoint(config=config, params=params)

"""Flow-matching training with per-frame timesteps.

The path from a data video X0 to a noise video X1 is linear *per frame*: with
a timestep vector tau, frame i sits at (1 - tau_i) * X0_i + tau_i * X1_i, and
the regression target is the constant field X1 - X0 regardless of tau.  The
loss is the squared Frobenius error of the predicted field, averaged over the
batch.  With a fully synchronised tau (p_async = 0) this reduces exactly,
bit for bit, to the classic scalar-timestep flow-matching objective.

All randomness is derived from (seed, step, slot) with ``derive_seed``, so a
training run is a pure function of (checkpoint, dataset, config) and every
loss can be replayed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import VideoSample
from .errors import NumericError, ValidationError
from .model import Checkpoint, forward
from .tensor import Tensor, backward, derive_seed, seeded_randn
from .timestep import as_timestep_vector, ptss_sample

MODE_PRETRAIN = "pretrain"
MODE_ADAPT = "adapt"


def interpolate(x0, x1, tau) -> Tensor:
    """Per-frame linear path point: row i is (1 - tau_i) * x0_i + tau_i * x1_i."""
    x0 = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    x1 = x1.data if isinstance(x1, Tensor) else np.asarray(x1, dtype=np.float64)
    if x0.ndim != 2 or x0.shape != x1.shape:
        raise ValidationError(f"interpolate needs matching 2-D shapes, got {x0.shape} and {x1.shape}")
    tau = as_timestep_vector(tau, x0.shape[0])
    return Tensor((1.0 - tau)[:, None] * x0 + tau[:, None] * x1)


def target_field(x0, x1) -> Tensor:
    """The regression target X1 - X0; constant along the path."""
    x0 = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    x1 = x1.data if isinstance(x1, Tensor) else np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValidationError(f"target_field needs matching shapes, got {x0.shape} and {x1.shape}")
    return Tensor(x1 - x0)


def training_draw(n_frames: int, frame_dim: int, p_async: float,
                  seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """The (noise endpoint, timestep vector) pair for batch slot ``index``.

    Exposed so tests and diagnostics can replay exactly what ``fafm_loss``
    consumed: X1 from the unit-Gaussian prior under seed (seed, 'prior', index),
    tau from the PTSS under seed (seed, 'tau', index).
    """
    x1 = seeded_randn((n_frames, frame_dim), derive_seed(seed, "prior", index)).data
    tau = ptss_sample(n_frames, p_async, derive_seed(seed, "tau", index))
    return x1, tau


def _as_pair(item) -> tuple[np.ndarray, int]:
    if isinstance(item, VideoSample):
        return item.video, item.label
    video, label = item
    return np.asarray(video, dtype=np.float64), int(label)


def fafm_loss(ckpt: Checkpoint, batch, p_async: float, seed: int,
              velocity_fn=None) -> Tensor:
    """Frame-wise flow-matching loss, averaged over the batch.

    ``batch`` is a sequence of VideoSample or (video, label) pairs.  Per slot
    the draws come from ``training_draw``; the per-sample term is the full
    squared Frobenius error sum((v - (X1 - X0))**2), and the batch reduction
    is a left fold followed by one multiply with 1/len(batch).

    ``velocity_fn(x_tau, tau, label, index) -> array`` substitutes the model
    (testing hook); gradients then do not flow.
    """
    if len(batch) == 0:
        raise ValidationError("batch must not be empty")
    cfg = ckpt.config
    total = None
    for index, item in enumerate(batch):
        video, label = _as_pair(item)
        if video.shape != (cfg.n_frames, cfg.frame_dim):
            raise ValidationError(
                f"batch item {index} has shape {video.shape}, "
                f"expected ({cfg.n_frames}, {cfg.frame_dim})")
        x1, tau = training_draw(cfg.n_frames, cfg.frame_dim, p_async, seed, index)
        x_tau = interpolate(video, x1, tau)
        u = target_field(video, x1)
        if velocity_fn is not None:
            v = velocity_fn(x_tau.data, tau, label, index)
            if not isinstance(v, Tensor):
                v = Tensor(v)
        else:
            v = forward(ckpt, x_tau, tau, label)
        term = T.sum_all(T.square(T.sub(v, u)))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(batch))


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    mode: str = MODE_PRETRAIN
    steps: int = 1000
    batch_size: int = 64
    learning_rate: float = 3e-3
    p_async: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (MODE_PRETRAIN, MODE_ADAPT):
            raise ValidationError(f"mode must be pretrain or adapt, got {self.mode!r}")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValidationError("steps and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        # Pretraining is the synchronised-timestep phase by definition.
        if self.mode == MODE_PRETRAIN:
            self.p_async = 0.0
        elif self.p_async is None:
            self.p_async = 1.0
        if not 0.0 <= self.p_async <= 1.0:
            raise ValidationError(f"p_async must lie in [0, 1], got {self.p_async}")


@dataclass
class _AdamSlot:
    m: np.ndarray
    v: np.ndarray


class Adam:
    """Standard Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.slots: dict[str, _AdamSlot] = {}

    def step(self, params: dict[str, Tensor], names) -> dict[str, Tensor]:
        """Return a new param map with updated tensors for ``names``."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        out = dict(params)
        for name in names:
            theta = params[name]
            g = theta.grad
            if g is None:
                g = np.zeros_like(theta.data)
            slot = self.slots.get(name)
            if slot is None:
                slot = _AdamSlot(np.zeros_like(theta.data), np.zeros_like(theta.data))
                self.slots[name] = slot
            slot.m = self.beta1 * slot.m + (1.0 - self.beta1) * g
            slot.v = self.beta2 * slot.v + (1.0 - self.beta2) * (g * g)
            update = self.lr * (slot.m / bc1) / (np.sqrt(slot.v / bc2) + self.eps)
            out[name] = Tensor(theta.data - update, requires_grad=True)
        return out


def train(ckpt: Checkpoint, samples, cfg: TrainConfig) -> tuple[Checkpoint, list[float]]:
    """Run the training loop; returns (final checkpoint, per-step loss history).

    Pretrain mode updates every base tensor and rejects checkpoints that
    already carry adapters; adapt mode updates only the low-rank factors (the
    base stays bit-identical).  A non-finite loss aborts with a NumericError
    naming the step.
    """
    samples = list(samples)
    if not samples:
        raise ValidationError("training needs at least one sample")
    if cfg.mode == MODE_ADAPT and not ckpt.has_lora():
        raise ValidationError("adapt mode requires a checkpoint with adapters attached")
    if cfg.mode == MODE_PRETRAIN and ckpt.has_lora():
        raise ValidationError("pretrain mode expects a checkpoint without adapters")
    model_cfg = ckpt.config
    for i, item in enumerate(samples):
        video, label = _as_pair(item)
        if video.shape != (model_cfg.n_frames, model_cfg.frame_dim):
            raise ValidationError(f"sample {i} has shape {video.shape}")
        if not 0 <= label < model_cfg.num_labels:
            raise ValidationError(f"sample {i} has label {label} outside the model's range")

    trainable = ckpt.base_names() if cfg.mode == MODE_PRETRAIN else ckpt.lora_names()
    params = dict(ckpt.params)
    optimizer = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    history: list[float] = []
    for step in range(cfg.steps):
        picker = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "batch", step)))
        idx = picker.integers(0, len(samples), size=cfg.batch_size)
        batch = [samples[int(j)] for j in idx]
        working = Checkpoint(config=model_cfg, params=params)
        loss = fafm_loss(working, batch, cfg.p_async, derive_seed(cfg.seed, "draw", step))
        value = loss.item()
        if not np.isfinite(value):
            T.clear_tape()
            raise NumericError(f"non-finite loss {value!r} at step {step}")
        backward(loss)
        params = optimizer.step(params, trainable)
        history.append(value)
    return Checkpoint(config=model_cfg, params=params), history

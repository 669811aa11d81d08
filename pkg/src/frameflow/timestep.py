"""Per-frame timesteps: PTSS draws, sigma schedules, frame roles, and plans.

A vectorized timestep is a length-N float64 array with every entry in [0, 1];
entry i is the noise progress of frame i and may differ across frames.  The
probabilistic timestep sampler (PTSS) draws either one shared value broadcast
to all frames or N independent uniforms, controlled by the asynchrony
probability.  Sampling-side scheduling lives in FramePlan: an S x N grid of
sigma levels (and the matching model-input taus) compiled from per-frame roles.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .tensor import Tensor, _MASK64

ROLE_GENERATE = "generate"
ROLE_CLAMP = "clamp"
ROLE_PARTIAL = "partial"


def as_timestep_vector(tau, n_frames: int | None = None) -> np.ndarray:
    """Validate and return tau as a 1-D float64 array with entries in [0, 1]."""
    arr = np.asarray(tau, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError(f"timestep vector must be 1-D and non-empty, got shape {arr.shape}")
    if n_frames is not None and arr.size != n_frames:
        raise ValidationError(f"timestep vector has {arr.size} entries, expected {n_frames}")
    if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
        raise ValidationError("timestep entries must lie in [0, 1]")
    return arr


def ptss_sample(n_frames: int, p_async: float, seed: int) -> np.ndarray:
    """Draw a vectorized timestep.

    With probability ``p_async`` each frame gets an independent U[0,1) value;
    otherwise a single shared draw is broadcast to every frame.  The decision
    uses one uniform from the same PCG64 stream, so the draw is fully
    deterministic in (n_frames, p_async, seed).
    """
    if n_frames <= 0:
        raise ValidationError("n_frames must be positive")
    if not 0.0 <= p_async <= 1.0:
        raise ValidationError(f"p_async must lie in [0, 1], got {p_async}")
    rng = np.random.Generator(np.random.PCG64(int(seed) & _MASK64))
    if rng.random() < p_async:
        return rng.random(n_frames)
    return np.full(n_frames, rng.random())


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing sigma levels from 1 to 0 plus the shift used to build them."""

    levels: tuple[float, ...]
    shift: float = 1.0

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValidationError("schedule needs at least 2 levels")
        arr = np.asarray(self.levels, dtype=np.float64)
        if np.any(np.diff(arr) >= 0.0):
            raise ValidationError("sigma levels must be strictly decreasing")
        if arr[0] > 1.0 or arr[-1] < 0.0:
            raise ValidationError("sigma levels must stay within [0, 1]")
        if self.shift <= 0.0:
            raise ValidationError("shift must be positive")

    @property
    def steps(self) -> int:
        return len(self.levels)


def shift_sigma(u: float, shift: float) -> float:
    """Map a uniform grid point through sigma = shift*u / (1 + (shift-1)*u)."""
    if shift == 1.0:
        return float(u)
    return shift * u / (1.0 + (shift - 1.0) * u)


def tau_of_sigma(sigma, shift: float = 1.0):
    """Model-input timestep for a sigma level: inverse of the shift map.

    Identity when shift == 1.  Accepts scalars or arrays.
    """
    if shift <= 0.0:
        raise ValidationError("shift must be positive")
    arr = np.asarray(sigma, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValidationError("sigma must lie in [0, 1]")
    if shift == 1.0:
        out = arr.copy()
    else:
        out = arr / (shift - (shift - 1.0) * arr)
    return float(out) if np.isscalar(sigma) or arr.ndim == 0 else out


def make_schedule(steps: int, shift: float = 1.0) -> NoiseSchedule:
    """Uniform grid u_s = 1 - (s-1)/(S-1), s = 1..S, mapped through the shift map.

    The first level is exactly 1, the last exactly 0 for any shift.
    """
    if steps < 2:
        raise ValidationError("steps must be >= 2")
    if shift <= 0.0:
        raise ValidationError("shift must be positive")
    grid = [1.0 - s / (steps - 1) for s in range(steps)]
    return NoiseSchedule(tuple(shift_sigma(u, shift) for u in grid), shift=shift)


# ---------------------------------------------------------------------------
# frame roles and plans


@dataclass(frozen=True)
class FrameRole:
    """What the sampler does with one frame: generate, clamp, or partial(kappa)."""

    kind: str
    kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in (ROLE_GENERATE, ROLE_CLAMP, ROLE_PARTIAL):
            raise ValidationError(f"unknown frame role {self.kind!r}")
        if self.kind == ROLE_PARTIAL and not 0.0 <= self.kappa <= 1.0:
            raise ValidationError(f"partial kappa must lie in [0, 1], got {self.kappa}")

    @classmethod
    def generate(cls) -> "FrameRole":
        return cls(ROLE_GENERATE)

    @classmethod
    def clamp(cls) -> "FrameRole":
        return cls(ROLE_CLAMP)

    @classmethod
    def partial(cls, kappa: float) -> "FrameRole":
        return cls(ROLE_PARTIAL, float(kappa))

    @property
    def conditioned(self) -> bool:
        """True when the frame needs a clean conditioning row."""
        return self.kind in (ROLE_CLAMP, ROLE_PARTIAL)

    def __str__(self) -> str:
        if self.kind == ROLE_PARTIAL:
            return f"partial:{self.kappa:g}"
        return self.kind


def parse_role(text: str) -> FrameRole:
    """Parse 'generate', 'clamp', or 'partial:<kappa>'."""
    text = text.strip()
    if text == ROLE_GENERATE:
        return FrameRole.generate()
    if text == ROLE_CLAMP:
        return FrameRole.clamp()
    if text.startswith(ROLE_PARTIAL + ":"):
        try:
            kappa = float(text.split(":", 1)[1])
        except ValueError as exc:
            raise ValidationError(f"bad partial kappa in {text!r}") from exc
        return FrameRole.partial(kappa)
    raise ValidationError(f"unknown frame role {text!r}")


@dataclass(frozen=True, eq=False)
class FramePlan:
    """Per-step, per-frame sigma levels and the matching model-input taus.

    sigma and tau are S x N float64 arrays; row s is what the sampler sees at
    step s.  Clamp frames carry sigma 0 at every step; generate frames follow
    the schedule; partial frames follow kappa * schedule.
    """

    sigma: np.ndarray
    tau: np.ndarray
    roles: tuple[FrameRole, ...]
    schedule: NoiseSchedule = field(repr=False)

    @property
    def steps(self) -> int:
        return self.sigma.shape[0]

    @property
    def n_frames(self) -> int:
        return self.sigma.shape[1]

    def write_csv(self, path) -> None:
        """S rows x N columns of sigma, with a frame_<i> header row."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"frame_{i}" for i in range(self.n_frames)])
            for row in self.sigma:
                writer.writerow([f"{v:.17g}" for v in row])


def compile_plan(roles, schedule: NoiseSchedule) -> FramePlan:
    """Build the S x N sigma/tau grids for the given roles and schedule."""
    roles = tuple(roles)
    if not roles:
        raise ValidationError("at least one frame role is required")
    levels = np.asarray(schedule.levels, dtype=np.float64)
    columns = []
    for role in roles:
        if role.kind == ROLE_GENERATE:
            columns.append(levels)
        elif role.kind == ROLE_CLAMP:
            columns.append(np.zeros_like(levels))
        else:
            columns.append(role.kappa * levels)
    sigma = np.stack(columns, axis=1)
    tau = tau_of_sigma(sigma, schedule.shift)
    sigma.setflags(write=False)
    tau.setflags(write=False)
    return FramePlan(sigma=sigma, tau=tau, roles=roles, schedule=schedule)


# ---------------------------------------------------------------------------
# timestep embedding


def embed_timesteps(tau, dim: int) -> Tensor:
    """Sinusoidal embedding of a vectorized timestep, one row per frame.

    Row i is [sin(w_k * tau_i * 1000) | cos(w_k * tau_i * 1000)] over dim/2
    geometric frequencies w_k spanning 1 down to 1/10000.  The 1000x scale
    spreads the unit interval across the frequency bank so nearby taus stay
    distinguishable.
    """
    if dim <= 0 or dim % 2 != 0:
        raise ValidationError(f"embedding dim must be positive and even, got {dim}")
    arr = as_timestep_vector(tau)
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 10000.0 ** (-np.arange(half) / (half - 1))
    angles = arr[:, None] * 1000.0 * freqs[None, :]
    return Tensor(np.concatenate([np.sin(angles), np.cos(angles)], axis=1))

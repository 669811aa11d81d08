"""Euler sampling over per-frame sigma schedules.

Every frame carries its own sigma column (generate/clamp/partial roles), and
one Euler pass integrates all of them jointly: at step s the model sees the
current latents plus the per-frame timestep row, and each frame moves by its
own sigma delta.  Clamp frames have zero delta at every step, so conditioning
rows pass through bit-identical; a fully synchronised plan (all generate) is
bit-identical to running a classic scalar-timestep sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import VideoSample
from .errors import ValidationError
from .model import (AttentionRecord, Checkpoint, forward, forward_scalar,
                    forward_with_attention)
from .tensor import Tensor, derive_seed, no_grad, seeded_randn
from .timestep import (FrameRole, NoiseSchedule, compile_plan, make_schedule,
                       tau_of_sigma)

DEFAULT_STEPS = 10
_MODE_NAMES = ("t2v", "i2v", "i2v_noisy", "start_end", "start_end_noisy",
               "complete", "extend")


@dataclass(frozen=True, eq=False)
class SampleRequest:
    """Everything one sampling run depends on.

    ``conditioning`` maps frame index -> clean row (length frame_dim) and must
    cover exactly the clamp/partial frames.
    """

    roles: tuple[FrameRole, ...]
    schedule: NoiseSchedule
    label: int
    seed: int
    conditioning: dict[int, np.ndarray]

    def __post_init__(self):
        needed = {i for i, role in enumerate(self.roles) if role.conditioned}
        given = set(self.conditioning)
        if needed - given:
            raise ValidationError(f"missing conditioning for frames {sorted(needed - given)}")
        if given - needed:
            raise ValidationError(f"conditioning given for pure-noise frames {sorted(given - needed)}")

    @property
    def n_frames(self) -> int:
        return len(self.roles)


def request_from_sample(roles, schedule: NoiseSchedule, sample: VideoSample,
                        seed: int, label: int | None = None) -> SampleRequest:
    """Pull conditioning rows (and by default the label) from a dataset clip."""
    roles = tuple(roles)
    if len(roles) != sample.n_frames:
        raise ValidationError(f"{len(roles)} roles for a {sample.n_frames}-frame sample")
    conditioning = {i: np.array(sample.video[i]) for i, role in enumerate(roles)
                    if role.conditioned}
    return SampleRequest(roles=roles, schedule=schedule,
                         label=sample.label if label is None else int(label),
                         seed=int(seed), conditioning=conditioning)


def prepare_initial(request: SampleRequest, frame_dim: int) -> np.ndarray:
    """Initial latents: noise rows for generate, clean rows for clamp, and the
    on-path mixture (1 - kappa*sigma1) * clean + kappa*sigma1 * noise for partial."""
    n = request.n_frames
    noise = seeded_randn((n, frame_dim), derive_seed(request.seed, "init")).data
    sigma1 = request.schedule.levels[0]
    z = np.empty((n, frame_dim))
    for i, role in enumerate(request.roles):
        if role.conditioned:
            clean = np.asarray(request.conditioning[i], dtype=np.float64)
            if clean.shape != (frame_dim,):
                raise ValidationError(f"conditioning row {i} has shape {clean.shape}, "
                                      f"expected ({frame_dim},)")
            if not np.all(np.isfinite(clean)):
                raise ValidationError(f"conditioning row {i} has non-finite values")
        if role.kind == "clamp":
            z[i] = clean
        elif role.kind == "partial":
            level = role.kappa * sigma1
            z[i] = (1.0 - level) * clean + level * noise[i]
        else:
            z[i] = noise[i]
    return z


def euler_sample(ckpt: Checkpoint, request: SampleRequest, velocity_fn=None,
                 record_attention: bool = False):
    """Integrate the velocity field along the compiled per-frame plan.

    Returns (video, records): ``video`` is the N x d final state; ``records``
    is a list of per-step AttentionRecord when requested, else None.
    ``velocity_fn(z, tau_row, label) -> array`` substitutes the model.
    """
    cfg = ckpt.config
    if request.n_frames != cfg.n_frames:
        raise ValidationError(f"request has {request.n_frames} frames, model expects {cfg.n_frames}")
    plan = compile_plan(request.roles, request.schedule)
    z = prepare_initial(request, cfg.frame_dim)
    records: list[AttentionRecord] | None = [] if record_attention else None
    for s in range(plan.steps - 1):
        tau_row = plan.tau[s]
        if velocity_fn is not None:
            u = np.asarray(velocity_fn(z, tau_row, request.label), dtype=np.float64)
        elif record_attention:
            with no_grad():
                out, record = forward_with_attention(ckpt, Tensor(z), tau_row, request.label)
            records.append(record)
            u = out.data
        else:
            with no_grad():
                u = forward(ckpt, Tensor(z), tau_row, request.label).data
        delta = plan.sigma[s + 1] - plan.sigma[s]
        # Rows with zero delta (clamp frames) pass through untouched so the
        # conditioning stays bit-identical.
        z = np.where(delta[:, None] != 0.0, z + u * delta[:, None], z)
    return z, records


def euler_sample_scalar(ckpt: Checkpoint, schedule: NoiseSchedule, label: int,
                        seed: int) -> np.ndarray:
    """Reference sampler that never sees a timestep vector.

    Walks the same sigma levels with a scalar timestep through forward_scalar;
    a fully synchronised euler_sample run must match it bit for bit.
    """
    cfg = ckpt.config
    z = seeded_randn((cfg.n_frames, cfg.frame_dim), derive_seed(int(seed), "init")).data
    levels = schedule.levels
    for s in range(len(levels) - 1):
        t = tau_of_sigma(levels[s], schedule.shift)
        with no_grad():
            u = forward_scalar(ckpt, Tensor(z), t, label).data
        z = z + u * (levels[s + 1] - levels[s])
    return z


# ---------------------------------------------------------------------------
# role presets


def mode_presets(mode: str, n_frames: int, kappa: float | None = None,
                 kappa_end: float | None = None, head: int | None = None,
                 tail: int | None = None, context: int | None = None) -> tuple[FrameRole, ...]:
    """Named role layouts.

    t2v                all generate
    i2v                clamp the first frame
    i2v_noisy          partial(kappa, default 0.2) first frame
    start_end          clamp first and last
    start_end_noisy    partial(kappa, 0.3) first, partial(kappa_end, 0.7) last
    complete           clamp ``head`` leading and ``tail`` trailing frames
    extend             clamp the first ``context`` frames
    """
    if n_frames < 1:
        raise ValidationError("n_frames must be positive")
    gen, clamp = FrameRole.generate(), FrameRole.clamp()
    if mode == "t2v":
        return (gen,) * n_frames
    if mode == "i2v":
        return (clamp,) + (gen,) * (n_frames - 1)
    if mode == "i2v_noisy":
        k = 0.2 if kappa is None else float(kappa)
        return (FrameRole.partial(k),) + (gen,) * (n_frames - 1)
    if mode == "start_end":
        if n_frames < 2:
            raise ValidationError("start_end needs at least 2 frames")
        return (clamp,) + (gen,) * (n_frames - 2) + (clamp,)
    if mode == "start_end_noisy":
        if n_frames < 2:
            raise ValidationError("start_end_noisy needs at least 2 frames")
        k0 = 0.3 if kappa is None else float(kappa)
        k1 = 0.7 if kappa_end is None else float(kappa_end)
        return (FrameRole.partial(k0),) + (gen,) * (n_frames - 2) + (FrameRole.partial(k1),)
    if mode == "complete":
        h = 0 if head is None else int(head)
        t = 0 if tail is None else int(tail)
        if h < 0 or t < 0 or h + t > n_frames:
            raise ValidationError(f"complete({h},{t}) does not fit {n_frames} frames")
        return (clamp,) * h + (gen,) * (n_frames - h - t) + (clamp,) * t
    if mode == "extend":
        c = 0 if context is None else int(context)
        if c < 0 or c > n_frames:
            raise ValidationError(f"extend({c}) does not fit {n_frames} frames")
        return (clamp,) * c + (gen,) * (n_frames - c)
    raise ValidationError(f"unknown mode {mode!r}; choose from {', '.join(_MODE_NAMES)}")


def parse_mode(text: str, n_frames: int, kappa: float | None = None) -> tuple[FrameRole, ...]:
    """Parse 'name' or 'name:args' mode strings, e.g. complete:3,3 or i2v_noisy:0.2.

    An explicit ``kappa`` argument overrides the inline value for the noisy modes.
    """
    name, _, argtext = text.strip().partition(":")
    args = [a for a in argtext.split(",") if a] if argtext else []

    def as_float(s):
        try:
            return float(s)
        except ValueError as exc:
            raise ValidationError(f"bad numeric argument {s!r} in mode {text!r}") from exc

    def as_int(s):
        try:
            return int(s)
        except ValueError as exc:
            raise ValidationError(f"bad integer argument {s!r} in mode {text!r}") from exc

    if name in ("t2v", "i2v", "start_end"):
        if args:
            raise ValidationError(f"mode {name} takes no arguments")
        return mode_presets(name, n_frames)
    if name == "i2v_noisy":
        if len(args) > 1:
            raise ValidationError("i2v_noisy takes at most one kappa")
        inline = as_float(args[0]) if args else None
        return mode_presets(name, n_frames, kappa=kappa if kappa is not None else inline)
    if name == "start_end_noisy":
        if len(args) not in (0, 2):
            raise ValidationError("start_end_noisy takes zero or two kappas")
        k0 = as_float(args[0]) if args else None
        k1 = as_float(args[1]) if args else None
        if kappa is not None:
            k0 = kappa
        return mode_presets(name, n_frames, kappa=k0, kappa_end=k1)
    if name == "complete":
        if len(args) != 2:
            raise ValidationError("complete needs head,tail counts, e.g. complete:3,3")
        return mode_presets(name, n_frames, head=as_int(args[0]), tail=as_int(args[1]))
    if name == "extend":
        if len(args) != 1:
            raise ValidationError("extend needs a context count, e.g. extend:4")
        return mode_presets(name, n_frames, context=as_int(args[0]))
    raise ValidationError(f"unknown mode {name!r}; choose from {', '.join(_MODE_NAMES)}")


def default_schedule(steps: int = DEFAULT_STEPS, shift: float = 1.0) -> NoiseSchedule:
    return make_schedule(steps, shift)

"""Post-hoc reports: parameter drift, attention structure, sample metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import DIRECTIONS, centroid_track
from .errors import ValidationError
from .model import (Checkpoint, LORA_A_SUFFIX, LORA_B_SUFFIX, block_index,
                    forward_with_attention, structure_kind)
from .sampler import SampleRequest, euler_sample
from .tensor import Tensor, no_grad
from .timestep import compile_plan

_STRUCTURAL_FIELDS = ("n_frames", "frame_dim", "hidden", "time_embed_dim",
                      "blocks", "heads", "num_labels", "frame_embeddings")


# ---------------------------------------------------------------------------
# parameter drift


@dataclass(eq=False)
class DriftReport:
    """Relative Frobenius change of every effective weight, plus aggregates."""

    per_name: dict[str, float]
    by_kind: dict[str, float]
    by_block: dict[int, float]

    def top(self, n: int = 20) -> list[tuple[str, float]]:
        ranked = sorted(self.per_name.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:n]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "kind", "block", "relative_change"])
            for name in sorted(self.per_name):
                block = block_index(name)
                writer.writerow([name, structure_kind(name),
                                 "" if block is None else block,
                                 f"{self.per_name[name]:.12g}"])


def _effective_array(ckpt: Checkpoint, name: str) -> np.ndarray:
    t = ckpt.params[name]
    a = ckpt.params.get(name + LORA_A_SUFFIX)
    if a is None:
        return t.data
    b = ckpt.params[name + LORA_B_SUFFIX]
    return t.data + (ckpt.config.lora_alpha / ckpt.config.lora_rank) * (a.data @ b.data)


def drift_report(base: Checkpoint, adapted: Checkpoint) -> DriftReport:
    """Compare effective weights name by name: ||W_a - W_b||_F / ||W_b||_F.

    Adapters in either checkpoint are folded in before comparing.  When the
    base weight has zero norm the raw delta norm is reported instead (the
    ratio would be 0/0 for untouched zero-initialised tensors).
    """
    for fld in _STRUCTURAL_FIELDS:
        if getattr(base.config, fld) != getattr(adapted.config, fld):
            raise ValidationError(f"checkpoint configs disagree on {fld}")
    base_names = sorted(base.base_names())
    if base_names != sorted(adapted.base_names()):
        raise ValidationError("checkpoints carry different parameter sets")
    per_name: dict[str, float] = {}
    for name in base_names:
        w_base = _effective_array(base, name)
        w_adapted = _effective_array(adapted, name)
        if w_base.shape != w_adapted.shape:
            raise ValidationError(f"shape mismatch for {name}")
        denom = float(np.linalg.norm(w_base))
        delta = float(np.linalg.norm(w_adapted - w_base))
        per_name[name] = delta / denom if denom > 0.0 else delta

    kinds: dict[str, list[float]] = {}
    blocks: dict[int, list[float]] = {}
    for name, rel in per_name.items():
        kinds.setdefault(structure_kind(name), []).append(rel)
        idx = block_index(name)
        if idx is not None:
            blocks.setdefault(idx, []).append(rel)
    return DriftReport(
        per_name=per_name,
        by_kind={k: float(np.mean(v)) for k, v in sorted(kinds.items())},
        by_block={k: float(np.mean(v)) for k, v in sorted(blocks.items())},
    )


# ---------------------------------------------------------------------------
# attention probes


@dataclass(eq=False)
class AttentionProbe:
    """Final-block attention maps keyed by sampler step, with mass summaries."""

    maps: dict[int, np.ndarray]
    diag_mass: dict[int, float]
    first_col_mass: dict[int, float]

    def write_stats_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "diag_mass", "first_col_mass"])
            for step in sorted(self.maps):
                writer.writerow([step, f"{self.diag_mass[step]:.12g}",
                                 f"{self.first_col_mass[step]:.12g}"])

    def write_map_csv(self, path, step: int) -> None:
        grid = self.maps[step]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"frame_{j}" for j in range(grid.shape[1])])
            for row in grid:
                writer.writerow([f"{v:.12g}" for v in row])


def attention_probe(ckpt: Checkpoint, request: SampleRequest, steps) -> AttentionProbe:
    """Sample once, keeping the final block's attention at the requested steps.

    Step indices address plan rows 0..S-1.  The sampler itself evaluates the
    model at rows 0..S-2; a request for the last row runs one extra forward
    pass at the terminal state (no Euler update happens there).
    """
    plan = compile_plan(request.roles, request.schedule)
    steps = sorted(set(int(s) for s in steps))
    for s in steps:
        if s < 0 or s >= plan.steps:
            raise ValidationError(f"step index {s} outside plan of {plan.steps} levels")
    video, records = euler_sample(ckpt, request, record_attention=True)
    maps: dict[int, np.ndarray] = {}
    for s in steps:
        if s < len(records):
            maps[s] = records[s].maps[-1]
        else:
            with no_grad():
                _, record = forward_with_attention(
                    ckpt, Tensor(video), plan.tau[s], request.label)
            maps[s] = record.maps[-1]
    diag = {s: float(np.mean(np.diag(m))) for s, m in maps.items()}
    first = {s: float(np.mean(m[:, 0])) for s, m in maps.items()}
    return AttentionProbe(maps=maps, diag_mass=diag, first_col_mass=first)


# ---------------------------------------------------------------------------
# sample metrics


def conditioning_fidelity(video: np.ndarray, request: SampleRequest) -> tuple[float | None, float | None]:
    """(max abs error on clamp frames, max abs deviation of partial frames).

    Clamp error must be zero by construction; partial deviation measures how
    far the model moved a partially-re-noised frame from its clean source.
    Entries are None when the request has no frame of that role.
    """
    clamp_err: float | None = None
    partial_err: float | None = None
    for i, role in enumerate(request.roles):
        if not role.conditioned:
            continue
        err = float(np.max(np.abs(video[i] - request.conditioning[i])))
        if role.kind == "clamp":
            clamp_err = err if clamp_err is None else max(clamp_err, err)
        else:
            partial_err = err if partial_err is None else max(partial_err, err)
    return clamp_err, partial_err


def smoothness(video: np.ndarray) -> float:
    """Mean squared per-pixel difference between consecutive frames."""
    video = np.asarray(video, dtype=np.float64)
    if video.shape[0] < 2:
        raise ValidationError("smoothness needs at least 2 frames")
    diffs = np.diff(video, axis=0)
    return float(np.mean(diffs * diffs))


def dynamic_degree(video: np.ndarray, side: int) -> float:
    """Mean centroid displacement magnitude per frame step."""
    track = centroid_track(video, side)
    steps = np.diff(track, axis=0)
    return float(np.mean(np.linalg.norm(steps, axis=1)))


def label_agreement(video: np.ndarray, side: int, label: int) -> bool:
    """True when the mean centroid displacement points along the labelled direction."""
    if not 0 <= label < len(DIRECTIONS):
        raise ValidationError(f"label {label} outside the direction set")
    track = centroid_track(video, side)
    mean_step = (track[-1] - track[0]) / (len(track) - 1)
    vx, vy = DIRECTIONS[label]
    return float(mean_step[0] * vx + mean_step[1] * vy) > 0.0

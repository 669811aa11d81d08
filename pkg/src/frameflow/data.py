"""Synthetic bouncing-blob videos and the on-disk byte formats.

Videos are N x d float64 arrays: each row is one side x side frame, row-major,
pixel values in [-1, 1] (background -1, blob peak +1).  A truncated Gaussian
blob (sigma = side/6, cut to exact background beyond 2 sigma) moves one grid
unit per frame in one of four axis directions and reflects specularly off an
inset bounce band, so an interior move relocates pixel values exactly and the
net travel always keeps the sign of its direction label.

File formats (all little-endian):

FVT1 tensor       magic ``FVT1`` | u8 rank | rank x u32 extents | f32 payload,
                  row-major.  Storage is f32; compute is f64.
FVCK container    magic ``FVCK`` | u32 entry count | entries of
                  (u16 name length | UTF-8 name | FVT1 blob).  Used for both
                  checkpoints and datasets.
PGM frame         binary P5, maxval 255, linear [-1, 1] -> [0, 255].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericError, ValidationError
from .tensor import derive_seed

# Direction labels, in grid coordinates (x = column, y = row).  The blob
# moves exactly one cell per frame along one axis.
DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))
LABEL_NAMES = ("right", "left", "down", "up")

_TRUNCATION_SIGMAS = 2.0
_MAX_TENSOR_ENTRIES = 100_000_000


@dataclass(frozen=True, eq=False)
class VideoSample:
    """One clip: pixels, its motion-direction label, and the start/velocity meta."""

    video: np.ndarray  # N x side*side, float64 in [-1, 1]
    label: int
    meta: tuple[float, float, float, float]  # x0, y0, vx, vy

    @property
    def n_frames(self) -> int:
        return self.video.shape[0]


def blob_sigma(side: int) -> float:
    return side / 6.0


def bounce_band(side: int) -> tuple[float, float]:
    """Inclusive [lo, hi] range the blob centre may occupy along each axis.

    The margin of 1.5 sigma keeps the bulk of the blob on-grid even when the
    centre sits on a wall, so the rendered centroid stays close to the true
    centre and reflections read as reversals rather than clipping artefacts.
    """
    margin = max(1, round(1.5 * blob_sigma(side)))
    lo, hi = float(margin), float(side - 1 - margin)
    if hi - lo < 1.0:
        raise ValidationError(f"side {side} leaves no room for the blob to move")
    return lo, hi


def reflect_positions(start: float, velocity: float, n: int, lo: float, hi: float) -> list[float]:
    """Centre coordinates over n frames with specular reflection at lo/hi."""
    if not lo <= start <= hi:
        raise ValidationError(f"start {start} outside bounce band [{lo}, {hi}]")
    pos, vel = float(start), float(velocity)
    out = [pos]
    for _ in range(n - 1):
        pos += vel
        if pos > hi:
            pos = 2.0 * hi - pos
            vel = -vel
        elif pos < lo:
            pos = 2.0 * lo - pos
            vel = -vel
        out.append(pos)
    return out


def render_frame(cx: float, cy: float, side: int) -> np.ndarray:
    """One flattened frame: truncated Gaussian blob at (cx, cy) on a -1 background."""
    sig = blob_sigma(side)
    coords = np.arange(side, dtype=np.float64)
    r2 = (coords[None, :] - cx) ** 2 + (coords[:, None] - cy) ** 2
    frame = np.full((side, side), -1.0)
    mask = r2 <= (_TRUNCATION_SIGMAS * sig) ** 2
    frame[mask] = np.clip(2.0 * np.exp(-r2[mask] / (2.0 * sig * sig)) - 1.0, -1.0, 1.0)
    return frame.reshape(side * side)


def render_video(start: tuple[float, float], velocity: tuple[float, float],
                 n_frames: int, side: int) -> np.ndarray:
    lo, hi = bounce_band(side)
    xs = reflect_positions(start[0], velocity[0], n_frames, lo, hi)
    ys = reflect_positions(start[1], velocity[1], n_frames, lo, hi)
    return np.stack([render_frame(x, y, side) for x, y in zip(xs, ys)])


def gen_bouncing(count: int, n_frames: int, side: int, seed: int,
                 first_index: int = 0) -> list[VideoSample]:
    """Deterministic dataset: sample i depends only on (seed, i).

    The direction label is uniform over right/left/down/up; the start position
    is rejection-sampled inside the bounce band until both the centre travel
    and the rendered centroid travel over the clip keep the sign of the
    labelled direction.  (Clips that would start at a turning point, or whose
    blob is clipped at a wall just enough to drag the centroid backwards, are
    redrawn — so the direction label is always recoverable from the pixels.)

    ``first_index`` shifts the index range to [first_index, first_index+count),
    letting parallel workers each produce an exact slice of the same dataset.
    """
    if count <= 0 or n_frames < 2:
        raise ValidationError("count must be positive and n_frames >= 2")
    if side < 4:
        raise ValidationError(f"side must be >= 4, got {side}")
    lo, hi = bounce_band(side)
    samples = []
    for i in range(first_index, first_index + count):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "sample", i)))
        label = int(rng.integers(0, len(DIRECTIONS)))
        vx, vy = (float(d) for d in DIRECTIONS[label])
        for _ in range(10_000):
            sx = rng.uniform(lo, hi)
            sy = rng.uniform(lo, hi)
            xs = reflect_positions(sx, vx, n_frames, lo, hi)
            ys = reflect_positions(sy, vy, n_frames, lo, hi)
            net = (xs[-1] - xs[0]) * vx + (ys[-1] - ys[0]) * vy
            # 1e-9 rather than 0: reflection arithmetic can leave +-1e-16 of
            # jitter on a trajectory that actually folds back onto itself.
            if net <= 1e-9:
                continue
            video = render_video((sx, sy), (vx, vy), n_frames, side)
            track = centroid_track(video, side)
            cnet = (track[-1, 0] - track[0, 0]) * vx + (track[-1, 1] - track[0, 1]) * vy
            if cnet > 1e-9:
                break
        else:
            # Some (n_frames, side) pairs make every trajectory fold back onto
            # itself (clip length equals a whole number of band round-trips),
            # so no start satisfies the net-travel condition.
            raise ValidationError(
                f"no forward-moving trajectory exists for n_frames={n_frames}, "
                f"side={side}; pick a clip length that is not a multiple of the "
                f"bounce period")
        samples.append(VideoSample(video=video, label=label, meta=(sx, sy, vx, vy)))
    return samples


def centroid(frame: np.ndarray, side: int) -> tuple[float, float]:
    """Intensity-weighted centre of a flattened frame, weights max(pixel + 1, 0).

    On clean data this is the plain (pixel + 1) weighting; the clamp only
    discards out-of-range pixels that a model may emit.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (side * side,):
        raise ValidationError(f"frame shape {frame.shape} does not match side {side}")
    w = np.maximum(frame + 1.0, 0.0).reshape(side, side)
    total = w.sum()
    if total <= 0.0:
        raise ValidationError("all-background frame has no centroid")
    coords = np.arange(side, dtype=np.float64)
    cx = float((w * coords[None, :]).sum() / total)
    cy = float((w * coords[:, None]).sum() / total)
    return cx, cy


def centroid_track(video: np.ndarray, side: int) -> np.ndarray:
    """Per-frame centroids of a video, shape N x 2 (columns cx, cy)."""
    return np.array([centroid(row, side) for row in np.asarray(video, dtype=np.float64)])


# ---------------------------------------------------------------------------
# FVT1 tensors

_FVT_MAGIC = b"FVT1"
_FVCK_MAGIC = b"FVCK"


def _pack_fvt(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("refusing to serialize non-finite values")
    head = [_FVT_MAGIC, struct.pack("<B", arr.ndim)]
    for extent in arr.shape:
        if extent <= 0 or extent > 0xFFFFFFFF:
            raise ValidationError(f"extent {extent} not representable")
        head.append(struct.pack("<I", extent))
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return b"".join(head) + payload


def _unpack_fvt(buf: bytes, offset: int, where: str) -> tuple[np.ndarray, int]:
    if len(buf) - offset < 5:
        raise ValidationError(f"{where}: truncated header")
    if buf[offset:offset + 4] != _FVT_MAGIC:
        raise ValidationError(f"{where}: bad magic {buf[offset:offset + 4]!r}, expected FVT1")
    rank = buf[offset + 4]
    pos = offset + 5
    if len(buf) - pos < 4 * rank:
        raise ValidationError(f"{where}: truncated extent list")
    shape = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    entries = 1
    for extent in shape:
        if extent == 0:
            raise ValidationError(f"{where}: zero extent")
        entries *= extent
        if entries > _MAX_TENSOR_ENTRIES:
            raise ValidationError(f"{where}: extent overflow ({shape})")
    nbytes = entries * 4
    if len(buf) - pos < nbytes:
        raise ValidationError(f"{where}: truncated payload, need {nbytes} bytes")
    flat = np.frombuffer(buf, dtype="<f4", count=entries, offset=pos)
    if not np.all(np.isfinite(flat)):
        raise NumericError(f"{where}: stored tensor contains non-finite values")
    return flat.astype(np.float64).reshape(shape), pos + nbytes


def write_fvt(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(_pack_fvt(arr))


def read_fvt(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = _unpack_fvt(buf, 0, str(path))
    if end != len(buf):
        raise ValidationError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


# ---------------------------------------------------------------------------
# FVCK containers (named tensor maps)


def write_container(path, entries: dict[str, np.ndarray]) -> None:
    """Write named tensors in sorted-name order (byte-reproducible)."""
    blobs = [_FVCK_MAGIC, struct.pack("<I", len(entries))]
    for name in sorted(entries):
        encoded = name.encode("utf-8")
        if not encoded or len(encoded) > 0xFFFF:
            raise ValidationError(f"bad entry name {name!r}")
        arr = np.asarray(entries[name], dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"entry {name!r} contains non-finite values")
        blobs.append(struct.pack("<H", len(encoded)))
        blobs.append(encoded)
        blobs.append(_pack_fvt(arr))
    Path(path).write_bytes(b"".join(blobs))


def read_container(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    where = str(path)
    if len(buf) < 8 or buf[:4] != _FVCK_MAGIC:
        raise ValidationError(f"{where}: bad magic, expected FVCK")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) - pos < 2:
            raise ValidationError(f"{where}: truncated entry header")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) - pos < name_len:
            raise ValidationError(f"{where}: truncated entry name")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if name in entries:
            raise ValidationError(f"{where}: duplicate entry {name!r}")
        arr, pos = _unpack_fvt(buf, pos, f"{where}:{name}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{where}: entry {name!r} contains non-finite values")
        entries[name] = arr
    if pos != len(buf):
        raise ValidationError(f"{where}: {len(buf) - pos} trailing bytes")
    return entries


# ---------------------------------------------------------------------------
# datasets on disk


def write_dataset(path, samples: list[VideoSample], side: int) -> None:
    if not samples:
        raise ValidationError("refusing to write an empty dataset")
    n_frames = samples[0].n_frames
    entries: dict[str, np.ndarray] = {
        "meta.dataset": np.array([len(samples), n_frames, side, len(DIRECTIONS)], dtype=np.float64),
    }
    for i, sample in enumerate(samples):
        if sample.video.shape != (n_frames, side * side):
            raise ValidationError(f"sample {i} has shape {sample.video.shape}")
        entries[f"video.{i}"] = sample.video
        entries[f"label.{i}"] = np.float64(sample.label)
        entries[f"meta.{i}"] = np.asarray(sample.meta, dtype=np.float64)
    write_container(path, entries)


def read_dataset(path) -> tuple[list[VideoSample], int]:
    """Returns (samples, side)."""
    entries = read_container(path)
    header = entries.get("meta.dataset")
    if header is None or header.shape != (4,):
        raise ValidationError(f"{path}: missing meta.dataset header entry")
    count, n_frames, side = int(header[0]), int(header[1]), int(header[2])
    samples = []
    for i in range(count):
        try:
            video = entries[f"video.{i}"]
            label = entries[f"label.{i}"]
            meta = entries[f"meta.{i}"]
        except KeyError as exc:
            raise ValidationError(f"{path}: missing entry for sample {i}") from exc
        if video.shape != (n_frames, side * side):
            raise ValidationError(f"{path}: video.{i} has shape {video.shape}")
        samples.append(VideoSample(video=video, label=int(label), meta=tuple(meta.tolist())))
    return samples, side


# ---------------------------------------------------------------------------
# PGM frames


def write_pgm(path, frame: np.ndarray, side: int) -> None:
    """Binary P5 frame; [-1, 1] maps linearly onto [0, 255] (clipped outside)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (side * side,):
        raise ValidationError(f"frame shape {frame.shape} does not match side {side}")
    levels = np.clip(np.rint((frame + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{side} {side}\n255\n".encode("ascii")
    Path(path).write_bytes(header + levels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Inverse of write_pgm up to quantisation; returns a flattened [-1, 1] frame."""
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValidationError(f"{path}: not an 8-bit binary PGM")
    width, height = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=width * height)
    return pixels.astype(np.float64) / 255.0 * 2.0 - 1.0

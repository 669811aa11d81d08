"""Command-line interface.

Commands: gen-data, pretrain, adapt, sample, eval, analyze attention,
analyze drift.  Every command takes --config PATH (a key = value file whose
keys must belong to that command), applies CLI flags on top, writes the fully
resolved parameter set to <out>/config.resolved, and emits CSV tables with
header rows plus a rendered PNG figure next to each report.

Exit codes: 0 success, 1 validation problem (bad arguments, keys, files),
2 numeric failure (non-finite loss or tensor values).
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import plots
from .analysis import (attention_probe, conditioning_fidelity, drift_report,
                       dynamic_degree, label_agreement, smoothness)
from .data import (centroid_track, gen_bouncing, read_dataset, write_dataset,
                   write_fvt, write_pgm, read_fvt)
from .errors import NumericError, ValidationError
from .flow import TrainConfig, train
from .model import (ModelConfig, attach_lora, init_model, read_ckpt,
                    scale_lora_alpha, write_ckpt)
from .sampler import (SampleRequest, euler_sample, parse_mode,
                      request_from_sample)
from .tensor import derive_seed
from .timestep import compile_plan, make_schedule

_int, _float, _str = int, float, str


def _bool(text) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean value, got {text!r}")

# Per-command key registries: key -> (caster, default).  A config file key
# outside its command's registry is an error.
_REGISTRY = {
    "gen-data": {
        "out": (_str, None), "seed": (_int, 0), "count": (_int, 1000),
        "n_frames": (_int, 8), "side": (_int, 8), "workers": (_int, 1),
    },
    "pretrain": {
        "out": (_str, None), "seed": (_int, 0), "dataset": (_str, None),
        "steps": (_int, 2000), "batch_size": (_int, 64),
        "learning_rate": (_float, 3e-3), "hidden": (_int, 128),
        "time_embed_dim": (_int, 64), "blocks": (_int, 2),
        "frame_embeddings": (_bool, True),
    },
    "adapt": {
        "out": (_str, None), "seed": (_int, 0), "base": (_str, None),
        "dataset": (_str, None), "steps": (_int, 1000), "batch_size": (_int, 48),
        "learning_rate": (_float, 3e-3), "lora_rank": (_int, 4),
        "lora_alpha": (_float, 8.0), "p_async": (_float, 1.0),
    },
    "sample": {
        "out": (_str, None), "seed": (_int, 0), "ckpt": (_str, None),
        "mode": (_str, "t2v"), "kappa": (_float, None), "steps": (_int, 10),
        "shift": (_float, 1.0), "label": (_int, None), "dataset": (_str, None),
        "sample_index": (_int, 0), "count": (_int, 1), "workers": (_int, 1),
        "lora_alpha_scale": (_float, 1.0),
    },
    "eval": {
        "out": (_str, None), "run": (_str, None), "dataset": (_str, None),
    },
    "analyze-attention": {
        "out": (_str, None), "seed": (_int, 0), "ckpt": (_str, None),
        "mode": (_str, "i2v"), "kappa": (_float, None), "steps": (_int, 10),
        "shift": (_float, 1.0), "label": (_int, None), "dataset": (_str, None),
        "sample_index": (_int, 0), "record_steps": (_str, "0,3,6,9"),
    },
    "analyze-drift": {
        "out": (_str, None), "base": (_str, None), "adapted": (_str, None),
        "top": (_int, 20),
    },
}

_REQUIRED = {
    "gen-data": ("out",),
    "pretrain": ("out", "dataset"),
    "adapt": ("out", "base", "dataset"),
    "sample": ("out", "ckpt"),
    "eval": ("out", "run"),
    "analyze-attention": ("out", "ckpt", "dataset"),
    "analyze-drift": ("out", "base", "adapted"),
}


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so bad usage maps to exit code 1."""

    def error(self, message):
        raise ValidationError(message)


def read_config_file(path) -> dict[str, str]:
    """Parse a key = value file; '#' starts a comment, blank lines are skipped."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ValidationError(f"{path}:{lineno}: empty key")
        if key in values:
            raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _resolve(command: str, args: argparse.Namespace) -> dict:
    registry = _REGISTRY[command]
    merged = {key: default for key, (_, default) in registry.items()}
    if args.config is not None:
        for key, raw in read_config_file(args.config).items():
            if key not in registry:
                raise ValidationError(f"unknown config key {key!r} for command {command}")
            caster = registry[key][0]
            try:
                merged[key] = caster(raw)
            except ValueError as exc:
                raise ValidationError(f"config key {key!r}: cannot parse {raw!r}") from exc
    for key in registry:
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            merged[key] = cli_value
    for key in _REQUIRED[command]:
        if merged[key] is None:
            raise ValidationError(f"{command} requires {key!r} (flag --{key.replace('_', '-')})")
    return merged


def _write_resolved(out_dir: Path, params: dict) -> None:
    lines = [f"{key} = {params[key]}" for key in sorted(params) if params[key] is not None]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n")


def _out_dir(params: dict) -> Path:
    out = Path(params["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# gen-data


def _gen_range(seed: int, n_frames: int, side: int, lo: int, hi: int):
    return gen_bouncing(hi - lo, n_frames, side, seed, first_index=lo)


def cmd_gen_data(params: dict) -> int:
    out = _out_dir(params)
    count, workers = params["count"], max(1, params["workers"])
    if workers == 1:
        samples = gen_bouncing(count, params["n_frames"], params["side"], params["seed"])
    else:
        chunk = max(1, math.ceil(count / (workers * 4)))
        ranges = [(lo, min(lo + chunk, count)) for lo in range(0, count, chunk)]
        samples = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_gen_range, params["seed"], params["n_frames"],
                                   params["side"], lo, hi) for lo, hi in ranges]
            for future in futures:  # submission order == index order
                samples.extend(future.result())
    write_dataset(out / "dataset.fvck", samples, params["side"])
    plots.save_filmstrip(samples[0].video, params["side"], out / "preview.png",
                         title=f"sample 0 (label {samples[0].label})")
    _write_resolved(out, params)
    print(f"wrote {len(samples)} clips to {out / 'dataset.fvck'}")
    return 0


# ---------------------------------------------------------------------------
# training commands


def _train_command(params: dict, mode: str) -> int:
    out = _out_dir(params)
    samples, side = read_dataset(params["dataset"])
    n_frames = samples[0].n_frames
    if mode == "pretrain":
        config = ModelConfig(
            n_frames=n_frames, frame_dim=side * side, hidden=params["hidden"],
            time_embed_dim=params["time_embed_dim"], blocks=params["blocks"],
            frame_embeddings=params["frame_embeddings"],
        )
        ckpt = init_model(config, derive_seed(params["seed"], "init"))
        train_cfg = TrainConfig(mode="pretrain", steps=params["steps"],
                                batch_size=params["batch_size"],
                                learning_rate=params["learning_rate"],
                                seed=params["seed"])
    else:
        base = read_ckpt(params["base"])
        ckpt = attach_lora(base, rank=params["lora_rank"], alpha=params["lora_alpha"],
                           seed=derive_seed(params["seed"], "lora"))
        train_cfg = TrainConfig(mode="adapt", steps=params["steps"],
                                batch_size=params["batch_size"],
                                learning_rate=params["learning_rate"],
                                p_async=params["p_async"], seed=params["seed"])
    trained, history = train(ckpt, samples, train_cfg)
    write_ckpt(out / "model.fvck", trained)
    _write_csv(out / "loss.csv", ["step", "loss"],
               [[i, f"{v:.12g}"] for i, v in enumerate(history)])
    plots.save_loss_curve(history, out / "loss.png", title=f"{mode} loss")
    _write_resolved(out, params)
    first = np.mean(history[:100]) if len(history) >= 100 else np.mean(history)
    last = np.mean(history[-100:]) if len(history) >= 100 else np.mean(history)
    print(f"{mode}: {len(history)} steps, first-100 mean {first:.4f}, "
          f"last-100 mean {last:.4f} -> {out / 'model.fvck'}")
    return 0


def cmd_pretrain(params: dict) -> int:
    return _train_command(params, "pretrain")


def cmd_adapt(params: dict) -> int:
    return _train_command(params, "adapt")


# ---------------------------------------------------------------------------
# sample


def _build_request(roles, schedule, label, dataset_samples, sample_index, seed):
    conditioned = any(role.conditioned for role in roles)
    if conditioned:
        if dataset_samples is None:
            raise ValidationError("this mode needs --dataset for conditioning frames")
        if not 0 <= sample_index < len(dataset_samples):
            raise ValidationError(f"sample_index {sample_index} outside dataset "
                                  f"of {len(dataset_samples)} clips")
        return request_from_sample(roles, schedule, dataset_samples[sample_index],
                                   seed, label=label)
    if label is None:
        raise ValidationError("t2v-style modes need --label (no dataset clip to take it from)")
    return SampleRequest(roles=roles, schedule=schedule, label=int(label),
                         seed=int(seed), conditioning={})


def _load_for_sampling(params: dict):
    ckpt = read_ckpt(params["ckpt"])
    if params["lora_alpha_scale"] != 1.0:
        ckpt = scale_lora_alpha(ckpt, params["lora_alpha_scale"])
    dataset_samples = None
    if params["dataset"] is not None:
        dataset_samples, side = read_dataset(params["dataset"])
        if side * side != ckpt.config.frame_dim:
            raise ValidationError("dataset frame size does not match the checkpoint")
    return ckpt, dataset_samples


def _sample_range(params: dict, lo: int, hi: int):
    ckpt, dataset_samples = _load_for_sampling(params)
    schedule = make_schedule(params["steps"], params["shift"])
    roles = parse_mode(params["mode"], ckpt.config.n_frames, kappa=params["kappa"])
    videos = []
    for i in range(lo, hi):
        request = _build_request(roles, schedule, params["label"], dataset_samples,
                                 params["sample_index"] + i,
                                 derive_seed(params["seed"], "sample", i))
        video, _ = euler_sample(ckpt, request)
        videos.append(video)
    return videos


def cmd_sample(params: dict) -> int:
    out = _out_dir(params)
    ckpt, dataset_samples = _load_for_sampling(params)
    side = int(round(math.sqrt(ckpt.config.frame_dim)))
    schedule = make_schedule(params["steps"], params["shift"])
    roles = parse_mode(params["mode"], ckpt.config.n_frames, kappa=params["kappa"])
    compile_plan(roles, schedule).write_csv(out / "plan.csv")

    count, workers = params["count"], max(1, params["workers"])
    if count < 1:
        raise ValidationError("count must be at least 1")
    if workers == 1 or count == 1:
        videos = _sample_range(params, 0, count)
    else:
        chunk = max(1, math.ceil(count / (workers * 4)))
        ranges = [(lo, min(lo + chunk, count)) for lo in range(0, count, chunk)]
        videos = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sample_range, params, lo, hi) for lo, hi in ranges]
            for future in futures:
                videos.extend(future.result())

    if count == 1:
        video = videos[0]
        write_fvt(out / "video.fvt", video)
        frame_dir = out / "frames"
        frame_dir.mkdir(exist_ok=True)
        if side * side == ckpt.config.frame_dim:
            for i, frame in enumerate(video):
                write_pgm(frame_dir / f"frame_{i:02d}.pgm", frame, side)
            plots.save_filmstrip(video, side, out / "filmstrip.png",
                                 title=f"mode {params['mode']}")
    else:
        for i, video in enumerate(videos):
            write_fvt(out / f"video_{i:03d}.fvt", video)
    _write_resolved(out, params)
    print(f"sampled {count} video(s) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(params: dict) -> int:
    out = _out_dir(params)
    run_dir = Path(params["run"])
    run_cfg_path = run_dir / "config.resolved"
    if not run_cfg_path.exists():
        raise ValidationError(f"{run_dir} has no config.resolved (not a sample run?)")
    raw = read_config_file(run_cfg_path)
    registry = _REGISTRY["sample"]
    unknown = set(raw) - set(registry)
    if unknown or "ckpt" not in raw:
        raise ValidationError(f"{run_cfg_path} is not a sample-run config")
    run_params = {key: default for key, (_, default) in registry.items()}
    for key, value in raw.items():
        run_params[key] = registry[key][0](value)

    count = run_params["count"]
    paths = [run_dir / "video.fvt"] if count == 1 else \
        [run_dir / f"video_{i:03d}.fvt" for i in range(count)]
    dataset_path = params["dataset"] or run_params["dataset"]
    dataset_samples = None
    if dataset_path is not None:
        dataset_samples, _ = read_dataset(dataset_path)

    schedule = make_schedule(run_params["steps"], run_params["shift"])
    rows, tracks, agrees = [], [], []
    for i, path in enumerate(paths):
        video = read_fvt(path)
        n_frames, frame_dim = video.shape
        side = int(round(math.sqrt(frame_dim)))
        if side * side != frame_dim:
            raise ValidationError(f"{path}: frames are not square ({frame_dim} pixels)")
        roles = parse_mode(run_params["mode"], n_frames, kappa=run_params["kappa"])
        request = _build_request(roles, schedule, run_params["label"], dataset_samples,
                                 run_params["sample_index"] + i,
                                 derive_seed(run_params["seed"], "sample", i))
        clamp_err, partial_err = conditioning_fidelity(video, request)
        agree = label_agreement(video, side, request.label)
        agrees.append(agree)
        rows.append([
            i, request.label,
            "" if clamp_err is None else f"{clamp_err:.12g}",
            "" if partial_err is None else f"{partial_err:.12g}",
            f"{smoothness(video):.12g}",
            f"{dynamic_degree(video, side):.12g}",
            int(agree),
        ])
        if len(tracks) < 8:
            tracks.append(centroid_track(video, side))
    _write_csv(out / "metrics.csv",
               ["index", "label", "clamp_max_err", "partial_max_err",
                "smoothness", "dynamic_degree", "label_agreement"], rows)
    summary = [["count", len(rows)],
               ["label_agreement_rate", f"{np.mean(agrees):.12g}"]]
    _write_csv(out / "summary.csv", ["metric", "value"], summary)
    plots.save_centroid_tracks(tracks, side, out / "centroids.png",
                               labels=[f"clip {i}" for i in range(len(tracks))])
    _write_resolved(out, params)
    print(f"evaluated {len(rows)} video(s): agreement "
          f"{float(np.mean(agrees)):.2%} -> {out / 'metrics.csv'}")
    return 0


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze_attention(params: dict) -> int:
    out = _out_dir(params)
    ckpt = read_ckpt(params["ckpt"])
    dataset_samples, side = read_dataset(params["dataset"])
    if side * side != ckpt.config.frame_dim:
        raise ValidationError("dataset frame size does not match the checkpoint")
    schedule = make_schedule(params["steps"], params["shift"])
    roles = parse_mode(params["mode"], ckpt.config.n_frames, kappa=params["kappa"])
    request = _build_request(roles, schedule, params["label"], dataset_samples,
                             params["sample_index"],
                             derive_seed(params["seed"], "sample", 0))
    try:
        steps = [int(s) for s in params["record_steps"].split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ValidationError(f"bad record_steps {params['record_steps']!r}") from exc
    probe = attention_probe(ckpt, request, steps)
    for step in sorted(probe.maps):
        probe.write_map_csv(out / f"attention_step_{step}.csv", step)
    probe.write_stats_csv(out / "attention_stats.csv")
    plots.save_attention_grid(probe.maps, out / "attention.png")
    _write_resolved(out, params)
    print(f"recorded attention at steps {sorted(probe.maps)} -> {out}")
    return 0


def cmd_analyze_drift(params: dict) -> int:
    out = _out_dir(params)
    base = read_ckpt(params["base"])
    adapted = read_ckpt(params["adapted"])
    report = drift_report(base, adapted)
    report.write_csv(out / "drift.csv")
    _write_csv(out / "drift_kinds.csv", ["kind", "mean_relative_change"],
               [[k, f"{v:.12g}"] for k, v in report.by_kind.items()])
    _write_csv(out / "drift_blocks.csv", ["block", "mean_relative_change"],
               [[k, f"{v:.12g}"] for k, v in report.by_block.items()])
    _write_csv(out / "drift_top.csv", ["name", "relative_change"],
               [[name, f"{v:.12g}"] for name, v in report.top(params["top"])])
    plots.save_drift_bars(report, out / "drift.png", top_n=params["top"])
    _write_resolved(out, params)
    print(f"drift report over {len(report.per_name)} parameters -> {out / 'drift.csv'}")
    return 0


# ---------------------------------------------------------------------------
# wiring


def _add_keys(parser: argparse.ArgumentParser, command: str) -> None:
    parser.add_argument("--config", type=str, default=None, metavar="PATH",
                        help="key = value file; keys must belong to this command")
    for key, (caster, default) in _REGISTRY[command].items():
        flag = "--" + key.replace("_", "-")
        parser.add_argument(flag, dest=key, type=caster, default=None,
                            help=f"default: {default}" if default is not None else None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="frameflow",
                     description="Frame-wise flow matching on tiny bouncing-blob videos.")
    sub = parser.add_subparsers(dest="command", required=True)

    handlers = {
        "gen-data": cmd_gen_data,
        "pretrain": cmd_pretrain,
        "adapt": cmd_adapt,
        "sample": cmd_sample,
        "eval": cmd_eval,
    }
    for name, handler in handlers.items():
        p = sub.add_parser(name, parents=[], description=f"{name} command")
        _add_keys(p, name)
        p.set_defaults(handler=handler, registry_name=name)

    analyze = sub.add_parser("analyze", description="attention / drift reports")
    analyze_sub = analyze.add_subparsers(dest="analysis", required=True)
    for name, handler in (("attention", cmd_analyze_attention),
                          ("drift", cmd_analyze_drift)):
        p = analyze_sub.add_parser(name)
        _add_keys(p, f"analyze-{name}")
        p.set_defaults(handler=handler, registry_name=f"analyze-{name}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        params = _resolve(args.registry_name, args)
        return args.handler(params)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

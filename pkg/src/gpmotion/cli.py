"""Command-line batch interface.

Every command takes an optional JSON run config with sections ``data``,
``model``, ``kernel``, ``train``, ``eval`` and a top-level ``seed``.  The
fully resolved config is written next to the command's outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import model as mdl
from .deformation import GridSpec, SmoothingSpec, jacobian_determinant, write_fields
from .gp import KernelSpec, MotionMatrix
from .metrics import CSV_COLUMNS, EvalReport, evaluate_sequence, volume_curve
from .synthdata import (DatasetFormatError, SequenceRecord, SyntheticSpec, generate_dataset,
                        read_dataset, write_dataset)

log = logging.getLogger("gpmotion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(ValueError):
    pass


class DataError(ValueError):
    pass


# ------------------------------------------------------------------ config

_GENERATOR_DEFAULTS = {"count": 200, "contraction_range": [0.15, 0.45], "es_jitter": 0.03,
                       "radius_jitter": 0.5}
_EVAL_DEFAULTS = {"rotations": [0]}
_GRID_KEYS = ("height", "width", "spacing")


def _field_defaults(cls, skip=()):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if f.default is not dataclasses.MISSING:
            value = f.default
        else:
            value = f.default_factory()
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def default_config():
    grid = _field_defaults(GridSpec)
    data = {**grid, **_field_defaults(SyntheticSpec, skip=("grid",)), **_GENERATOR_DEFAULTS}
    model = _field_defaults(mdl.ModelConfig, skip=("kernel", "smoothing") + _GRID_KEYS)
    model["smoothing"] = _field_defaults(SmoothingSpec)
    return {"data": data, "model": model, "kernel": _field_defaults(KernelSpec),
            "train": _field_defaults(mdl.TrainConfig), "eval": dict(_EVAL_DEFAULTS), "seed": 0}


def _merge(base, override, where):
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where}{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(user=None):
    """Defaults overlaid with ``user``; unknown keys raise :class:`UsageError`."""
    cfg = _merge(default_config(), user or {}, "")
    # building the typed objects validates value ranges early
    try:
        synthetic_spec(cfg)
        model_config(cfg)
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return cfg


def load_config(path):
    if path is None:
        return resolve_config()
    try:
        with open(path, encoding="utf-8") as f:
            user = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise UsageError("config must be a JSON object")
    return resolve_config(user)


def synthetic_spec(cfg):
    d = cfg["data"]
    grid = GridSpec(*(d[k] for k in _GRID_KEYS))
    keys = {f.name for f in dataclasses.fields(SyntheticSpec)} - {"grid"}
    return SyntheticSpec(grid=grid, **{k: d[k] for k in keys})


def model_config(cfg):
    m = dict(cfg["model"])
    m["smoothing"] = SmoothingSpec(**m["smoothing"])
    m["kernel"] = KernelSpec(**cfg["kernel"])
    for k in _GRID_KEYS:
        m[k] = cfg["data"][k]
    for k in ("encoder_channels", "encoder_strides", "decoder_channels", "tcn_dilations"):
        m[k] = tuple(m[k])
    return mdl.ModelConfig(**m)


def train_config(cfg):
    t = dict(cfg["train"])
    t["scale_range"] = tuple(t["scale_range"])
    return mdl.TrainConfig(**t)


def echo_config(cfg, out_dir):
    with open(Path(out_dir) / "resolved_config.json", "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)


# ------------------------------------------------------------ file outputs

def write_pgm(path, image):
    """Affinely rescale ``image`` to 0..255 and write binary PGM; returns (lo, hi)."""
    img = np.asarray(image, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        px = np.rint((img - lo) / (hi - lo) * 255.0)
    else:
        px = np.zeros_like(img)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(px.astype(np.uint8).tobytes())
    return lo, hi


def read_pgm(path):
    with open(path, "rb") as f:
        buf = f.read()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def dump_images(out_dir, prefix, images):
    """One PGM per image plus a ``<prefix>_scale.json`` sidecar: value = lo + p / 255 (hi - lo)."""
    scales = {}
    for t, img in enumerate(images):
        name = f"{prefix}_{t:02d}.pgm"
        lo, hi = write_pgm(Path(out_dir) / name, img)
        scales[name] = {"lo": lo, "hi": hi}
    with open(Path(out_dir) / f"{prefix}_scale.json", "w", encoding="utf-8") as f:
        json.dump(scales, f, indent=2, sort_keys=True)


def write_motion(path, motion: MotionMatrix):
    import struct

    with open(path, "wb") as f:
        f.write(struct.pack("<HH", *motion.shape))
        f.write(np.ascontiguousarray(motion.z, dtype="<f8").tobytes())


def read_motion(path):
    import struct

    with open(path, "rb") as f:
        d, t = struct.unpack("<HH", f.read(4))
        z = np.frombuffer(f.read(), dtype="<f8")
    if z.size != d * t:
        raise DataError(f"{path}: truncated motion file")
    return MotionMatrix(z.reshape(d, t).astype(np.float64), "mean")


def _write_sequence_outputs(seq_dir, fields, warped, motion=None):
    seq_dir.mkdir(parents=True, exist_ok=True)
    write_fields(seq_dir / "fields.f32", fields)
    if warped is not None:
        dump_images(seq_dir, "warped", warped)
    dump_images(seq_dir, "jacdet", [jacobian_determinant(u) for u in fields])
    if motion is not None:
        write_motion(seq_dir / "motion.f32", motion)


# ---------------------------------------------------------------- helpers

def _threads(args):
    if args.threads is not None:
        n = args.threads
    else:
        try:
            n = int(os.environ.get("GPMOTION_THREADS", "1"))
        except ValueError as exc:
            raise UsageError("GPMOTION_THREADS must be an integer") from exc
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _ordered_map(n_threads):
    """Order-preserving map over a thread pool (plain ``map`` for one thread)."""
    if n_threads == 1:
        return map, None
    pool = concurrent.futures.ThreadPoolExecutor(max_workers=n_threads)
    return pool.map, pool


def _load_data(path, need_masks=False):
    try:
        records = read_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"dataset {path} not found") from exc
    except DatasetFormatError as exc:
        raise DataError(str(exc)) from exc
    if need_masks and any(r.masks is None for r in records):
        raise DataError(f"{path}: evaluation needs masks")
    return records


def _load_model(path, cfg):
    try:
        model = mdl.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint {path} not found") from exc
    except mdl.IncompatibleCheckpointError as exc:
        raise DataError(str(exc)) from exc
    want = model_config(cfg)
    got = model.config
    for key in ("latent_dims", "t_lat", "height", "width"):
        if getattr(want, key) != getattr(got, key):
            raise DataError(f"checkpoint {key}={getattr(got, key)} does not match config "
                            f"{key}={getattr(want, key)}")
    return model


def _select(records, index):
    if index is None:
        return list(enumerate(records))
    if not 0 <= index < len(records):
        raise UsageError(f"sequence index {index} outside [0, {len(records)})")
    return [(index, records[index])]


def _out_dir(path):
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {path}: {exc}") from exc
    return p


def parse_provide(spec, n_frames):
    """Frame indices named by ``spec`` (frame 0 is the reference and always known).

    Returns the sorted pair indices (frame k -> pair k-1).
    """
    spec = spec.strip()
    if spec == "all":
        frames = range(1, n_frames)
    elif spec == "every2":
        frames = range(2, n_frames, 2)
    elif spec == "every5":
        frames = range(5, n_frames, 5)
    elif spec == "first5":
        frames = range(1, min(5, n_frames))
    else:
        text = spec[len("frames"):].strip() if spec.startswith("frames") else spec
        try:
            frames = sorted({int(tok) for tok in text.split(",") if tok.strip()})
        except ValueError as exc:
            raise UsageError(f"malformed frame list {spec!r}") from exc
        if not frames or any(not 0 <= k < n_frames for k in frames):
            raise UsageError(f"frame list {spec!r} must name frames in [0, {n_frames})")
    return np.array([k - 1 for k in frames if k > 0], dtype=int)


def interpolate_baseline(known_frames, known_fields, n_frames, kind):
    """Per-pixel interpolation of displacements over frame index.

    Frame 0 (identity) is always a knot; values beyond the last knot are
    held constant.  ``kind`` is ``linear`` or ``cubic`` (natural spline).
    Returns fields for frames 1..n_frames-1.
    """
    knots = np.concatenate([[0], np.asarray(known_frames, dtype=float)])
    vals = np.concatenate([np.zeros((1,) + known_fields.shape[1:]), known_fields])
    query = np.arange(1, n_frames, dtype=float)
    clipped = np.minimum(query, knots[-1])
    if kind == "linear" or len(knots) < 3:
        flat = vals.reshape(len(knots), -1)
        out = np.empty((len(query), flat.shape[1]))
        idx = np.clip(np.searchsorted(knots, clipped, side="right") - 1, 0, len(knots) - 2)
        w = (clipped - knots[idx]) / (knots[idx + 1] - knots[idx])
        out[:] = flat[idx] * (1 - w)[:, None] + flat[idx + 1] * w[:, None]
        return out.reshape((len(query),) + vals.shape[1:])
    if kind != "cubic":
        raise ValueError(f"unknown baseline {kind!r}")
    return CubicSpline(knots, vals, axis=0, bc_type="natural")(clipped)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg):
    d = cfg["data"]
    count = d["count"] if args.count is None else args.count
    if count < 0:
        raise UsageError("count must be >= 0")
    spec = synthetic_spec(cfg)
    mapper, pool = _ordered_map(_threads(args))
    try:
        records = generate_dataset(count, spec, cfg["seed"], tuple(d["contraction_range"]),
                                   d["es_jitter"], d["radius_jitter"], map_fn=mapper)
    finally:
        if pool is not None:
            pool.shutdown()
    out = Path(args.out)
    if out.parent != Path(""):
        _out_dir(out.parent)
    try:
        write_dataset(records, out)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    manifest = {"count": count, "seed": cfg["seed"], "spec": cfg["data"], "path": out.name}
    with open(out.with_name(out.name + ".manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    log.info("wrote %d sequences to %s", count, out)


def cmd_train(args, cfg):
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    if args.no_gp:
        cfg["kernel"]["kind"] = "identity"
    if args.td_rate is not None:
        cfg["model"]["td_rate"] = args.td_rate
    cfg = resolve_config(cfg)
    records = _load_data(args.data)
    out = _out_dir(args.out_dir)
    echo_config(cfg, out)
    mc = model_config(cfg)
    for r in records:
        if r.shape != (mc.height, mc.width):
            raise DataError(f"sequence extent {r.shape} differs from the model grid")
    res = mdl.train(records, mc, train_config(cfg), seed=cfg["seed"])
    mdl.save_checkpoint(out / "model.ckpt", res.model)
    mdl.write_training_log(res.log, out / "training_log.csv")
    log.info("trained %d steps in %.1f s", len(res.log), res.seconds)
    return cfg


def cmd_register(args, cfg):
    model = _load_model(args.checkpoint, cfg)
    records = _load_data(args.data)
    out = _out_dir(args.out_dir)
    echo_config(cfg, out)
    report = EvalReport()
    for i, rec in _select(records, args.index):
        reg = model.register(rec.frames)
        _write_sequence_outputs(out / f"seq{i:03d}", reg.fields, reg.warped, reg.motion)
        if rec.masks is not None:
            report.add(**evaluate_sequence(rec, reg.fields, reg.warped, name=f"seq{i:03d}"))
    if report.rows:
        report.write_csv(out / "metrics.csv")


def cmd_interpolate(args, cfg):
    model = _load_model(args.checkpoint, cfg)
    records = _load_data(args.data)
    out = _out_dir(args.out_dir)
    echo_config(cfg, out)
    report = EvalReport()
    curves = []
    for i, rec in _select(records, args.index):
        n = rec.n_frames
        pairs = parse_provide(args.provide, n)
        slots = mdl.pair_slots(n - 1, model.config.t_lat)
        if pairs.size:
            all_slots = model.interpolate(rec.frames, pairs)
        else:
            all_slots = model.simulate(rec.frames[0])
        methods = {"model": all_slots[slots]}
        known = all_slots[slots[pairs]]
        if pairs.size:
            methods["linear"] = interpolate_baseline(pairs + 1, known, n, "linear")
            methods["cubic"] = interpolate_baseline(pairs + 1, known, n, "cubic")
        seq_dir = out / f"seq{i:03d}"
        for name, fields in methods.items():
            _write_sequence_outputs(seq_dir / name, fields, None)
            if rec.masks is not None:
                report.add(**evaluate_sequence(rec, fields, name=f"seq{i:03d}", method=name))
                curve = volume_curve(rec.masks[0], fields, rec.spacing)
                curves.append([f"seq{i:03d}", name] + [repr(float(v)) for v in curve])
    if report.rows:
        report.write_csv(out / "metrics.csv")
        _write_rows(out / "volume_curves.csv", ["sequence", "method"], curves)


def _write_rows(path, head, rows):
    import csv

    width = max((len(r) for r in rows), default=len(head))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(head + [f"frame{k}" for k in range(width - len(head))])
        writer.writerows(rows)


def cmd_simulate(args, cfg):
    model = _load_model(args.checkpoint, cfg)
    records = _load_data(args.data)
    out = _out_dir(args.out_dir)
    echo_config(cfg, out)
    curves = []
    for i, rec in _select(records, args.index):
        fields = model.simulate(rec.frames[0])
        _write_sequence_outputs(out / f"seq{i:03d}", fields, None)
        if rec.masks is not None:
            curve = volume_curve(rec.masks[0], fields, rec.spacing)
            curves.append([f"seq{i:03d}", "simulate"] + [repr(float(v)) for v in curve])
    if curves:
        _write_rows(out / "volume_curves.csv", ["sequence", "method"], curves)


def cmd_transport(args, cfg):
    model = _load_model(args.checkpoint, cfg)
    targets = _load_data(args.data)
    out = _out_dir(args.out_dir)
    echo_config(cfg, out)
    if args.motion is not None:
        try:
            motions = [read_motion(args.motion)] * len(targets)
        except FileNotFoundError as exc:
            raise DataError(f"motion file {args.motion} not found") from exc
    else:
        sources = _load_data(args.source_data or args.data)
        if len(sources) != len(targets):
            raise DataError("source and target datasets differ in length")
        motions = [model.register(s.frames).motion for s in sources]
    curves = []
    for i, rec in _select(targets, args.index):
        try:
            all_slots = model.transport(motions[i], rec.frames[0])
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        fields = all_slots[mdl.pair_slots(rec.n_frames - 1, model.config.t_lat)]
        _write_sequence_outputs(out / f"seq{i:03d}", fields, None)
        if rec.masks is not None:
            curve = volume_curve(rec.masks[0], fields, rec.spacing)
            curves.append([f"seq{i:03d}", "transport"] + [repr(float(v)) for v in curve])
    if curves:
        _write_rows(out / "volume_curves.csv", ["sequence", "method"], curves)


def rotate_record(rec: SequenceRecord, quarter_turns):
    """Rotate a sequence counter-clockwise by ``quarter_turns`` x 90 degrees."""
    k = quarter_turns % 4
    if k == 0:
        return rec
    rot = lambda a: np.ascontiguousarray(np.rot90(a, k, axes=(1, 2)))  # noqa: E731
    fields = None
    if rec.fields is not None:
        u = np.asarray(rec.fields)
        for _ in range(k):
            # rot90 sends (r, c) -> (W-1-c, r), so vectors turn (dr, dc) -> (-dc, dr)
            u = np.rot90(u, 1, axes=(1, 2))
            u = np.stack([-u[..., 1], u[..., 0]], axis=-1)
        fields = np.ascontiguousarray(u)
    return SequenceRecord(rot(rec.frames), rec.spacing,
                          None if rec.masks is None else rot(rec.masks), rec.scale, fields)


def _evaluate_all(model, records, mapper, tag=""):
    def one(item):
        i, rec = item
        reg = model.register(rec.frames)
        name = f"seq{i:03d}"
        return (evaluate_sequence(rec, reg.fields, reg.warped, name=name, method="model" + tag),
                evaluate_sequence(rec, np.zeros_like(reg.fields), name=name, method="Und" + tag))

    return list(mapper(one, list(enumerate(records))))


def cmd_eval(args, cfg):
    rotations = cfg["eval"]["rotations"]
    if args.rotations is not None:
        try:
            rotations = [int(tok) for tok in args.rotations.split(",")]
        except ValueError as exc:
            raise UsageError(f"malformed rotation list {args.rotations!r}") from exc
        cfg["eval"]["rotations"] = rotations
    if any(r % 90 for r in rotations):
        raise UsageError("rotations must be multiples of 90 degrees")
    model = _load_model(args.checkpoint, cfg)
    records = _load_data(args.data, need_masks=True)
    out = _out_dir(args.out_dir)
    echo_config(cfg, out)
    mapper, pool = _ordered_map(_threads(args))
    report = EvalReport()
    per_rotation = {}
    try:
        for angle in rotations:
            tag = "" if rotations == [0] else f"@{angle}"
            rotated = [rotate_record(r, angle // 90) for r in records]
            rows = _evaluate_all(model, rotated, mapper, tag)
            sub = EvalReport()
            for pair in rows:
                for row in pair:
                    report.add(**row)
                    sub.add(**row)
            per_rotation[str(angle)] = sub.aggregate()
    finally:
        if pool is not None:
            pool.shutdown()
    report.write_csv(out / "metrics.csv")
    extra = {}
    if rotations != [0]:
        extra["rotations"] = per_rotation
        extra["rotation_summary"] = rotation_summary(per_rotation)
        _write_rotation_table(out / "rotations.csv", per_rotation, extra["rotation_summary"])
    report.write_json(out / "summary.json", extra)


def rotation_summary(per_rotation, method="model"):
    """Across-rotation mean and std of each metric's per-rotation mean."""
    out = {}
    for col in CSV_COLUMNS[2:]:
        vals = np.array([agg[f"{method}@{a}"][col]["mean"] for a, agg in per_rotation.items()])
        out[col] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def _write_rotation_table(path, per_rotation, summary):
    rows = []
    for angle, agg in per_rotation.items():
        stats = agg[f"model@{angle}"]
        rows.append([angle] + [repr(stats[c]["mean"]) for c in CSV_COLUMNS[2:]])
    rows.append(["summary"] + [f"{summary[c]['mean']!r}+-{summary[c]['std']!r}"
                               for c in CSV_COLUMNS[2:]])
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["rotation"] + CSV_COLUMNS[2:])
        writer.writerows(rows)


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="gpmotion", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--threads", type=int, help="worker threads (default: $GPMOTION_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-gp", action="store_true", help="identity kernel instead of the GP prior")
    p.add_argument("--td-rate", type=float)

    def with_model(name, help_text):
        q = sub.add_parser(name, help=help_text)
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--out-dir", required=True)
        q.add_argument("--index", type=int, help="process a single sequence")
        return q

    with_model("register", "register every frame to frame 0")
    p = with_model("interpolate", "fields from a subset of frames, plus linear/cubic baselines")
    p.add_argument("--provide", required=True,
                   help="every2 | every5 | first5 | all | frames 0,10")
    with_model("simulate", "fields from frame 0 alone")
    p = with_model("transport", "decode source motion on target reference frames")
    p.add_argument("--source-data", help="sequences providing the motion (default: --data)")
    p.add_argument("--motion", help="motion file written by register")
    p = with_model("eval", "metrics for the model and the undeformed baseline")
    p.add_argument("--rotations", help="comma-separated angles, e.g. 0,90,180,270")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "register": cmd_register,
            "interpolate": cmd_interpolate, "simulate": cmd_simulate,
            "transport": cmd_transport, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"gpmotion: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"gpmotion: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (mdl.TrainingDivergedError, FloatingPointError) as exc:
        print(f"gpmotion: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

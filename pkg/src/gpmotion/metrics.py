"""Registration metrics: intensity RMSE, Dice, HD95, volume curves, endpoint error."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .deformation import field_gradients, warp
from .synthdata import POOL, RING

LABELS = {POOL: "pool", RING: "ring"}


def _same_grid(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"grid mismatch: {np.shape(a)} vs {np.shape(b)}")


def rmse(a, b):
    _same_grid(a, b)
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.sqrt(np.mean(d * d)))


def dice(mask_a, mask_b, label):
    """2|A n B| / (|A| + |B|); two empty sets score 1."""
    a = np.asarray(mask_a) == label
    b = np.asarray(mask_b) == label
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def boundary(mask):
    """Pixels of ``mask`` with at least one 4-neighbour outside it (image edge counts as outside)."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    inner = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner & ~interior


def hausdorff95(mask_a, mask_b, label, spacing=1.0):
    """95th percentile of the pooled boundary-to-boundary distances, in mm."""
    ba = np.argwhere(boundary(np.asarray(mask_a) == label))
    bb = np.argwhere(boundary(np.asarray(mask_b) == label))
    if len(ba) == 0 or len(bb) == 0:
        raise ValueError(f"label {label} is empty in one of the masks")
    d_ab = cKDTree(bb).query(ba)[0]
    d_ba = cKDTree(ba).query(bb)[0]
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95) * spacing)


def volume_curve(ed_mask, fields, spacing, label=POOL):
    """Area (mm^2) of the reference label warped by each field; frame 0 unwarped."""
    ed = np.asarray(ed_mask) == label
    areas = [ed.sum()]
    for u in np.asarray(fields):
        areas.append(np.sum(warp(ed.astype(np.uint8), u, mode="nearest")))
    return np.asarray(areas, dtype=float) * spacing ** 2


def ejection_fraction(curve):
    """Relative area change (max - min) / max of a volume curve."""
    curve = np.asarray(curve, dtype=float)
    return float((curve.max() - curve.min()) / curve.max())


def endpoint_error(u_pred, u_gt, mask=None):
    """Mean |u_pred - u_gt| (px) over ``mask`` (default: all but a 1 px border)."""
    _same_grid(u_pred, u_gt)
    err = np.linalg.norm(np.asarray(u_pred, dtype=float) - np.asarray(u_gt, dtype=float), axis=-1)
    if mask is None:
        return float(err[..., 1:-1, 1:-1].mean())
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), err.shape)
    return float(err[mask].mean())


# ----------------------------------------------------------------- reports

CSV_COLUMNS = ["sequence", "method", "rmse", "dice_pool", "dice_ring", "hd95_pool", "hd95_ring",
               "spatial_grad", "temporal_grad", "volume_curve_rmse", "endpoint_error"]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add(self, **row):
        missing = set(CSV_COLUMNS) - set(row)
        if missing:
            raise ValueError(f"missing report columns {sorted(missing)}")
        self.rows.append(row)

    def methods(self):
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def aggregate(self):
        """Mean and std of every numeric column, per method."""
        out = {}
        for method in self.methods():
            rows = [r for r in self.rows if r["method"] == method]
            stats = {}
            for col in CSV_COLUMNS[2:]:
                vals = np.array([r[col] for r in rows], dtype=float)
                vals = vals[np.isfinite(vals)]
                stats[col] = {"mean": float(vals.mean()) if vals.size else float("nan"),
                              "std": float(vals.std()) if vals.size else float("nan")}
            out[method] = {"count": len(rows), **stats}
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                                 for k, v in r.items() if k in CSV_COLUMNS})

    def write_json(self, path, extra=None):
        payload = {"aggregate": self.aggregate()}
        if extra:
            payload.update(extra)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)


def evaluate_sequence(record, fields, warped=None, es_frame=None, name="", method="model"):
    """One report row for a registered sequence.

    ``fields`` are the F-1 displacements mapping frame 0 onto frames 1..F-1.
    Dice and HD95 are taken at the end-systolic frame (smallest pool area
    in the reference masks unless ``es_frame`` is given).
    """
    frames = np.asarray(record.frames, dtype=float)
    fields = np.asarray(fields, dtype=float)
    if warped is None:
        warped = np.stack([warp(frames[0], u) for u in fields])
    masks = record.masks
    if es_frame is None:
        es_frame = int(np.argmin(np.sum(masks == POOL, axis=(1, 2))))
    es_mask = masks[es_frame]
    moved = warp(masks[0], fields[es_frame - 1], mode="nearest")
    row = {"sequence": name, "method": method,
           "rmse": float(np.mean([rmse(w, f) for w, f in zip(warped, frames[1:])]))}
    for lab, lname in LABELS.items():
        row[f"dice_{lname}"] = dice(moved, es_mask, lab)
        try:
            row[f"hd95_{lname}"] = hausdorff95(moved, es_mask, lab, record.spacing)
        except ValueError:
            row[f"hd95_{lname}"] = float("nan")
    row["spatial_grad"], row["temporal_grad"] = field_gradients(fields)
    pred_curve = volume_curve(masks[0], fields, record.spacing)
    true_curve = np.sum(masks == POOL, axis=(1, 2)) * record.spacing ** 2
    row["volume_curve_rmse"] = float(np.sqrt(np.mean((pred_curve - true_curve) ** 2)))
    if record.fields is not None:
        gt = np.asarray(record.fields[1:], dtype=float)
        row["endpoint_error"] = endpoint_error(fields, gt, masks[1:] > 0)
    else:
        row["endpoint_error"] = float("nan")
    return row

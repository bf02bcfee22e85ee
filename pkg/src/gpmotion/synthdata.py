"""Synthetic cardiac-like image sequences with analytic motion.

Each subject is a textured disc (blood pool) inside a ring (myocardium) on
a textured background.  Frame ``t`` is the reference image scaled about the
subject centre by a radial factor ``s(t)``.  The scale curve is built from
cosine half-waves on the normalised phase ``x = t / (F - 1)``:

* contraction ``[0, p_es]``: 1 -> 1 - c
* rapid filling: 1 - c -> 1 - c * residual
* diastasis plateau of length ``plateau`` at 1 - c * residual
* atrial kick: back to 1 at x = 1

Every piece has zero slope at its ends, so ``s`` is C1.  The ground truth
displacement (pull convention, ``I_t(x) = I_0(x + u_t(x))``) is
``u_t(x) = (1 / s(t) - 1) (x - centre)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .deformation import GridSpec, identity_grid

MAGIC = b"MOTN"
VERSION = 1

POOL, RING = 1, 2


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    grid: GridSpec = field(default_factory=GridSpec)
    frames: int = 16
    pool_radius: float = 5.0
    ring_thickness: float = 3.0
    contraction: float = 0.3
    es_phase: float = 0.4
    plateau: float = 0.25
    residual: float = 0.15  # fraction of the contraction left during diastasis
    center_jitter: float = 1.0
    noise_std: float = 0.01
    texture_amplitude: float = 0.06
    edge_width: float = 0.4

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("need at least two frames")
        if not 0.0 <= self.contraction < 0.6:
            raise ValueError("contraction must lie in [0, 0.6)")
        if not 0.0 < self.es_phase < 1.0:
            raise ValueError("es_phase must lie in (0, 1)")
        if self.plateau < 0 or self.es_phase + self.plateau >= 1.0:
            raise ValueError("plateau does not fit after end-systole")
        outer = self.pool_radius + self.ring_thickness
        half = min(self.grid.height, self.grid.width) / 2.0
        if outer + 2.0 > half - 0.5:
            raise ValueError("ring does not fit inside the grid with a 2 px margin")

    @property
    def outer_radius(self):
        return self.pool_radius + self.ring_thickness

    @property
    def es_frame(self):
        """End-systolic frame: ``es_phase`` snapped to the nearest frame."""
        return int(np.clip(round(self.es_phase * (self.frames - 1)), 1, self.frames - 2))


@dataclass
class SequenceRecord:
    """One image sequence; ``frames`` and ``masks`` are (F, H, W)."""

    frames: np.ndarray
    spacing: float
    masks: np.ndarray | None = None
    scale: np.ndarray | None = None
    fields: np.ndarray | None = None

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape[1:]

    @property
    def has_ground_truth(self):
        return self.scale is not None and self.fields is not None


def _ease(a, b, x):
    """Cosine blend from a (x=0) to b (x=1)."""
    return a + (b - a) * (1.0 - np.cos(np.pi * np.clip(x, 0.0, 1.0))) / 2.0


def scale_curve(spec: SyntheticSpec, phase=None):
    """Radial scale ``s`` at normalised phases (default: the F frame phases).

    The minimum sits at the end-systolic frame, so sampled curves reach
    ``1 - c`` exactly.
    """
    if phase is None:
        phase = np.linspace(0.0, 1.0, spec.frames)
    x = np.asarray(phase, dtype=float)
    c, p = spec.contraction, spec.es_frame / (spec.frames - 1)
    low = 1.0 - c
    dia = 1.0 - c * spec.residual
    rest = 1.0 - p - spec.plateau
    fill_end = p + 0.6 * rest
    kick_start = fill_end + spec.plateau
    out = np.empty_like(x)
    m = x <= p
    out[m] = _ease(1.0, low, x[m] / p)
    m = (x > p) & (x <= fill_end)
    out[m] = _ease(low, dia, (x[m] - p) / (fill_end - p))
    m = (x > fill_end) & (x <= kick_start)
    out[m] = dia
    m = x > kick_start
    out[m] = _ease(dia, 1.0, (x[m] - kick_start) / (1.0 - kick_start))
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class _Texture:
    def __init__(self, rng, amplitude, n_waves=6, max_freq=0.25):
        self.amp = amplitude
        self.k = rng.uniform(-max_freq, max_freq, size=(n_waves, 2)) * 2 * np.pi
        self.phase = rng.uniform(0, 2 * np.pi, size=n_waves)
        self.weight = rng.normal(size=n_waves) / np.sqrt(n_waves)

    def __call__(self, pos):
        arg = pos @ self.k.T + self.phase
        return self.amp * np.sum(self.weight * np.sin(arg), axis=-1)


def _reference_intensity(rel, spec, texture, intensities):
    """Intensity of the reference subject at positions ``rel`` relative to its centre."""
    r = np.linalg.norm(rel, axis=-1)
    bg, ring, pool = intensities
    w = spec.edge_width
    img = bg + (ring - bg) * _sigmoid((spec.outer_radius - r) / w)
    img = img + (pool - ring) * _sigmoid((spec.pool_radius - r) / w)
    return img + texture(rel)


def _labels(rel, spec):
    r = np.linalg.norm(rel, axis=-1)
    lab = np.zeros(r.shape, dtype=np.uint8)
    lab[r < spec.outer_radius] = RING
    lab[r < spec.pool_radius] = POOL
    return lab


def generate_sequence(spec: SyntheticSpec, rng, noise=True) -> SequenceRecord:
    """Draw one subject (centre, texture, noise) and render all frames."""
    g = spec.grid
    h, w = g.shape
    nominal = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    slack = np.array([(h - 1) / 2.0, (w - 1) / 2.0]) - spec.outer_radius - 2.0
    center = nominal + np.clip(rng.normal(scale=spec.center_jitter, size=2), -slack, slack)
    texture = _Texture(rng, spec.texture_amplitude)
    intensities = (rng.uniform(0.35, 0.45), rng.uniform(0.12, 0.2), rng.uniform(0.8, 0.9))
    s = scale_curve(spec)
    x = identity_grid(h, w)
    frames = np.empty((spec.frames, h, w))
    masks = np.empty((spec.frames, h, w), dtype=np.uint8)
    fields = np.empty((spec.frames, h, w, 2))
    for t, st in enumerate(s):
        rel = (x - center) / st
        frames[t] = _reference_intensity(rel, spec, texture, intensities)
        masks[t] = _labels(rel, spec)
        fields[t] = (1.0 / st - 1.0) * (x - center)
    if noise and spec.noise_std > 0:
        frames += rng.normal(scale=spec.noise_std, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)
    return SequenceRecord(
        frames=frames.astype(np.float32),
        spacing=float(np.float32(g.spacing)),
        masks=masks,
        scale=s.astype(np.float32),
        fields=fields.astype(np.float32),
    )


def _generate_subject(ss, spec, contraction_range, es_jitter, radius_jitter):
    rng = np.random.default_rng(ss)
    c = rng.uniform(*contraction_range) if contraction_range else spec.contraction
    p = spec.es_phase + rng.uniform(-es_jitter, es_jitter)
    r = spec.pool_radius + rng.uniform(-radius_jitter, radius_jitter)
    return generate_sequence(replace(spec, contraction=c, es_phase=p, pool_radius=r), rng)


def generate_dataset(count, spec: SyntheticSpec, seed, contraction_range=(0.15, 0.45),
                     es_jitter=0.03, radius_jitter=0.5, map_fn=map):
    """``count`` subjects, each from its own RNG substream of ``seed``.

    ``contraction_range=None`` keeps ``spec.contraction`` for every subject.
    ``map_fn`` may be an executor's ordered ``map`` to generate in parallel;
    the result does not depend on it.
    """
    streams = np.random.SeedSequence(seed).spawn(count)
    return list(map_fn(lambda ss: _generate_subject(ss, spec, contraction_range, es_jitter,
                                                    radius_jitter), streams))


def ground_truth_volume_curve(record: SequenceRecord, label=POOL):
    """Per-frame area (mm^2) of ``label`` in the ground-truth masks."""
    if record.masks is None:
        raise ValueError("record has no masks")
    counts = np.sum(record.masks == label, axis=(1, 2))
    return counts * record.spacing ** 2


# -------------------------------------------------------------- dataset file

def write_dataset(records, path):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(records)))
        for rec in records:
            n, h, w = rec.frames.shape
            has_mask = rec.masks is not None
            f.write(struct.pack("<HHHfB", n, h, w, rec.spacing, int(has_mask)))
            f.write(np.ascontiguousarray(rec.frames, dtype="<f4").tobytes())
            if has_mask:
                f.write(np.ascontiguousarray(rec.masks, dtype=np.uint8).tobytes())
            f.write(struct.pack("<B", int(rec.has_ground_truth)))
            if rec.has_ground_truth:
                f.write(np.ascontiguousarray(rec.scale, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(rec.fields, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.path}: truncated at byte {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, shape):
        dt = np.dtype(dtype)
        n = int(np.prod(shape))
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()


def read_dataset(path):
    with open(path, "rb") as f:
        buf = f.read()
    rd = _Reader(buf, path)
    if len(buf) < 4 or rd.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a MOTN dataset")
    version, count = rd.unpack("<HI")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    records = []
    for _ in range(count):
        n, h, w, spacing, has_mask = rd.unpack("<HHHfB")
        frames = rd.array("<f4", (n, h, w)).astype(np.float32)
        masks = rd.array(np.uint8, (n, h, w)) if has_mask else None
        (has_gt,) = rd.unpack("<B")
        scale = fields = None
        if has_gt:
            scale = rd.array("<f4", (n,)).astype(np.float32)
            fields = rd.array("<f4", (n, h, w, 2)).astype(np.float32)
        records.append(SequenceRecord(frames, float(np.float32(spacing)), masks, scale, fields))
    return records

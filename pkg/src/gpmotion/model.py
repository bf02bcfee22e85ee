"""Conditional VAE motion model with a GP prior over the motion matrix.

Pipeline for one sequence with reference frame ``I_0`` and F-1 pairs:

1. encoder: each pair (I_0, I_t) -> feature vector of length 2D (shared weights)
2. features are placed at evenly spread slots of a 2D x T feature matrix;
   missing slots are zero (temporal dropout zeroes more during training)
3. TCN over the feature matrix -> posterior mean mu (D x T) and variance
   multipliers s (D,)
4. z = mu + L* eps, decoded column by column (conditioned on I_0) into
   velocities, smoothed in time and space, exponentiated, and used to warp I_0
5. loss = SSD / (2 sigma_L) over reconstructed frames + KL(q || GP prior)
"""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .deformation import (GridSpec, SmoothingSpec, exponentiate, gaussian_smooth_spatial,
                          gaussian_smooth_temporal, steps_for, warp)
from .gp import KernelSpec, MotionMatrix, PosteriorParams, build_kernel_matrix, kl_gp, sample_posterior

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GPMM"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    height: int = 32
    width: int = 32
    spacing: float = 1.5
    latent_dims: int = 8
    t_lat: int = 16
    encoder_channels: tuple = (8, 16, 16, 4)
    encoder_strides: tuple = (2, 2, 2, 1)
    decoder_channels: tuple = (16, 16, 16, 8)
    tcn_dilations: tuple = (1, 2, 4, 8)
    tcn_dropout: float = 0.1
    sigma_l: float = 0.0045
    td_rate: float = 0.5
    max_frames: int = 0  # sub-sequence size; 0 disables sub-sequence training
    v_max: float = 5.0
    exp_steps: int = 6
    exp_step_rule: str = "fixed"  # or "adaptive": max|v| / 2^n < 0.5 px
    mean_head: str = "whitened"  # or "direct": mu read straight off the TCN
    smoothing: SmoothingSpec = field(default_factory=SmoothingSpec)
    kernel: KernelSpec = field(default_factory=KernelSpec)

    def __post_init__(self):
        if self.latent_dims < 1:
            raise ValueError("latent_dims must be >= 1")
        if self.t_lat < 2:
            raise ValueError("t_lat must be >= 2")
        if self.sigma_l <= 0:
            raise ValueError("sigma_l must be positive")
        if not 0.0 <= self.td_rate < 1.0:
            raise ValueError("td_rate must lie in [0, 1)")
        if self.max_frames and not 2 <= self.max_frames <= self.t_lat:
            raise ValueError("max_frames must lie in [2, t_lat]")
        if self.height % 8 or self.width % 8:
            raise ValueError("image extents must be multiples of 8")
        if any(d >= self.t_lat for d in self.tcn_dilations):
            raise ad.ConfigurationError("TCN dilations must be shorter than t_lat")
        if len(self.encoder_channels) != 4 or len(self.decoder_channels) != 4:
            raise ValueError("expected 4 encoder and 4 decoder channel counts")
        if self.exp_step_rule not in ("fixed", "adaptive"):
            raise ValueError("exp_step_rule must be 'fixed' or 'adaptive'")
        if self.mean_head not in ("direct", "whitened"):
            raise ValueError("mean_head must be 'direct' or 'whitened'")

    @property
    def grid(self):
        return GridSpec(self.height, self.width, self.spacing)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if "smoothing" in d and isinstance(d["smoothing"], dict):
            d["smoothing"] = SmoothingSpec(**d["smoothing"])
        if "kernel" in d and isinstance(d["kernel"], dict):
            d["kernel"] = KernelSpec(**d["kernel"])
        for key in ("encoder_channels", "encoder_strides", "decoder_channels", "tcn_dilations"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ------------------------------------------------------------------ parameters

def _he(rng, shape, fan_in, gain=np.sqrt(2.0 / (1 + ad.LEAKY_SLOPE ** 2))):
    return rng.normal(scale=gain / np.sqrt(fan_in), size=shape)


def init_params(config: ModelConfig, rng):
    """Ordered dict of named parameters (biases zero, He-normal weights)."""
    c = config
    two_d = 2 * c.latent_dims
    p = {}
    c_in = 2
    for i, c_out in enumerate(c.encoder_channels):
        p[f"enc.conv{i}.w"] = _he(rng, (c_out, c_in, 3, 3), c_in * 9)
        p[f"enc.conv{i}.b"] = np.zeros(c_out)
        c_in = c_out
    h8, w8 = c.height // 8, c.width // 8
    flat = c.encoder_channels[-1] * h8 * w8
    p["enc.fc.w"] = _he(rng, (flat, two_d), flat, gain=1.0)
    p["enc.fc.b"] = np.zeros(two_d)

    p["tcn.in.w"] = _he(rng, (two_d, two_d), two_d, gain=1.0)
    p["tcn.in.b"] = np.zeros(two_d)
    for k in range(len(c.tcn_dilations)):
        p[f"tcn.block{k}.conv.w"] = _he(rng, (two_d, two_d, 3), two_d * 3)
        p[f"tcn.block{k}.conv.b"] = np.zeros(two_d)
        p[f"tcn.block{k}.out.w"] = _he(rng, (two_d, two_d), two_d, gain=0.5)
        p[f"tcn.block{k}.out.b"] = np.zeros(two_d)

    dc = c.decoder_channels
    p["dec.fc.w"] = _he(rng, (c.latent_dims, dc[0] * h8 * w8), c.latent_dims, gain=1.0)
    p["dec.fc.b"] = np.zeros(dc[0] * h8 * w8)
    c_in = dc[0]
    for i in range(3):
        p[f"dec.deconv{i}.w"] = _he(rng, (c_in + 1, dc[i], 3, 3), (c_in + 1) * 9 / 4)
        p[f"dec.deconv{i}.b"] = np.zeros(dc[i])
        c_in = dc[i]
    p["dec.conv0.w"] = _he(rng, (dc[3], c_in + 1, 3, 3), (c_in + 1) * 9)
    p["dec.conv0.b"] = np.zeros(dc[3])
    p["dec.conv1.w"] = _he(rng, (2, dc[3], 3, 3), dc[3] * 9, gain=0.1)
    p["dec.conv1.b"] = np.zeros(2)
    return {name: ad.Parameter(value, name=name) for name, value in p.items()}


# --------------------------------------------------------- feature placement

@dataclass
class FeatureMatrix:
    """2D x T features; unavailable columns are zero."""

    gamma: np.ndarray
    available: np.ndarray

    def __post_init__(self):
        if np.any(self.gamma[:, ~self.available] != 0):
            raise ValueError("unavailable columns must be zero")


def pair_slots(n_pairs, t_lat):
    """Slots of all ``n_pairs`` pairs: round(k (T-1) / (P-1)), collisions shifted right."""
    if n_pairs > t_lat:
        raise ValueError(f"{n_pairs} frame pairs do not fit in {t_lat} latent steps")
    if n_pairs == 1:
        return np.array([0])
    raw = np.floor(np.arange(n_pairs) * (t_lat - 1) / (n_pairs - 1) + 0.5).astype(int)
    taken = np.zeros(t_lat, dtype=bool)
    slots = []
    for s in raw:
        free = np.flatnonzero(~taken[s:])
        s = s + free[0] if free.size else np.flatnonzero(~taken)[-1]
        taken[s] = True
        slots.append(int(s))
    return np.array(slots)


def placement_matrix(pair_indices, n_pairs, t_lat):
    """(len(pair_indices), T) one-hot matrix moving pair features to their slots."""
    slots = pair_slots(n_pairs, t_lat)
    m = np.zeros((len(pair_indices), t_lat))
    m[np.arange(len(pair_indices)), slots[np.asarray(pair_indices, dtype=int)]] = 1.0
    return m


def assemble_feature_matrix(features, n_frames, t_lat):
    """Place ``(pair_index, gamma)`` items into a :class:`FeatureMatrix`."""
    n_pairs = n_frames - 1
    slots = pair_slots(n_pairs, t_lat)
    two_d = len(features[0][1]) if features else 0
    gamma = np.zeros((two_d, t_lat))
    available = np.zeros(t_lat, dtype=bool)
    for k, g in features:
        if not 0 <= k < n_pairs:
            raise ValueError(f"pair index {k} outside [0, {n_pairs})")
        gamma[:, slots[k]] = g
        available[slots[k]] = True
    return FeatureMatrix(gamma, available)


def temporal_dropout_mask(available, rate, rng):
    """Keep-mask over columns: each available column dropped with probability ``rate``."""
    drop = rng.random(np.shape(available)) < rate
    return np.asarray(available, dtype=bool) & ~drop


def temporal_dropout(fm: FeatureMatrix, rate, rng):
    """Zero available columns with probability ``rate``; availability is unchanged."""
    keep = temporal_dropout_mask(fm.available, rate, rng)
    return FeatureMatrix(fm.gamma * keep, fm.available.copy()) if rate else fm


def subsequence_select(n_frames, max_frames, rng):
    """Sorted pair indices to encode and decode in one training step."""
    n_pairs = n_frames - 1
    if max_frames < 2:
        raise ValueError("sub-sequences need at least two frames")
    if n_pairs <= max_frames:
        return np.arange(n_pairs)
    return np.sort(rng.choice(n_pairs, size=max_frames, replace=False))


# ------------------------------------------------------------------- helpers

def downsample(image, factor):
    """Bilinear down-sampling by an integer factor (samples at block centres)."""
    img = np.asarray(image, dtype=float)
    if factor == 1:
        return img
    h, w = img.shape
    rows = factor * np.arange(h // factor) + (factor - 1) / 2.0
    cols = factor * np.arange(w // factor) + (factor - 1) / 2.0
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    return (img[np.ix_(r0, c0)] * (1 - fr) * (1 - fc) + img[np.ix_(r0, c1)] * (1 - fr) * fc
            + img[np.ix_(r1, c0)] * fr * (1 - fc) + img[np.ix_(r1, c1)] * fr * fc)


@dataclass
class Decoded:
    velocity: ad.Tensor  # (N, H, W, 2) after smoothing
    fields: ad.Tensor    # (N, H, W, 2) displacements
    warped: ad.Tensor    # (N, H, W)


@dataclass
class RegistrationResult:
    fields: np.ndarray      # (F-1, H, W, 2), one per frame pair
    warped: np.ndarray      # (F-1, H, W)
    motion: MotionMatrix
    slots: np.ndarray       # latent slot of each pair
    all_fields: np.ndarray  # (T, H, W, 2), every latent slot
    posterior: PosteriorParams


class MotionModel:
    """Parameters plus the forward passes of the motion model."""

    def __init__(self, config: ModelConfig, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, np.random.default_rng(seed))
        self.kernel = build_kernel_matrix(config.kernel, config.t_lat)
        # symmetric square root of K: mu = alpha K^1/2 makes mu' K^-1 mu = |alpha|^2
        w, q = np.linalg.eigh(self.kernel.K)
        self.mean_map = (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def _check_images(self, *images):
        for img in images:
            if np.shape(img)[-2:] != (self.config.height, self.config.width):
                raise ValueError(f"image extent {np.shape(img)[-2:]} does not match the model grid")

    # encoder ---------------------------------------------------------------
    def encode_pairs(self, reference, frames):
        """Feature vectors (P, 2D) of pairs (reference, frames[k])."""
        frames = np.asarray(frames, dtype=float)
        self._check_images(reference, frames)
        ref = np.broadcast_to(np.asarray(reference, dtype=float), frames.shape)
        x = ad.Tensor(np.stack([ref, frames], axis=1))
        p = self.params
        for i, stride in enumerate(self.config.encoder_strides):
            x = ad.conv2d(x, p[f"enc.conv{i}.w"], stride=stride, bias=p[f"enc.conv{i}.b"])
            x = ad.leaky_relu(x)
        x = ad.reshape(x, (x.shape[0], -1))
        return ad.fully_connected(x, p["enc.fc.w"], p["enc.fc.b"])

    def encode_pair(self, reference, frame):
        return self.encode_pairs(reference, np.asarray(frame)[None]).data[0]

    # temporal network --------------------------------------------------------
    def tcn(self, gamma, rng=None, training=False):
        """Posterior parameters from a (2D, T) feature matrix (tensor or array).

        Returns (mu (D, T), s (D,)) tensors.
        """
        c = self.config
        p = self.params
        g = ad.as_tensor(gamma)
        if g.shape != (2 * c.latent_dims, c.t_lat):
            raise ValueError(f"feature matrix must be {(2 * c.latent_dims, c.t_lat)}, got {g.shape}")
        x = ad.add(ad.matmul(p["tcn.in.w"], g), ad.reshape(p["tcn.in.b"], (-1, 1)))
        total = None
        for k, d in enumerate(c.tcn_dilations):
            y = ad.conv1d_dilated(x, p[f"tcn.block{k}.conv.w"], d, bias=p[f"tcn.block{k}.conv.b"])
            y = ad.leaky_relu(y)
            if training and rng is not None:
                y = ad.spatial_dropout1d(y, c.tcn_dropout, rng, training=True)
            y = ad.add(ad.matmul(p[f"tcn.block{k}.out.w"], y), ad.reshape(p[f"tcn.block{k}.out.b"], (-1, 1)))
            x = ad.add(x, y)
            total = x if total is None else ad.add(total, x)
        dim = c.latent_dims
        mu = ad.getitem(total, slice(0, dim))
        if c.mean_head == "whitened":
            mu = ad.matmul(mu, self.mean_map)
        raw = ad.mean_axis(ad.getitem(total, slice(dim, 2 * dim)), axis=1)
        return mu, ad.exp(raw)

    # decoder -----------------------------------------------------------------
    def decode(self, z_cols, reference):
        """Decode latent columns (N, D) into smoothed velocities, fields and warped images."""
        c = self.config
        p = self.params
        self._check_images(reference)
        z = ad.as_tensor(z_cols)
        n = z.shape[0]
        ref = np.asarray(reference, dtype=float)
        h8, w8 = c.height // 8, c.width // 8
        x = ad.fully_connected(z, p["dec.fc.w"], p["dec.fc.b"])
        x = ad.reshape(x, (n, c.decoder_channels[0], h8, w8))
        for i, factor in enumerate((8, 4, 2)):
            cond = np.broadcast_to(downsample(ref, factor), (n, 1) + x.shape[2:])
            x = ad.concat([x, cond], axis=1)
            x = ad.conv_transpose2d(x, p[f"dec.deconv{i}.w"], bias=p[f"dec.deconv{i}.b"])
            x = ad.leaky_relu(x)
        x = ad.concat([x, np.broadcast_to(ref, (n, 1) + ref.shape)], axis=1)
        x = ad.leaky_relu(ad.conv2d(x, p["dec.conv0.w"], bias=p["dec.conv0.b"]))
        x = ad.conv2d(x, p["dec.conv1.w"], bias=p["dec.conv1.b"])
        v = ad.mul(ad.tanh(x), c.v_max)
        v = ad.transpose(v, (0, 2, 3, 1))
        v = gaussian_smooth_temporal(v, c.smoothing)
        v = gaussian_smooth_spatial(v, c.smoothing, c.grid)
        steps = c.exp_steps if c.exp_step_rule == "fixed" else steps_for(v.data)
        u = exponentiate(v, steps)
        warped = warp(ad.Tensor(ref), u)
        return Decoded(v, u, warped)

    def decode_step(self, z_t, reference):
        """Single latent column -> (velocity, displacement, warped image) arrays."""
        out = self.decode(np.asarray(z_t, dtype=float).reshape(1, -1), reference)
        return out.velocity.data[0], out.fields.data[0], out.warped.data[0]

    # loss ------------------------------------------------------------------
    def elbo_loss(self, frames, rng, training=True, pair_indices=None):
        """Negative ELBO of one sequence; returns (loss tensor, recon, kl).

        ``frames`` holds the reference at index 0.  ``pair_indices`` selects
        a sub-sequence (encoded, decoded and scored); all pairs by default.
        """
        c = self.config
        frames = np.asarray(frames, dtype=float)
        ref, rest = frames[0], frames[1:]
        n_pairs = rest.shape[0]
        if pair_indices is None:
            pair_indices = np.arange(n_pairs)
        pair_indices = np.asarray(pair_indices)
        slots = pair_slots(n_pairs, c.t_lat)[pair_indices]
        gamma = self.encode_pairs(ref, rest[pair_indices])
        place = placement_matrix(pair_indices, n_pairs, c.t_lat)
        if training and c.td_rate > 0:
            keep = rng.random(len(pair_indices)) >= c.td_rate
            place = place * keep[:, None]
        gmat = ad.matmul(ad.transpose(gamma), place)
        mu, s = self.tcn(gmat, rng, training)
        if training:
            eps = rng.standard_normal(c.latent_dims * c.t_lat)
            z = sample_posterior(mu, s, self.kernel.L, eps)
        else:
            z = mu
        cols = ad.transpose(z)
        subsequence = len(pair_indices) < n_pairs
        if subsequence:
            cols = ad.getitem(cols, slots)
            out = self.decode(cols, ref)
            warped = out.warped
        else:
            out = self.decode(cols, ref)
            warped = ad.getitem(out.warped, slots)
        resid = ad.sub(warped, rest[pair_indices])
        recon = ad.mul(ad.sum_all(ad.square(resid)), 0.5 / c.sigma_l)
        kl = kl_gp(ad.reshape(mu, (-1,)), s, self.kernel)
        return ad.add(recon, kl), float(recon.data), float(kl.data)

    # inference -------------------------------------------------------------
    def posterior(self, frames, pair_indices=None):
        """Posterior (mu, s) with only ``pair_indices`` observed (all by default)."""
        c = self.config
        frames = np.asarray(frames, dtype=float)
        n_pairs = frames.shape[0] - 1
        if pair_indices is None:
            pair_indices = np.arange(n_pairs)
        pair_indices = np.asarray(pair_indices, dtype=int)
        if pair_indices.size:
            gamma = self.encode_pairs(frames[0], frames[1:][pair_indices]).data
            gmat = gamma.T @ placement_matrix(pair_indices, n_pairs, c.t_lat)
        else:
            gmat = np.zeros((2 * c.latent_dims, c.t_lat))
        mu, s = self.tcn(gmat)
        return PosteriorParams(mu.data.ravel(), s.data)

    def decode_all(self, z, reference):
        """Fields and warped images for every latent column of ``z`` (D, T)."""
        out = self.decode(np.asarray(z, dtype=float).T, reference)
        return out.fields.data, out.warped.data

    def _check_finite(self):
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"parameter {name} is not finite")

    def register(self, frames):
        """Posterior-mean registration of all frames to frame 0."""
        self._check_finite()
        frames = np.asarray(frames, dtype=float)
        n_pairs = frames.shape[0] - 1
        post = self.posterior(frames)
        z = post.segments()
        fields, warped = self.decode_all(z, frames[0])
        slots = pair_slots(n_pairs, self.config.t_lat)
        return RegistrationResult(fields[slots], warped[slots], MotionMatrix(z, "mean"),
                                  slots, fields, post)

    def interpolate(self, frames, provided):
        """Fields for every latent slot when only pairs ``provided`` are observed.

        ``frames`` is the full sequence (unobserved frames are never read).
        """
        provided = np.asarray(sorted(set(int(k) for k in provided)), dtype=int)
        if provided.size == 0:
            raise ValueError("no frames provided; use simulate()")
        self._check_finite()
        frames = np.asarray(frames, dtype=float)
        post = self.posterior(frames, provided)
        fields, _ = self.decode_all(post.segments(), frames[0])
        return fields

    def simulate(self, reference):
        """Fields for every latent slot from an all-zero feature matrix."""
        self._check_finite()
        mu, _ = self.tcn(np.zeros((2 * self.config.latent_dims, self.config.t_lat)))
        fields, _ = self.decode_all(mu.data, reference)
        return fields

    def transport(self, motion: MotionMatrix, reference):
        """Decode another subject's motion matrix on ``reference``."""
        c = self.config
        if motion.shape != (c.latent_dims, c.t_lat):
            raise ValueError(f"motion matrix {motion.shape} does not match ({c.latent_dims}, {c.t_lat})")
        fields, _ = self.decode_all(motion.z, reference)
        return fields


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    augment: bool = True
    max_shift: float = 4.0
    max_rotation: float = 15.0  # degrees
    scale_range: tuple = (0.9, 1.1)
    mirror_prob: float = 0.5
    augment_prob: float = 0.25  # fraction of sequences that get augmented
    lr_schedule: str = "constant"  # or "cosine": decays to lr * lr_min_factor at the last step
    lr_min_factor: float = 0.05

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if not 0.0 < self.lr_min_factor <= 1.0:
            raise ValueError("lr_min_factor must lie in (0, 1]")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ValueError("augment_prob must lie in [0, 1]")

    def lr_at(self, step, total):
        """Learning rate for 0-based ``step`` of ``total``."""
        if self.lr_schedule == "constant" or total <= 1:
            return self.lr
        frac = step / (total - 1)
        lo = self.lr_min_factor
        return self.lr * (lo + (1.0 - lo) * 0.5 * (1.0 + np.cos(np.pi * frac)))


def augment_sequence(frames, cfg: TrainConfig, rng):
    """Apply one random shift/rotation/scale/mirror to every frame."""
    n, h, w = frames.shape
    angle = np.deg2rad(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    scale = rng.uniform(*cfg.scale_range)
    shift = rng.uniform(-cfg.max_shift, cfg.max_shift, size=2)
    mirror = rng.random() < cfg.mirror_prob
    cos, sin = np.cos(angle), np.sin(angle)
    # output -> input mapping about the image centre
    mat = np.array([[cos, -sin], [sin, cos]]) / scale
    if mirror:
        mat = mat @ np.diag([1.0, -1.0])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - mat @ (centre + shift)
    out = np.empty_like(frames)
    for t in range(n):
        out[t] = ndimage.affine_transform(frames[t], mat, offset=offset, order=1, mode="nearest")
    return out


@dataclass
class TrainResult:
    model: MotionModel
    log: list
    seconds: float = 0.0


def train(records, config: ModelConfig, train_config: TrainConfig = TrainConfig(), seed=0,
          model=None, progress=None):
    """Fit the model on ``records`` with batch size one; deterministic given ``seed``."""
    import time

    if not records:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    if model is None:
        model = MotionModel(config, init_params(config, rng))
    params = model.parameters()
    log.info("training %d parameters on %d sequences", model.n_parameters(), len(records))
    history = []
    step = 0
    total = train_config.epochs * len(records)
    start = time.perf_counter()
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(records))
        for idx in order:
            frames = np.asarray(records[idx].frames, dtype=float)
            # no extra draw at prob 1, so fully augmented runs keep their stream
            if train_config.augment and (train_config.augment_prob >= 1.0
                                         or rng.random() < train_config.augment_prob):
                frames = augment_sequence(frames, train_config, rng)
            pairs = None
            if config.max_frames:
                pairs = subsequence_select(frames.shape[0], config.max_frames, rng)
            ad.zero_grads(params)
            with ad.Tape() as tape:
                loss, recon, kl = model.elbo_loss(frames, rng, training=True, pair_indices=pairs)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"loss became {float(loss.data)} at step {step}")
            ad.backward(tape, loss)
            ad.adam_step(params, train_config.lr_at(step, total), train_config.beta1, train_config.beta2,
                         train_config.eps, train_config.weight_decay)
            step += 1
            history.append({"epoch": epoch, "step": step, "loss": float(loss.data),
                            "recon": recon, "kl": kl})
            if progress is not None:
                progress(history[-1])
    return TrainResult(model, history, time.perf_counter() - start)


def write_training_log(history, path):
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "step", "loss", "recon", "kl"])
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(float(v)) if k in ("loss", "recon", "kl") else v
                             for k, v in row.items()})


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: MotionModel):
    blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for name, p in model.params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> MotionModel:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise IncompatibleCheckpointError(f"{path}: not a GPMM checkpoint")
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: checkpoint version {version}")
    pos = 10
    config = ModelConfig.from_dict(json.loads(buf[pos:pos + n].decode("utf-8")))
    pos += n
    params = {}
    try:
        while pos < len(buf):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape))
            data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            params[name] = ad.Parameter(data.astype(np.float64), name=name)
    except (struct.error, ValueError) as exc:
        raise IncompatibleCheckpointError(f"{path}: truncated checkpoint") from exc
    expected = init_params(config, np.random.default_rng(0))
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise IncompatibleCheckpointError(f"{path}: parameters do not match the stored config")
    return MotionModel(config, {k: params[k] for k in expected})

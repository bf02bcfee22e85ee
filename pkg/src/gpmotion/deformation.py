"""Diffeomorphic deformations from stationary velocity fields.

Fields are stored as displacements ``u`` of shape (..., H, W, 2) in pixel
units, component order (row, col).  A field maps ``x -> x + u(x)`` and an
image is warped by pulling values: ``out(x) = image(x + u(x))``.

All functions accept numpy arrays or tensors; tensor inputs stay on the
active tape so the whole chain (smoothing, exponentiation, warping) is
differentiable.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class GridSpec:
    height: int = 32
    width: int = 32
    spacing: float = 1.5  # mm per pixel

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise ValueError("grid extents must be >= 4")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")

    @property
    def shape(self):
        return (self.height, self.width)


@dataclass(frozen=True)
class SmoothingSpec:
    sigma_g: float = 3.0  # mm
    sigma_t: float = 1.5  # time steps

    def __post_init__(self):
        if self.sigma_g < 0 or self.sigma_t < 0:
            raise ValueError("smoothing widths must be non-negative")


def identity_grid(h, w):
    rows, cols = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    return np.stack([rows, cols], axis=-1)


def gaussian_weights(sigma):
    """Normalised discrete Gaussian truncated at radius ceil(3 sigma)."""
    if sigma <= 0:
        return np.ones(1)
    radius = int(np.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1)
    w = np.exp(-0.5 * (offsets / sigma) ** 2)
    return w / w.sum()


def smoothing_matrix(n, sigma):
    """(n, n) matrix applying the truncated Gaussian with border replication."""
    w = gaussian_weights(sigma)
    radius = w.size // 2
    m = np.zeros((n, n))
    for i in range(n):
        for k, wk in enumerate(w):
            j = min(max(i + k - radius, 0), n - 1)
            m[i, j] += wk
    return m


def _spatial_axes(x):
    nd = x.ndim
    return nd - 3, nd - 2  # H, W axes of (..., H, W, 2)


def gaussian_smooth_spatial(v, spec: SmoothingSpec, grid: GridSpec):
    """Separable spatial smoothing of a (..., H, W, 2) field; sigma given in mm."""
    if spec.sigma_g == 0:
        return v
    sigma_px = spec.sigma_g / grid.spacing
    t = ad.as_tensor(v)
    ax_h, ax_w = _spatial_axes(t)
    t = ad.linear_along_axis(t, smoothing_matrix(t.shape[ax_h], sigma_px), ax_h)
    t = ad.linear_along_axis(t, smoothing_matrix(t.shape[ax_w], sigma_px), ax_w)
    return t if isinstance(v, ad.Tensor) else t.data


def gaussian_smooth_temporal(stack, spec: SmoothingSpec):
    """Smoothing along the leading (time) axis of a (T, H, W, 2) stack."""
    if spec.sigma_t == 0:
        return stack
    t = ad.as_tensor(stack)
    t = ad.linear_along_axis(t, smoothing_matrix(t.shape[0], spec.sigma_t), 0)
    return t if isinstance(stack, ad.Tensor) else t.data


def _sample_field(u, coords):
    return ad.bilinear_sample(u, coords)


def _batched(u):
    t = ad.as_tensor(u)
    squeeze = t.ndim == 3
    if squeeze:
        t = ad.reshape(t, (1,) + t.shape)
    return t, squeeze


def exponentiate(v, n_steps=6):
    """Scaling and squaring: the time-one flow of the stationary velocity ``v``.

    Returns the displacement field of the resulting diffeomorphism.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    is_tensor = isinstance(v, ad.Tensor)
    u, squeeze = _batched(v)
    h, w = u.shape[1:3]
    grid = identity_grid(h, w)
    u = ad.mul(u, 1.0 / 2 ** n_steps)
    for _ in range(n_steps):
        u = ad.add(u, _sample_field(u, ad.add(u, grid)))
    if squeeze:
        u = ad.reshape(u, u.shape[1:])
    return u if is_tensor else u.data


def steps_for(v, max_step=0.5):
    """Smallest step count with max|v| / 2^n below ``max_step`` pixels."""
    vmax = float(np.max(np.linalg.norm(np.asarray(v), axis=-1), initial=0.0))
    n = 1
    while vmax / 2 ** n >= max_step:
        n += 1
    return n


def compose(u_a, u_b):
    """Displacement of ``phi_a o phi_b``: x -> x + u_b(x) + u_a(x + u_b(x))."""
    if np.shape(ad.as_tensor(u_a).data) != np.shape(ad.as_tensor(u_b).data):
        raise ValueError("fields live on different grids")
    is_tensor = isinstance(u_a, ad.Tensor) or isinstance(u_b, ad.Tensor)
    a, squeeze = _batched(u_a)
    b, _ = _batched(u_b)
    grid = identity_grid(*a.shape[1:3])
    out = ad.add(b, _sample_field(a, ad.add(b, grid)))
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out if is_tensor else out.data


def warp(image, u, mode="bilinear"):
    """Pull ``image`` (H, W) through displacement(s) ``u`` ((H, W, 2) or (N, H, W, 2)).

    ``nearest`` rounds the sampling position (border clamped) and is meant
    for label images; it is not differentiable.
    """
    img = ad.as_tensor(image)
    if img.shape != ad.as_tensor(u).shape[-3:-1]:
        raise ValueError(f"image {img.shape} and field {ad.as_tensor(u).shape} differ in grid")
    h, w = img.shape
    if mode == "nearest":
        ud = ad.as_tensor(u).data
        coords = ud + identity_grid(h, w)
        r = np.clip(np.floor(coords[..., 0] + 0.5), 0, h - 1).astype(np.intp)
        c = np.clip(np.floor(coords[..., 1] + 0.5), 0, w - 1).astype(np.intp)
        return np.asarray(image)[r, c]
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    is_tensor = isinstance(image, ad.Tensor) or isinstance(u, ad.Tensor)
    ut = ad.as_tensor(u)
    coords = ad.add(ut, identity_grid(h, w))
    src = ad.reshape(img, (1, h, w, 1))
    batched = ut.ndim == 4
    if not batched:
        coords = ad.reshape(coords, (1,) + coords.shape)
    out = ad.bilinear_sample(src, coords)
    out = ad.reshape(out, out.shape[:-1] if batched else out.shape[1:-1])
    return out if is_tensor else out.data


def jacobian_determinant(u, grid: GridSpec | None = None):
    """det(I + grad u) per pixel; central differences inside, one-sided at borders.

    Derivatives are taken per pixel, so the result does not depend on the
    physical spacing.
    """
    u = np.asarray(u, dtype=float)
    d0_dr, d0_dc = np.gradient(u[..., 0], axis=(-2, -1))
    d1_dr, d1_dc = np.gradient(u[..., 1], axis=(-2, -1))
    return (1.0 + d0_dr) * (1.0 + d1_dc) - d0_dc * d1_dr


def field_gradients(fields, grid: GridSpec | None = None):
    """(spatial_grad, temporal_grad) of a (T, H, W, 2) displacement sequence.

    spatial: mean Frobenius norm of the displacement gradient over frames
    and interior pixels; temporal: mean |u_t - u_{t-1}| over consecutive
    frames and all pixels.
    """
    u = np.asarray(fields, dtype=float)
    if u.ndim == 3:
        u = u[None]
    d0_dr = (u[:, 2:, 1:-1, 0] - u[:, :-2, 1:-1, 0]) / 2
    d0_dc = (u[:, 1:-1, 2:, 0] - u[:, 1:-1, :-2, 0]) / 2
    d1_dr = (u[:, 2:, 1:-1, 1] - u[:, :-2, 1:-1, 1]) / 2
    d1_dc = (u[:, 1:-1, 2:, 1] - u[:, 1:-1, :-2, 1]) / 2
    spatial = float(np.mean(np.sqrt(d0_dr ** 2 + d0_dc ** 2 + d1_dr ** 2 + d1_dc ** 2)))
    if u.shape[0] < 2:
        return spatial, 0.0
    temporal = float(np.mean(np.linalg.norm(np.diff(u, axis=0), axis=-1)))
    return spatial, temporal


# ------------------------------------------------------------- raw field file

def write_fields(path, fields):
    """Write (T, H, W, 2) displacements as little-endian f32 with a u16 header."""
    u = np.asarray(fields)
    if u.ndim == 3:
        u = u[None]
    t, h, w, _ = u.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<HHH", h, w, t))
        f.write(np.ascontiguousarray(u, dtype="<f4").tobytes())


def read_fields(path):
    with open(path, "rb") as f:
        h, w, t = struct.unpack("<HHH", f.read(6))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != t * h * w * 2:
        raise ValueError(f"{path}: truncated field file")
    return data.reshape(t, h, w, 2).astype(np.float64)

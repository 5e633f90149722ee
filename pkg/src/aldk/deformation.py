"""Displacement-field semantics: warping, composition and Jacobian analysis.

Conventions: volumes are [C,D,H,W] (or batched [N,C,D,H,W]) with the x axis
fastest (last).  A displacement field has three channels ordered
(u_x, u_y, u_z) in voxel units, so channel 0 moves samples along the last
array axis.  Warping samples ``image(p + u(p))`` and clamps out-of-range
coordinates to the boundary.
"""

from __future__ import annotations

import numpy as np

from .engine import EngineError, Tensor, as_tensor, compute_dtype, make_node, ops

_CORNERS = [(dz, dy, dx) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)]


def _batched(x: Tensor, name: str) -> tuple[Tensor, bool]:
    if x.ndim == 4:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != 5:
        raise EngineError(f"{name}: expected [C,D,H,W] or [N,C,D,H,W], got {x.shape}")
    return x, False


def _sample_coords(u: np.ndarray):
    """Clamped sample positions (z, y, x) and in-range masks for a field batch."""
    n, _, d, h, w = u.shape
    if not np.isfinite(u).all():
        raise EngineError("warp: displacement field has non-finite values")
    grid = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    coords, inside = [], []
    # channel 2 -> z (axis 2), channel 1 -> y, channel 0 -> x
    for axis, (chan, extent) in enumerate(zip((2, 1, 0), (d, h, w))):
        p = grid[axis][None].astype(np.float64) + u[:, chan].astype(np.float64)
        inside.append((p > 0) & (p < extent - 1))
        coords.append(np.clip(p, 0, extent - 1))
    return coords, inside


def _trilinear_setup(u: np.ndarray, extents):
    coords, inside = _sample_coords(u)
    lows, fracs = [], []
    for p, extent in zip(coords, extents):
        lo = np.minimum(np.floor(p), max(extent - 2, 0)).astype(np.int64)
        lows.append(lo)
        fracs.append(p - lo)
    return lows, fracs, inside


def _corner_index(lows, corner, extents):
    d, h, w = extents
    z = np.minimum(lows[0] + corner[0], d - 1)
    y = np.minimum(lows[1] + corner[1], h - 1)
    x = np.minimum(lows[2] + corner[2], w - 1)
    return (z * h + y) * w + x  # [N,D,H,W] flat voxel index


def _corner_weight(fracs, corner):
    wz = fracs[0] if corner[0] else 1.0 - fracs[0]
    wy = fracs[1] if corner[1] else 1.0 - fracs[1]
    wx = fracs[2] if corner[2] else 1.0 - fracs[2]
    return wz, wy, wx


def _gather(img: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, c = img.shape[:2]
    flat = img.reshape(n, c, -1)
    return np.take_along_axis(flat, idx.reshape(n, 1, -1).repeat(c, axis=1), axis=2).reshape(
        (n, c) + idx.shape[1:])


def _warp_trilinear(image: Tensor, field: Tensor) -> Tensor:
    img, u = image.data, field.data
    n, c = img.shape[:2]
    extents = img.shape[2:]
    lows, fracs, inside = _trilinear_setup(u, extents)
    idxs = [_corner_index(lows, k, extents) for k in _CORNERS]
    vals = [_gather(img, i).astype(np.float64) for i in idxs]
    out = np.zeros(img.shape, dtype=np.float64)
    for k, v in zip(_CORNERS, vals):
        wz, wy, wx = _corner_weight(fracs, k)
        out += (wz * wy * wx)[:, None] * v
    data = out.astype(compute_dtype())

    def bw(g, inputs, out_, needs):
        gd = g.data.astype(np.float64)
        gimg = gfield = None
        if needs[0]:
            vox = int(np.prod(extents))
            acc = np.zeros(n * c * vox)
            offs = (np.arange(n * c) * vox).reshape(n, c, 1)
            for k, i in zip(_CORNERS, idxs):
                wz, wy, wx = _corner_weight(fracs, k)
                wts = (wz * wy * wx)[:, None] * gd
                flat = (i.reshape(n, 1, -1) + offs).ravel()
                acc += np.bincount(flat, weights=wts.ravel(), minlength=n * c * vox)
            gimg = Tensor(acc.reshape(img.shape))
        if needs[1]:
            dz = np.zeros(u.shape[:1] + u.shape[2:])
            dy, dx = np.zeros_like(dz), np.zeros_like(dz)
            for k, v in zip(_CORNERS, vals):
                wz, wy, wx = _corner_weight(fracs, k)
                gv = (gd * v).sum(axis=1)
                sz = 1.0 if k[0] else -1.0
                sy = 1.0 if k[1] else -1.0
                sx = 1.0 if k[2] else -1.0
                dz += sz * wy * wx * gv
                dy += sy * wz * wx * gv
                dx += sx * wz * wy * gv
            gf = np.stack([dx * inside[2], dy * inside[1], dz * inside[0]], axis=1)
            gfield = Tensor(gf)
        return gimg, gfield

    return make_node(data, (image, field), "warp_trilinear", bw, twice_differentiable=False)


def _warp_nearest(image: Tensor, field: Tensor) -> Tensor:
    if image.requires_grad or field.requires_grad:
        raise EngineError("nearest-neighbour warp is not differentiable; detach inputs or use trilinear")
    img, u = image.data, field.data
    extents = img.shape[2:]
    coords, _ = _sample_coords(u)
    r = [np.floor(p + 0.5).astype(np.int64) for p in coords]
    d, h, w = extents
    idx = (r[0] * h + r[1]) * w + r[2]
    return Tensor(_gather(img, idx))


def warp(image, field, interp: str = "trilinear") -> Tensor:
    """Resample ``image`` at ``p + field(p)``.

    Trilinear mode is differentiable in both arguments; nearest mode is for
    binary masks and refuses inputs that require gradients.
    """
    image, field = as_tensor(image), as_tensor(field)
    image, squeeze = _batched(image, "warp image")
    field, _ = _batched(field, "warp field")
    if field.shape[1] != 3:
        raise EngineError(f"displacement field needs 3 channels, got {field.shape[1]}")
    if image.shape[2:] != field.shape[2:] or image.shape[0] != field.shape[0]:
        raise EngineError(f"warp extent mismatch: image {image.shape} vs field {field.shape}")
    if interp == "trilinear":
        out = _warp_trilinear(image, field)
    elif interp == "nearest":
        out = _warp_nearest(image, field)
    else:
        raise EngineError(f"unknown interpolation {interp!r}")
    return ops.reshape(out, out.shape[1:]) if squeeze else out


def compose(first, second) -> Tensor:
    """Field equivalent to warping by ``first`` and then by ``second``.

    u(p) = u_second(p) + u_first(p + u_second(p)).
    """
    first, second = as_tensor(first), as_tensor(second)
    if first.shape != second.shape:
        raise EngineError(f"compose extent mismatch: {first.shape} vs {second.shape}")
    return ops.add(second, warp(first, second, "trilinear"))


def zero_field(extent, batch: int | None = None) -> Tensor:
    shape = (3,) + tuple(extent) if not isinstance(extent, int) else (3, extent, extent, extent)
    if batch is not None:
        shape = (batch,) + shape
    return Tensor(np.zeros(shape, compute_dtype()))


# -- Jacobian analysis -------------------------------------------------------

def jacobian_det_map(field) -> np.ndarray:
    """Per-voxel det(I + grad u) for a [3,D,H,W] field, shape [1,D,H,W].

    Central differences inside, one-sided at the faces.
    """
    u = np.asarray(field.data if isinstance(field, Tensor) else field, dtype=np.float64)
    if u.ndim != 4 or u.shape[0] != 3:
        raise EngineError(f"jacobian_det_map expects [3,D,H,W], got {u.shape}")
    if min(u.shape[1:]) < 3:
        raise EngineError(f"jacobian_det_map needs extents >= 3, got {u.shape[1:]}")
    # jac[i][j] = d u_i / d x_j with (x, y, z) -> array axes (3, 2, 1)
    axis_of = (3, 2, 1)
    jac = np.empty(u.shape[1:] + (3, 3))
    for i in range(3):
        for j in range(3):
            jac[..., i, j] = np.gradient(u[i], axis=axis_of[j] - 1) + (1.0 if i == j else 0.0)
    return np.linalg.det(jac)[None]


def folding_count(field) -> int:
    """Number of voxels whose Jacobian determinant is <= 0."""
    return int((jacobian_det_map(field) <= 0).sum())


# -- fixed-grid linear resampling (used to feed the discriminator) -----------

def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Align-corners linear interpolation matrix of shape [n_out, n_in]."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def _axis_matmul(x: Tensor, m: np.ndarray, axis: int) -> Tensor:
    """Apply matrix ``m`` [out,in] along ``axis``; linear, so twice differentiable."""
    data = np.moveaxis(np.tensordot(m, x.data.astype(np.float64), axes=([1], [axis])), 0, axis)

    def bw(g, inputs, out, needs):
        return (_axis_matmul(g, m.T, axis),)

    return make_node(data.astype(compute_dtype()), (x,), "resample", bw)


def resample(x, size: int) -> Tensor:
    """Linearly resample the spatial axes of [N,C,D,H,W] to size^3."""
    x = as_tensor(x)
    x, squeeze = _batched(x, "resample")
    for axis in (2, 3, 4):
        if x.shape[axis] != size:
            x = _axis_matmul(x, _interp_matrix(size, x.shape[axis]), axis)
    return ops.reshape(x, x.shape[1:]) if squeeze else x

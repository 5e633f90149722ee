"""3D convolution and its transpose via im2col / col2im.

Zero padding is split as ``(k - s) // 2`` before and the rest after, so a
stride-s convolution maps extent n to n / s and the transposed convolution
maps n to n * s.  The two are exact adjoints for a shared kernel.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import EngineError, Tensor, as_tensor, compute_dtype, make_node
from . import ops


def _pads(k: int, s: int) -> tuple[int, int]:
    if k < s:
        raise EngineError(f"kernel size {k} smaller than stride {s}")
    lo = (k - s) // 2
    return lo, k - s - lo


def _im2col(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """[N,C,D,H,W] -> [N, C*k^3, D/s*H/s*W/s]."""
    n, c, d, h, w = x.shape
    lo, hi = _pads(k, s)
    xp = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi), (lo, hi)))
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
    do, ho, wo = win.shape[2:5]
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(n, c * k ** 3, do * ho * wo)
    return cols


def _col2im(cols: np.ndarray, c: int, out_spatial: tuple[int, int, int], k: int, s: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back onto a [N,C,D,H,W] grid."""
    n = cols.shape[0]
    d, h, w = out_spatial
    do, ho, wo = d // s, h // s, w // s
    lo, hi = _pads(k, s)
    xp = np.zeros((n, c, d + lo + hi, h + lo + hi, w + lo + hi), dtype=cols.dtype)
    blocks = cols.reshape(n, c, k, k, k, do, ho, wo)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                xp[:, :, a:a + s * do:s, b:b + s * ho:s, e:e + s * wo:s] += blocks[:, :, a, b, e]
    return xp[:, :, lo:lo + d, lo:lo + h, lo:lo + w]


def _check_spatial(shape, s: int, what: str) -> None:
    for n in shape:
        if n % s:
            raise EngineError(f"{what}: spatial extent {n} not divisible by stride {s}")


def _weight_grad_node(a: Tensor, g: Tensor, cols: np.ndarray, kshape, op: str) -> Tensor:
    """Kernel gradient sum_n a[n] @ cols[n]^T; first-order only."""
    data = np.einsum("nip,njp->ij", a.data.reshape(a.shape[0], a.shape[1], -1), cols, optimize=True)
    data = data.reshape(kshape).astype(compute_dtype())
    if not (a.requires_grad or g.requires_grad):
        return Tensor(data)

    def bw(gg, inputs, out, needs):
        raise EngineError(f"op '{op}' has no differentiable backward")

    return make_node(data, (a, g), op, bw, twice_differentiable=False)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 4:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != 5:
        raise EngineError(f"expected [C,D,H,W] or [N,C,D,H,W], got {x.shape}")
    return x, False


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation of x [N,Cin,D,H,W] with kernel [Cout,Cin,k,k,k]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    x, squeeze = _batched(x)
    cout, cin, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.ndim != 5 or kernel.shape[2:] != (k, k, k):
        raise EngineError(f"conv3d kernel must be [Cout,Cin,k,k,k], got {kernel.shape}")
    if x.shape[1] != cin:
        raise EngineError(f"conv3d: input has {x.shape[1]} channels, kernel expects {cin}")
    _check_spatial(x.shape[2:], stride, "conv3d")
    n = x.shape[0]
    out_sp = tuple(e // stride for e in x.shape[2:])
    cols = _im2col(x.data, k, stride)
    kmat = kernel.data.reshape(cout, -1)
    data = np.matmul(kmat, cols).reshape((n, cout) + out_sp)

    def bw(g, inputs, out, needs):
        xi, ki = inputs
        gx = tconv3d(g, ki, None, stride) if needs[0] else None
        gk = _weight_grad_node(g, xi, cols, ki.shape, "conv3d_kernel_grad") if needs[1] else None
        return gx, gk

    y = make_node(data, (x, kernel), "conv3d", bw)
    if bias is not None:
        y = ops.add(y, ops.reshape(as_tensor(bias), (1, cout, 1, 1, 1)))
    return ops.reshape(y, y.shape[1:]) if squeeze else y


def tconv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution, the adjoint of conv3d with the same kernel.

    ``kernel`` has shape [Cin,Cout,k,k,k] where Cin matches x's channels, i.e.
    the kernel of the conv3d this op transposes.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    x, squeeze = _batched(x)
    cin, cout, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.ndim != 5 or kernel.shape[2:] != (k, k, k):
        raise EngineError(f"tconv3d kernel must be [Cin,Cout,k,k,k], got {kernel.shape}")
    if x.shape[1] != cin:
        raise EngineError(f"tconv3d: input has {x.shape[1]} channels, kernel expects {cin}")
    n = x.shape[0]
    out_sp = tuple(e * stride for e in x.shape[2:])
    kmat = kernel.data.reshape(cin, -1)
    xflat = x.data.reshape(n, cin, -1)
    cols = np.matmul(kmat.T, xflat)
    data = _col2im(cols, cout, out_sp, k, stride)

    def bw(g, inputs, out, needs):
        xi, ki = inputs
        gx = conv3d(g, ki, None, stride) if needs[0] else None
        gk = None
        if needs[1]:
            gcols = _im2col(g.data, k, stride)
            gk = _weight_grad_node(xi, g, gcols, ki.shape, "tconv3d_kernel_grad")
        return gx, gk

    y = make_node(data, (x, kernel), "tconv3d", bw)
    if bias is not None:
        y = ops.add(y, ops.reshape(as_tensor(bias), (1, cout, 1, 1, 1)))
    return ops.reshape(y, y.shape[1:]) if squeeze else y

"""Fused differentiable ops used by the encoder and the losses."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _make, as_tensor


class DegenerateInputError(ValueError):
    """Input for which an op is undefined (e.g. normalizing a zero vector)."""


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``x`` [B,Cin,H,W] with ``kernel`` [Cout,Cin,kH,kW]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, cin, H, W = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ValueError(f"conv2d channel mismatch: input has {cin} channels, kernel expects {kcin}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # patches laid out [Cin,kh,kw,B,Ho,Wo] so both the copy and the scatter stay contiguous
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(cin * kh * kw, B * Ho * Wo)
    wmat = kernel.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, B, Ho, Wo).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, kh, kw, B, Ho, Wo)
            dxp = np.zeros((cin, B, Hp, Wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, i, j]
            gx = dxp[:, :, padding : padding + H, padding : padding + W].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        return gx, gk

    return _make(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ weight.T + bias``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear dimension mismatch: input has {x.shape[1]} features, weight expects {weight.shape[1]}")
    parents = (x, weight)
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match output dim {weight.shape[0]}")
        out = out + bias.data
        parents = parents + (bias,)

    def backward(g):
        grads = [
            g @ weight.data if x.requires_grad else None,
            g.T @ x.data if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward, "linear")


def _stable_lse(z: np.ndarray, axis: int) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    if logits.ndim == 0 or logits.shape[axis] == 0:
        raise ValueError("log_softmax over an empty class axis")
    out = logits.data - _stable_lse(logits.data, axis)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (logits,), backward, "log_softmax")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("logsumexp over an empty axis")
    lse = _stable_lse(x.data, axis)

    def backward(g):
        return (np.expand_dims(g, axis) * np.exp(x.data - lse),)

    return _make(np.squeeze(lse, axis=axis), (x,), backward, "logsumexp")


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax; not recorded on the graph."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def pairwise_sq_euclidean(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of squared distances between rows of ``a`` [N,D] and ``b`` [M,D]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"pairwise distances need 2-d inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("nmd,nmd->nm", diff, diff)

    def backward(g):
        ga = 2 * (a.data * g.sum(axis=1, keepdims=True) - g @ b.data) if a.requires_grad else None
        gb = 2 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "pairwise_sq_euclidean")


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean norm."""
    v = as_tensor(v)
    norm = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    if (norm <= eps).any():
        bad = np.argwhere(norm[..., 0] <= eps)
        raise DegenerateInputError(f"cannot normalize zero-norm vector(s) at index {bad[0].tolist()}")
    out = v.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (v,), backward, "l2_normalize")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over channel groups of ``x`` [B,C,H,W]."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    B, C = x.shape[:2]
    if C % groups:
        raise ValueError(f"{C} channels not divisible into {groups} groups")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = (centered * inv_std).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(bshape)).reshape(B, groups, -1)
            xh = xhat.reshape(B, groups, -1)
            gx = (
                inv_std
                * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xh * (dxhat * xh).mean(axis=-1, keepdims=True))
            ).reshape(x.shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "group_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or ``rate == 0``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of a [B,C,H,W] tensor."""
    return as_tensor(x).mean(axis=(2, 3))

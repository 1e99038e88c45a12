"""Differentiable building blocks for the segmentation network."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import (
    Tensor,
    assert_finite,
    constant,
    div,
    exp,
    im2col,
    log,
    matmul,
    mul,
    neg,
    reshape,
    sub,
    transpose,
    tsum,
)

__all__ = ["conv2d", "pixel_cross_entropy", "softmax_channel", "finite_difference_gradient"]

IGNORE_LABEL = 255


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int | None = None) -> Tensor:
    """Stride-1 2-D convolution that preserves spatial size.

    ``x`` is (N, C_in, H, W), ``kernel`` (C_out, C_in, k, k) with odd k,
    ``bias`` (C_out,). Padding must equal (k - 1) // 2; it defaults to
    that value when omitted.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be rank 4, got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be rank 4, got shape {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}")
    if x.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias must have shape ({c_out},), got {bias.shape}")
    same = (kh - 1) // 2
    if padding is None:
        padding = same
    elif padding != same:
        raise ValueError(f"padding must be {same} for kernel size {kh}, got {padding}")

    n, _, h, w = x.shape
    cols = im2col(x, kh, padding)  # (N*H*W, C_in*k*k)
    kmat = reshape(kernel, (c_out, c_in * kh * kw))
    out = matmul(cols, transpose(kmat, (1, 0)))  # (N*H*W, C_out)
    out = out + reshape(bias, (1, c_out))
    out = transpose(reshape(out, (n, h, w, c_out)), (0, 3, 1, 2))
    assert_finite(out.data, "conv2d output")
    return out


def softmax_channel(logits: Tensor) -> Tensor:
    """Softmax over the channel axis of (N, K, H, W) logits.

    The max shift is treated as a constant; it changes nothing
    numerically and keeps the graph small.
    """
    m = constant(logits.data.max(axis=1, keepdims=True))
    z = exp(sub(logits, m))
    return div(z, tsum(z, axis=1, keepdims=True))


def pixel_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Mean negative log-likelihood over non-ignored pixels.

    ``logits`` is (N, K, H, W); ``labels`` an integer (N, H, W) array
    with values in [0, K) or equal to ``ignore_label``. Raises if no
    pixel contributes or a label is out of range.
    """
    if logits.ndim != 4:
        raise ValueError(f"logits must be rank 4, got shape {logits.shape}")
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {(n, h, w)}")
    valid = labels != ignore_label
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("all pixels are ignored; loss is undefined")
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"labels out of range [0, {k}): {np.unique(labels[bad])}")

    # stable log-softmax: the shift by a detached max is a constant
    m = constant(logits.data.max(axis=1, keepdims=True))
    shifted = sub(logits, m)
    lse = log(tsum(exp(shifted), axis=1, keepdims=True))
    logp = sub(shifted, lse)  # (N, K, H, W)

    onehot = np.zeros((n, k, h, w), dtype=logits.data.dtype)
    ni, hi, wi = np.nonzero(valid)
    onehot[ni, labels[ni, hi, wi], hi, wi] = 1.0
    picked = tsum(mul(logp, constant(onehot)))
    loss = mul(neg(picked), 1.0 / n_valid)
    assert_finite(loss.data, "cross-entropy loss")
    return loss


def finite_difference_gradient(
    loss_fn: Callable[[Mapping[str, Tensor]], float],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient oracle for any scalar objective.

    ``loss_fn`` receives a dict of parameter tensors and returns the
    objective value; it may run forward passes, or forward passes plus
    inner gradient steps. Fresh tensors are built per evaluation so the
    callable is free to differentiate through them.
    """

    def evaluate(values: dict[str, np.ndarray]) -> float:
        ps = {k: Tensor(v.copy(), requires_grad=True) for k, v in values.items()}
        out = loss_fn(ps)
        return float(out.data) if isinstance(out, Tensor) else float(out)

    base = {k: np.asarray(p.data, dtype=np.float64) for k, p in params.items()}
    grads: dict[str, np.ndarray] = {}
    for name in base:
        g = np.zeros_like(base[name])
        flat = g.reshape(-1)
        for i in range(flat.size):
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name].reshape(-1)[i] += step
            minus[name].reshape(-1)[i] -= step
            flat[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
        grads[name] = g
    return grads

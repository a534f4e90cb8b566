"""Layer and loss primitives used by the model zoo."""
from __future__ import annotations

from typing import Iterable, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, ParameterError, ProtocolViolation
from .tensor import Tensor, as_tensor, make_result

MaskLike = Union[None, Iterable[int], np.ndarray]


def dense_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x of shape (N, I), w (I, O), b (O,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense_affine: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense_affine: bias {b.shape} incompatible with weight {w.shape}")

    def bw(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return make_result(x.data @ w.data + b.data, (x, w, b), bw)


def conv2d(x: Tensor, k: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation over a zero-padded NCHW input with FCKhKw kernels."""
    x, k = as_tensor(x), as_tensor(k)
    if stride < 1 or pad < 0:
        raise ParameterError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {k.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(f"conv2d: kernel {k.shape} larger than padded input {x.shape} (pad={pad})")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, k.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    inputs = [x, k]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise DimensionError(f"conv2d: bias {bias.shape} does not match {f} filters")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    out = np.ascontiguousarray(out)

    def bw(g):
        dk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, k.data, axes=([1], [0]))  # N, Ho, Wo, C, Kh, Kw
        dxp = np.zeros(xp.shape)
        hs = stride * (ho - 1) + 1
        ws = stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, inputs, bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return make_result(np.where(pos, x.data, 0.0), (x,), bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties go to the first max in row-major order."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_result(out, (x,), bw)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def resolve_mask(mask: MaskLike, n: int, k: int) -> Optional[np.ndarray]:
    """Turn a label collection or an (N, K) boolean array into a row mask."""
    if mask is None:
        return None
    if isinstance(mask, np.ndarray) and mask.dtype == bool:
        if mask.shape == (k,):
            return np.broadcast_to(mask, (n, k))
        if mask.shape != (n, k):
            raise DimensionError(f"mask shape {mask.shape} does not match logits ({n}, {k})")
        return mask
    labels = np.asarray(sorted(set(int(v) for v in mask)), dtype=np.int64)
    if labels.size == 0:
        raise ProtocolViolation("empty label mask")
    if labels[0] < 0 or labels[-1] >= k:
        raise ProtocolViolation(f"mask labels {labels.tolist()} outside logit range [0, {k})")
    row = np.zeros(k, dtype=bool)
    row[labels] = True
    return np.broadcast_to(row, (n, k))


def softmax_xent(logits: Tensor, labels, mask: MaskLike = None) -> Tensor:
    """Mean negative log-likelihood; masked-out logits are excluded from the
    normalisation entirely."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_xent: logits must be 2-D, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"softmax_xent: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ProtocolViolation(f"softmax_xent: label outside logit range [0, {k})")
    m = resolve_mask(mask, n, k)
    rows = np.arange(n)
    z = logits.data
    if m is not None:
        if not np.all(m[rows, labels]):
            bad = labels[~m[rows, labels]]
            raise ProtocolViolation(f"softmax_xent: labels {sorted(set(bad.tolist()))} outside the training mask")
        z = np.where(m, z, -np.inf)
    logp = log_softmax(z)
    loss = -np.mean(logp[rows, labels])

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return make_result(loss, (logits,), bw)


def soft_distill_loss(student_logits: Tensor, teacher_logits, T: float) -> Tensor:
    """``T^2`` times the batch-mean KL(softmax(teacher/T) || softmax(student/T))."""
    if T <= 0:
        raise ParameterError(f"distillation temperature must be positive, got {T}")
    student_logits = as_tensor(student_logits)
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.shape != teacher.shape:
        raise DimensionError(f"soft_distill_loss: student {student_logits.shape} vs teacher {teacher.shape}")
    n = student_logits.shape[0]
    logp = log_softmax(teacher / T)
    logq = log_softmax(student_logits.data / T)
    p = np.exp(logp)
    kl = np.sum(p * (logp - logq), axis=1)
    loss = T * T * np.mean(kl)

    def bw(g):
        q = np.exp(logq)
        return ((q - p) * (float(g) * T / n),)

    return make_result(loss, (student_logits,), bw)


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, eps)

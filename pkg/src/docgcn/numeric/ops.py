"""Differentiable primitives.

Each primitive computes its forward value with numpy and, when a tape is
active and some input requires a gradient, records an adjoint closure that
maps the output cotangent to one cotangent per input (``None`` for inputs
that take no gradient).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import NumericError, Tensor, active_tape, as_tensor

__all__ = [
    "add",
    "mul",
    "neg",
    "matmul",
    "concat",
    "slice_",
    "reshape",
    "transpose",
    "tanh",
    "sigmoid",
    "exp",
    "leaky_relu",
    "masked_softmax",
    "logsumexp",
    "gather",
    "sum_",
    "mean",
    "lstm_scan",
    "crf_log_partition",
]


def _record(out_data, inputs: tuple[Tensor, ...], adjoint) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, adjoint)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def adjoint(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), adjoint)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad * bd, (a, b), adjoint)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``@`` semantics for a 1-D or 2-D right operand,
    or batched operands of equal rank."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad @ bd

    if bd.ndim == 1:

        def adjoint(g):
            ga = g[..., None] * bd if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = g.reshape(-1) @ ad.reshape(-1, bd.shape[0])
            return ga, gb

    elif bd.ndim == 2 and ad.ndim >= 2:

        def adjoint(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k = bd.shape[0]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, bd.shape[1])
            return ga, gb

    elif bd.ndim == 2 and ad.ndim == 1:

        def adjoint(g):
            ga = bd @ g if a.requires_grad else None
            gb = np.outer(ad, g) if b.requires_grad else None
            return ga, gb

    else:

        def adjoint(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            return ga, gb

    return _record(out, (a, b), adjoint)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def adjoint(g):
        grads = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _record(out, ts, adjoint)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic(index)

    def adjoint(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), adjoint)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    try:
        with np.errstate(over="raise"):
            y = np.exp(a.data)
    except FloatingPointError as err:
        raise NumericError("overflow in exp") from err
    return _record(y, (a,), lambda g: (g * y,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    """Elementwise ``max(x, slope * x)`` for ``0 < slope < 1``."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    a = as_tensor(a)
    x = a.data
    if not np.isfinite(x).all():
        raise NumericError("leaky_relu received non-finite input")
    d = np.where(x > 0, 1.0, slope)
    return _record(x * d, (a,), lambda g: (g * d,))


def masked_softmax(logits, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; masked-out positions receive exactly zero.

    ``mask`` is a boolean array broadcastable to ``logits`` (True = keep).
    """
    logits = as_tensor(logits)
    z = logits.data
    if mask is None:
        keep = np.ones(z.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    if not keep.any(axis=axis).all():
        raise ValueError("masked_softmax: every position of some row is masked")
    shifted = np.where(keep, z, -np.inf)
    m = shifted.max(axis=axis, keepdims=True)
    with np.errstate(under="ignore"):
        e = np.where(keep, np.exp(np.where(keep, z - m, 0.0)), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (logits,), adjoint)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    with np.errstate(under="ignore"):
        e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def adjoint(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _record(out, (a,), adjoint)


def gather(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` for an integer index array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    shape = table.shape

    def adjoint(g):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *shape[1:]))
        return (full,)

    return _record(table.data[idx], (table,), adjoint)


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(a.data, axis=axis), (a,), adjoint)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / float(n))


def lstm_scan(xw, mask, w_hh, reverse: bool = False) -> Tensor:
    """Run one LSTM direction over pre-projected inputs.

    ``xw`` is ``(B, T, 4H)`` and already holds ``x @ W_ih + b``; gate order is
    input, forget, output, candidate. ``mask`` is a constant ``(B, T)`` array of
    0/1 with padding at the end of each row. Masked steps carry the previous
    state unchanged, so for the forward direction ``out[:, -1]`` is the state
    after the last real token and for the reverse direction ``out[:, 0]`` is
    the state after the first real token. Returns ``(B, T, H)``.
    """
    xw, w_hh = as_tensor(xw), as_tensor(w_hh)
    z_all, wh = xw.data, w_hh.data
    B, T, H4 = z_all.shape
    H = H4 // 4
    m = np.asarray(mask, dtype=np.float64).reshape(B, T, 1)
    dense = bool(m.all())
    steps = range(T - 1, -1, -1) if reverse else range(T)

    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.empty((B, T, H))
    h_prev = np.empty((B, T, H))
    c_prev = np.empty((B, T, H))
    acts = np.empty((B, T, H4))  # sigmoid(i, f, o) and tanh(g)
    tanh_c = np.empty((B, T, H))
    for t in steps:
        h_prev[:, t] = h
        c_prev[:, t] = c
        z = z_all[:, t] + h @ wh
        a = acts[:, t]
        a[:, : 3 * H] = _sigmoid(z[:, : 3 * H])
        a[:, 3 * H :] = np.tanh(z[:, 3 * H :])
        c_new = a[:, H : 2 * H] * c + a[:, :H] * a[:, 3 * H :]
        tc = np.tanh(c_new)
        tanh_c[:, t] = tc
        h_new = a[:, 2 * H : 3 * H] * tc
        if dense:
            c, h = c_new, h_new
        else:
            mt = m[:, t]
            c = mt * c_new + (1.0 - mt) * c
            h = mt * h_new + (1.0 - mt) * h
        out[:, t] = h

    def adjoint(g_out):
        dz_all = np.empty_like(z_all)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        wh_t = wh.T
        for t in reversed(steps):
            a = acts[:, t]
            i, f, o, g = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
            tc = tanh_c[:, t]
            dh = g_out[:, t] + dh_next
            if dense:
                dh_new, dc_new = dh, dc_next + dh * o * (1.0 - tc * tc)
            else:
                mt = m[:, t]
                dh_new = mt * dh
                dc_new = mt * dc_next + dh_new * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc_new * g * i * (1.0 - i)
            dz[:, H : 2 * H] = dc_new * c_prev[:, t] * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dh_new * tc * o * (1.0 - o)
            dz[:, 3 * H :] = dc_new * i * (1.0 - g * g)
            if dense:
                dh_next = dz @ wh_t
                dc_next = dc_new * f
            else:
                dh_next = (1.0 - mt) * dh + dz @ wh_t
                dc_next = (1.0 - mt) * dc_next + dc_new * f
        dwh = h_prev.reshape(-1, H).T @ dz_all.reshape(-1, H4)
        return dz_all, dwh

    return _record(out, (xw, w_hh), adjoint)


def crf_log_partition(emissions, transitions, start, end, mask) -> Tensor:
    """Linear-chain CRF log-partition per sequence by the forward algorithm.

    ``emissions`` ``(B, T, K)``, ``transitions`` ``(K, K)`` (from, to),
    ``start``/``end`` ``(K,)``; ``mask`` is a constant right-padded ``(B, T)``
    0/1 array whose first column is all ones. Masked steps carry the forward
    scores unchanged. The adjoint replays the recursion in reverse.
    """
    emissions, transitions = as_tensor(emissions), as_tensor(transitions)
    start, end = as_tensor(start), as_tensor(end)
    em, tr = emissions.data, transitions.data
    B, T, K = em.shape
    m = np.asarray(mask, dtype=np.float64).reshape(B, T, 1)
    alpha = start.data + em[:, 0]
    probs = np.empty((T, B, K, K))
    with np.errstate(under="ignore"):
        for t in range(1, T):
            s = alpha[:, :, None] + tr + em[:, t, None, :]
            mx = s.max(axis=1, keepdims=True)
            e = np.exp(s - mx)
            tot = e.sum(axis=1, keepdims=True)
            probs[t] = e / tot
            nxt = (mx + np.log(tot))[:, 0]
            alpha = m[:, t] * nxt + (1.0 - m[:, t]) * alpha
        final = alpha + end.data
        mx = final.max(axis=1, keepdims=True)
        e = np.exp(final - mx)
        tot = e.sum(axis=1, keepdims=True)
    out = (mx + np.log(tot))[:, 0]
    p_final = e / tot

    def adjoint(g):
        d_em = np.zeros_like(em)
        d_tr = np.zeros_like(tr)
        d_alpha = g[:, None] * p_final
        d_end = d_alpha.sum(axis=0)
        for t in range(T - 1, 0, -1):
            mt = m[:, t]
            ds = (mt * d_alpha)[:, None, :] * probs[t]
            d_em[:, t] = ds.sum(axis=1)
            d_tr += ds.sum(axis=0)
            d_alpha = (1.0 - mt) * d_alpha + ds.sum(axis=2)
        d_em[:, 0] = d_alpha
        return d_em, d_tr, d_alpha.sum(axis=0), d_end

    return _record(out, (emissions, transitions, start, end), adjoint)

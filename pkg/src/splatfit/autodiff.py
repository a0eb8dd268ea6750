"""Reverse-mode automatic differentiation on a flat operation tape.

Nodes are recorded at matrix/convolution granularity (not per scalar) so a
full forward pass over a feature grid stays cheap to record. Recording order
is execution order, which is already topological; the backward sweep walks
the list once in reverse, accumulating vector-Jacobian products.

Every op works in two modes: with a Tape (records a node, returns a Var) or
with ``tape=None`` / plain arrays (pure numpy, no recording) so inference
and training share one forward implementation.
"""

import numpy as np


class TapeError(RuntimeError):
    pass


class Var:
    """Handle to a recorded value on a tape."""
    __slots__ = ("tape", "nid", "value")

    def __init__(self, tape, nid, value):
        self.tape = tape
        self.nid = nid
        self.value = value

    @property
    def grad(self):
        return self.tape.grad_of(self)

    def __repr__(self):
        shape = getattr(self.value, "shape", ())
        return f"Var(node={self.nid}, shape={shape})"


class Tape:
    def __init__(self):
        self._parents = []   # per node: tuple of parent node ids
        self._vjps = []      # per node: callable grad_out -> tuple of parent grads
        self._params = {}    # name -> node id
        self._shapes = []    # per node: value shape (for zero grads)
        self._grads = None
        self.visited = 0     # nodes touched by the last backward sweep

    def __len__(self):
        return len(self._parents)

    def _push(self, value, parents, vjp):
        self._parents.append(tuple(parents))
        self._vjps.append(vjp)
        self._shapes.append(np.shape(value))
        return Var(self, len(self._parents) - 1, value)

    def leaf(self, value, name=None):
        """Record an input/parameter node. Named leaves appear in the gradient
        dict returned by backward even when unused (with an exact zero grad)."""
        value = np.asarray(value, dtype=float)
        var = self._push(value, (), None)
        if name is not None:
            if name in self._params:
                raise TapeError(f"duplicate parameter name '{name}'")
            self._params[name] = var.nid
        return var

    def backward(self, loss, seed=1.0):
        """Reverse sweep from ``loss``; returns {name: gradient} for named leaves.

        Visits every recorded node exactly once in reverse topological order.
        A tape supports a single backward pass (no double-backward).
        """
        if len(self._parents) == 0:
            raise TapeError("backward on an empty tape")
        if self._grads is not None:
            raise TapeError("tape already swept; differentiating through a "
                            "backward pass (double-backward) is unsupported")
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("loss is not a Var recorded on this tape")
        if np.shape(loss.value) != ():
            raise TapeError("loss must be a recorded scalar")
        grads = {loss.nid: np.asarray(float(seed))}
        self.visited = 0
        for nid in range(len(self._parents) - 1, -1, -1):
            self.visited += 1
            g = grads.get(nid)
            if g is None or self._vjps[nid] is None:
                continue
            parent_grads = self._vjps[nid](g)
            for pid, pg in zip(self._parents[nid], parent_grads):
                if pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        self._grads = grads
        out = {}
        for name, nid in self._params.items():
            g = grads.get(nid)
            out[name] = np.zeros(self._shapes[nid]) if g is None else np.asarray(g)
        return out

    def grad_of(self, var):
        if self._grads is None:
            raise TapeError("backward has not run on this tape")
        g = self._grads.get(var.nid)
        return np.zeros(self._shapes[var.nid]) if g is None else np.asarray(g)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _record(tape, inputs, value, vjp_full):
    """Record a node if any input is a Var; vjp_full returns one gradient per
    input (position-aligned), None for constants."""
    var_positions = [i for i, x in enumerate(inputs) if isinstance(x, Var)]
    if tape is None or not var_positions:
        return value
    parents = tuple(inputs[i].nid for i in var_positions)

    def vjp(grad_out):
        full = vjp_full(grad_out)
        return tuple(full[i] for i in var_positions)

    return tape._push(value, parents, vjp)


def custom(tape, inputs, value, vjp_full):
    """Record an arbitrary differentiable computation as one node.

    ``vjp_full(grad_out)`` must return one gradient per entry of ``inputs``
    (None for entries that are plain arrays).
    """
    return _record(tape, list(inputs), value, vjp_full)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if np.shape(grad) == tuple(shape):
        return grad
    grad = np.asarray(grad)
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(tape, a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv

    def vjp(g):
        return (_unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv)))

    return _record(tape, [a, b], out, vjp)


def sub(tape, a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv

    def vjp(g):
        return (_unbroadcast(g, np.shape(av)), _unbroadcast(-g, np.shape(bv)))

    return _record(tape, [a, b], out, vjp)


def mul(tape, a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv

    def vjp(g):
        return (_unbroadcast(g * bv, np.shape(av)),
                _unbroadcast(g * av, np.shape(bv)))

    return _record(tape, [a, b], out, vjp)


def scale(tape, a, c):
    av = value_of(a)
    c = float(c)
    return _record(tape, [a], av * c, lambda g: (g * c,))


def matmul(tape, a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv

    def vjp(g):
        return (g @ bv.T, av.T @ g)

    return _record(tape, [a, b], out, vjp)


def relu(tape, x):
    xv = value_of(x)
    out = np.maximum(xv, 0.0)

    def vjp(g):
        return (g * (xv > 0.0),)

    return _record(tape, [x], out, vjp)


def leaky_relu(tape, x, slope=0.2):
    xv = value_of(x)
    out = np.where(xv > 0.0, xv, slope * xv)

    def vjp(g):
        return (g * np.where(xv > 0.0, 1.0, slope),)

    return _record(tape, [x], out, vjp)


def sigmoid(tape, x):
    xv = np.asarray(value_of(x), dtype=float)
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    e = np.exp(xv[~pos])
    out[~pos] = e / (1.0 + e)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record(tape, [x], out, vjp)


def softplus(tape, x):
    xv = np.asarray(value_of(x), dtype=float)
    out = np.log1p(np.exp(-np.abs(xv))) + np.maximum(xv, 0.0)
    sig = np.empty_like(xv)
    pos = xv >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    e = np.exp(xv[~pos])
    sig[~pos] = e / (1.0 + e)

    def vjp(g):
        return (g * sig,)

    return _record(tape, [x], out, vjp)


def concat(tape, parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(tape, list(parts), out, vjp)


def reshape(tape, x, shape):
    xv = value_of(x)
    old = np.shape(xv)

    def vjp(g):
        return (np.reshape(g, old),)

    return _record(tape, [x], np.reshape(xv, shape), vjp)


def transpose(tape, x, axes):
    xv = value_of(x)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _record(tape, [x], np.transpose(xv, axes), vjp)


def sum_all(tape, x):
    xv = value_of(x)

    def vjp(g):
        return (np.broadcast_to(np.asarray(g), np.shape(xv)).copy(),)

    return _record(tape, [x], float(np.sum(xv)), vjp)


def l2_mean(tape, x):
    """Mean of squared entries; the L2 regularizer used by the losses."""
    xv = np.asarray(value_of(x), dtype=float)
    n = xv.size

    def vjp(g):
        return (np.asarray(g) * 2.0 * xv / n,)

    return _record(tape, [x], float(np.mean(xv ** 2)), vjp)


def add_n(tape, parts):
    out = parts[0]
    for p in parts[1:]:
        out = add(tape, out, p)
    return out


# ---------------------------------------------------------------------------
# grid ops (channel-first [C, H, W] layout)
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, ho, wo):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [C, ho, wo, kh, kw]
    return win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * kh * kw, ho * wo)


def conv2d(tape, x, w, b, stride=2, pad=1):
    """2-D convolution. x [Cin, H, W], w [Cout, Cin, kh, kw], b [Cout]."""
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    cin, H, W = xv.shape
    cout, cin_w, kh, kw = wv.shape
    if cin_w != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = (wv.reshape(cout, -1) @ cols).reshape(cout, ho, wo) + bv[:, None, None]

    def vjp(g):
        gm = g.reshape(cout, -1)
        dw = (gm @ cols.T).reshape(wv.shape)
        db = g.sum(axis=(1, 2))
        dcols = (wv.reshape(cout, -1).T @ gm).reshape(cin, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
        return (dx, dw, db)

    return _record(tape, [x, w, b], out, vjp)


def conv_transpose2d(tape, x, w, b, stride=2, pad=1):
    """Transposed 2-D convolution. x [Cin, H, W], w [Cin, Cout, kh, kw], b [Cout].

    With kh=kw=4, stride=2, pad=1 this exactly doubles the spatial resolution.
    """
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    cin, H, W = xv.shape
    cin_w, cout, kh, kw = wv.shape
    if cin_w != cin:
        raise ValueError(f"conv_transpose2d channel mismatch: input {cin}, weight {cin_w}")
    hs = (H - 1) * stride - 2 * pad + kh
    ws = (W - 1) * stride - 2 * pad + kw
    t = np.tensordot(wv, xv, axes=([0], [0]))  # [Cout, kh, kw, H, W]
    ypad = np.zeros((cout, hs + 2 * pad, ws + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            ypad[:, i:i + stride * H:stride, j:j + stride * W:stride] += t[:, i, j]
    out = ypad[:, pad:pad + hs, pad:pad + ws] + bv[:, None, None]

    def vjp(g):
        gpad = np.pad(g, ((0, 0), (pad, pad), (pad, pad)))
        dt = np.empty((cout, kh, kw, H, W))
        for i in range(kh):
            for j in range(kw):
                dt[:, i, j] = gpad[:, i:i + stride * H:stride, j:j + stride * W:stride]
        dw = np.tensordot(xv, dt, axes=([1, 2], [3, 4]))  # [Cin, Cout, kh, kw]
        dx = np.tensordot(wv, dt, axes=([1, 2, 3], [0, 1, 2]))
        db = g.sum(axis=(1, 2))
        return (dx, dw, db)

    return _record(tape, [x, w, b], out, vjp)


def group_norm(tape, x, gamma, beta, groups, eps=1e-5):
    """Group normalization over [C, H, W]; statistics per group of channels."""
    xv, gv, bv = value_of(x), value_of(gamma), value_of(beta)
    C, H, W = xv.shape
    if C % groups:
        raise ValueError(f"channels {C} not divisible by groups {groups}")
    xg = xv.reshape(groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * ivar).reshape(C, H, W)
    out = gv[:, None, None] * xhat + bv[:, None, None]
    n = xg.shape[1]

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(1, 2))
        dbeta = g.sum(axis=(1, 2))
        dxhat = (g * gv[:, None, None]).reshape(groups, -1)
        xh = xhat.reshape(groups, -1)
        # standard normalization backward, per group
        dx = ivar * (dxhat - dxhat.mean(axis=1, keepdims=True)
                     - xh * (dxhat * xh).mean(axis=1, keepdims=True))
        return (dx.reshape(C, H, W), dgamma, dbeta)

    return _record(tape, [x, gamma, beta], out, vjp)


def bilinear_upsample(tape, x, factor):
    """Bilinear upsampling of an [H, W, C] grid by an integer factor
    (half-pixel-center convention, edges clamped)."""
    xv = value_of(x)
    H, W, C = xv.shape
    i0, i1, wi = _bilinear_axis(H, factor)
    j0, j1, wj = _bilinear_axis(W, factor)
    top = (1.0 - wi)[:, None, None] * xv[i0] + wi[:, None, None] * xv[i1]
    out = (1.0 - wj)[None, :, None] * top[:, j0] + wj[None, :, None] * top[:, j1]

    def vjp(g):
        dtop = np.zeros((H * factor, W, C))
        np.add.at(dtop, (slice(None), j0), (1.0 - wj)[None, :, None] * g)
        np.add.at(dtop, (slice(None), j1), wj[None, :, None] * g)
        dx = np.zeros_like(xv)
        np.add.at(dx, i0, (1.0 - wi)[:, None, None] * dtop)
        np.add.at(dx, i1, wi[:, None, None] * dtop)
        return (dx,)

    return _record(tape, [x], out, vjp)


def _bilinear_axis(n, factor):
    """Source indices and weights for one axis of half-pixel bilinear scaling."""
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    w = src - lo
    return lo, hi, w


def gather_bilinear(tape, grid, rows, cols):
    """Sample an [H, W, C] grid at continuous (row, col) locations.

    Equivalent to bilinearly upsampling the grid and reading single pixels;
    gradients flow through the transposed interpolation weights, exactly.
    """
    gv = value_of(grid)
    H, W, C = gv.shape
    r = np.clip(np.asarray(rows, dtype=float), 0.0, H - 1.0)
    c = np.clip(np.asarray(cols, dtype=float), 0.0, W - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    wr = (r - r0)[:, None]
    wc = (c - c0)[:, None]
    out = ((1 - wr) * (1 - wc) * gv[r0, c0] + (1 - wr) * wc * gv[r0, c1]
           + wr * (1 - wc) * gv[r1, c0] + wr * wc * gv[r1, c1])

    def vjp(g):
        dgrid = np.zeros_like(gv)
        np.add.at(dgrid, (r0, c0), (1 - wr) * (1 - wc) * g)
        np.add.at(dgrid, (r0, c1), (1 - wr) * wc * g)
        np.add.at(dgrid, (r1, c0), wr * (1 - wc) * g)
        np.add.at(dgrid, (r1, c1), wr * wc * g)
        return (dgrid,)

    return _record(tape, [grid], out, vjp)

"""Dense linear-algebra kernels with reverse-mode differentiation.

Everything is float64 numpy.  Ops take an optional Tape; with a tape they
append one entry per produced tensor and Tape.backward replays entries in
exact reverse recording order (recording order is a topological order of the
graph, so the reverse sweep is valid).  With tape=None the same ops run
forward-only for inference.

Gradient contract: backward clears the gradients of every tensor the tape
touches, then writes fresh ones.  Calling backward twice without recording a
new forward is an error.  A gradient of None is read as zero.

Backward closures capture the forward-time value arrays, so optimizers must
assign new arrays to ``ParamTensor.data`` rather than mutating in place.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError, TapeError


class Tensor:
    """Graph node: a float64 ndarray plus a gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class ParamTensor(Tensor):
    """Named trainable leaf; frozen params receive gradients but no updates."""

    __slots__ = ("name", "frozen")

    def __init__(self, name, data, frozen=False):
        super().__init__(data)
        self.name = name
        self.frozen = frozen

    def __repr__(self):
        tag = ", frozen" if self.frozen else ""
        return f"ParamTensor({self.name!r}, shape={self.data.shape}{tag})"


class Tape:
    """Ordered record of primitive ops; replayed in reverse by backward."""

    def __init__(self):
        self._entries = []
        self._ids = set()
        self._spent = False

    def __len__(self):
        return len(self._entries)

    def record(self, out, parents, bwd):
        self._entries.append((out, parents, bwd))
        self._ids.add(id(out))
        self._spent = False

    def clear(self):
        """Drop all records and zero every gradient the tape touched."""
        for out, parents, _ in self._entries:
            out.grad = None
            for p in parents:
                p.grad = None
        self._entries = []
        self._ids = set()
        self._spent = False

    def backward(self, loss):
        """Populate grads of every tensor reachable from ``loss``.

        Clears grads of all tensors on the tape first (no accumulation
        across backward calls).
        """
        if not isinstance(loss, Tensor) or loss.data.shape != ():
            shape = getattr(getattr(loss, "data", None), "shape", None)
            raise TapeError(f"backward needs a scalar loss, got shape {shape}")
        if id(loss) not in self._ids:
            raise TapeError("loss tensor was not produced under this tape")
        if self._spent:
            raise TapeError("second backward without a new forward; rebuild the graph")
        for out, parents, _ in self._entries:
            out.grad = None
            for p in parents:
                p.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for out, parents, bwd in reversed(self._entries):
            g = out.grad
            if g is None:
                continue
            for p, gp in zip(parents, bwd(g)):
                if gp is None:
                    continue
                p.grad = gp if p.grad is None else p.grad + gp
        self._spent = True


def backward(tape, loss):
    """Run reverse-mode differentiation of ``loss`` over ``tape``."""
    tape.backward(loss)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b, tape=None):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    if tape is not None:
        ash, bsh = a.data.shape, b.data.shape
        tape.record(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))
    return out


def sub(a, b, tape=None):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    if tape is not None:
        ash, bsh = a.data.shape, b.data.shape
        tape.record(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))
    return out


def mul(a, b, tape=None):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(
            out,
            (a, b),
            lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        )
    return out


def neg(a, tape=None):
    a = as_tensor(a)
    out = Tensor(-a.data)
    if tape is not None:
        tape.record(out, (a,), lambda g: (-g,))
    return out


def scale(a, s, tape=None):
    """Multiply by a python scalar (not a graph node)."""
    a = as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * s,))
    return out


def matmul(a, b, tape=None):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)
    if tape is not None:

        def bwd(g):
            if ad.ndim == 2 and bd.ndim == 2:
                return (g @ bd.T, ad.T @ g)
            if ad.ndim == 2:  # (m,n) @ (n,) -> (m,)
                return (np.outer(g, bd), ad.T @ g)
            if bd.ndim == 2:  # (n,) @ (n,k) -> (k,)
                return (bd @ g, np.outer(ad, g))
            return (g * bd, g * ad)  # dot product

        tape.record(out, (a, b), bwd)
    return out


def transpose(a, tape=None):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.data.shape}")
    out = Tensor(a.data.T)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g.T,))
    return out


def reshape(a, shape, tape=None):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    if tape is not None:
        ash = a.data.shape
        tape.record(out, (a,), lambda g: (g.reshape(ash),))
    return out


def narrow(a, start, stop, tape=None):
    """Slice along axis 0."""
    a = as_tensor(a)
    n = a.data.shape[0]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"narrow [{start}:{stop}] out of bounds for length {n}")
    out = Tensor(a.data[start:stop])
    if tape is not None:
        ash = a.data.shape

        def bwd(g):
            z = np.zeros(ash)
            z[start:stop] = g
            return (z,)

        tape.record(out, (a,), bwd)
    return out


def row(a, i, tape=None):
    """Extract row i of a 2-D tensor as a 1-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"row needs a 2-D tensor, got {a.data.shape}")
    out = Tensor(a.data[i])
    if tape is not None:
        ash = a.data.shape

        def bwd(g):
            z = np.zeros(ash)
            z[i] = g
            return (z,)

        tape.record(out, (a,), bwd)
    return out


def gather_rows(a, idx, tape=None):
    """Row lookup by integer index array (embedding gather)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {a.data.shape}")
    out = Tensor(a.data[idx])
    if tape is not None:
        ash = a.data.shape

        def bwd(g):
            z = np.zeros(ash)
            np.add.at(z, idx, g)
            return (z,)

        tape.record(out, (a,), bwd)
    return out


def concat_rows(parts, tape=None):
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    if tape is not None:
        sizes = [p.data.shape[0] for p in parts]

        def bwd(g):
            offs = np.cumsum(sizes)[:-1]
            return tuple(np.split(g, offs, axis=0))

        tape.record(out, tuple(parts), bwd)
    return out


def stack_rows(parts, tape=None):
    """Stack equal-shape 1-D tensors into a 2-D tensor."""
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.stack([p.data for p in parts], axis=0))
    if tape is not None:
        tape.record(out, tuple(parts), lambda g: tuple(g[i] for i in range(len(parts))))
    return out


def _sigmoid(x):
    # tanh form is overflow-safe for any finite input
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a, tape=None):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = Tensor(s)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * s * (1.0 - s),))
    return out


def tanh(a, tape=None):
    a = as_tensor(a)
    t = np.tanh(a.data)
    out = Tensor(t)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * (1.0 - t * t),))
    return out


def sum_all(a, tape=None):
    a = as_tensor(a)
    out = Tensor(a.data.sum())
    if tape is not None:
        ash = a.data.shape
        tape.record(out, (a,), lambda g: (np.full(ash, float(g)),))
    return out


def mean_all(a, tape=None):
    a = as_tensor(a)
    n = a.data.size
    out = Tensor(a.data.mean())
    if tape is not None:
        ash = a.data.shape
        tape.record(out, (a,), lambda g: (np.full(ash, float(g) / n),))
    return out


def softmax(z, tape=None, axis=-1):
    """Probability vector along ``axis``; max-subtracted for stability."""
    z = as_tensor(z)
    if z.data.size == 0:
        raise ShapeError("softmax of an empty tensor")
    if not np.isfinite(z.data).all():
        raise ShapeError("softmax requires finite inputs")
    m = z.data.max(axis=axis, keepdims=True)
    e = np.exp(z.data - m)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)
    if tape is not None:

        def bwd(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            return (s * (g - dot),)

        tape.record(out, (z,), bwd)
    return out


def log_softmax(z, tape=None, axis=-1):
    z = as_tensor(z)
    if not np.isfinite(z.data).all():
        raise ShapeError("log_softmax requires finite inputs")
    m = z.data.max(axis=axis, keepdims=True)
    shifted = z.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    if tape is not None:
        sm = np.exp(out.data)

        def bwd(g):
            return (g - sm * g.sum(axis=axis, keepdims=True),)

        tape.record(out, (z,), bwd)
    return out


def masked_softmax(z, active, tape=None):
    """Softmax over the rows/entries where ``active`` is True; exact 0 elsewhere.

    ``z`` is (N,) or (T, N); ``active`` is a boolean (N,) mask applied to the
    last axis.  At least one entry must be active.
    """
    z = as_tensor(z)
    active = np.asarray(active, dtype=bool)
    if z.data.shape[-1] != active.shape[0]:
        raise ShapeError(
            f"mask length {active.shape[0]} does not match scores {z.data.shape}"
        )
    if not active.any():
        raise ShapeError("masked_softmax with no active entries")
    idx = np.flatnonzero(active)
    zz = z.data[..., idx]
    m = zz.max(axis=-1, keepdims=True)
    e = np.exp(zz - m)
    s_act = e / e.sum(axis=-1, keepdims=True)
    s = np.zeros_like(z.data)
    s[..., idx] = s_act
    out = Tensor(s)
    if tape is not None:

        def bwd(g):
            ga = g[..., idx]
            dot = (ga * s_act).sum(axis=-1, keepdims=True)
            gz = np.zeros_like(z.data)
            gz[..., idx] = s_act * (ga - dot)
            return (gz,)

        tape.record(out, (z,), bwd)
    return out


def dense_forward(x, w, b=None, tape=None):
    """Affine map ``out = x @ w.T + b`` with weight ``w`` of shape (out, in).

    ``x`` may be a single vector or a matrix of row vectors.
    """
    x = as_tensor(x)
    wd = w.data
    if wd.ndim != 2:
        raise ShapeError(f"dense_forward: weight must be 2-D, got {wd.shape}")
    if x.data.ndim not in (1, 2) or x.data.shape[-1] != wd.shape[1]:
        raise ShapeError(
            f"dense_forward: weight {wd.shape} incompatible with input {x.data.shape}"
        )
    if b is not None and b.data.shape != (wd.shape[0],):
        raise ShapeError(
            f"dense_forward: bias {b.data.shape} incompatible with weight {wd.shape}"
        )
    y = x.data @ wd.T
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    if tape is not None:
        xd = x.data

        def bwd(g):
            if xd.ndim == 1:
                gw = np.outer(g, xd)
                gx = wd.T @ g
                gb = g
            else:
                gw = g.T @ xd
                gx = g @ wd
                gb = g.sum(axis=0)
            return (gx, gw, gb) if b is not None else (gx, gw)

        tape.record(out, (x, w, b) if b is not None else (x, w), bwd)
    return out


class LstmParams:
    """Weights of one LSTM cell; gate order i, f, g, o along rows."""

    __slots__ = ("wx", "wh", "b")

    def __init__(self, wx, wh, b):
        self.wx = wx
        self.wh = wh
        self.b = b

    @property
    def units(self):
        return self.wh.data.shape[1]

    @property
    def input_dim(self):
        return self.wx.data.shape[1]


class BiLstmParams:
    __slots__ = ("fw", "bw")

    def __init__(self, fw, bw):
        self.fw = fw
        self.bw = bw

    @property
    def units(self):
        return self.fw.units


def init_param(name, shape, seed, fan_in=None, zero=False, registry=None):
    """Seeded uniform(-r, r) init with r = 1/sqrt(fan_in); zero for biases.

    The seed stream is keyed on (seed, name), so init is independent of
    creation order.
    """
    if zero:
        data = np.zeros(shape)
    else:
        fan = fan_in if fan_in is not None else shape[-1]
        r = 1.0 / math.sqrt(fan)
        ss = np.random.SeedSequence([seed & 0xFFFFFFFF] + list(name.encode()))
        data = np.random.default_rng(ss).uniform(-r, r, size=shape)
    p = ParamTensor(name, data)
    if registry is not None:
        registry[p.name] = p
    return p


def make_lstm(name, input_dim, units, seed, registry=None):
    wx = init_param(f"{name}.wx", (4 * units, input_dim), seed, registry=registry)
    wh = init_param(f"{name}.wh", (4 * units, units), seed, registry=registry)
    b = init_param(f"{name}.b", (4 * units,), seed, zero=True, registry=registry)
    return LstmParams(wx, wh, b)


def lstm_step(x, state, params, tape=None):
    """One LSTM cell update; returns (h', c') with |h'| <= 1 elementwise."""
    u = params.units
    x = as_tensor(x)
    if x.data.shape != (params.input_dim,):
        raise ShapeError(
            f"lstm_step: input {x.data.shape}, cell expects ({params.input_dim},)"
        )
    if state is None:
        h = Tensor(np.zeros(u))
        c = Tensor(np.zeros(u))
    else:
        h, c = state
        if h.data.shape != (u,) or c.data.shape != (u,):
            raise ShapeError(
                f"lstm_step: state shapes {h.data.shape}/{c.data.shape}, cell has {u} units"
            )
    wx, wh, b = params.wx, params.wh, params.b
    xd, hd, cd = x.data, h.data, c.data
    wxd, whd = wx.data, wh.data
    z = wxd @ xd + whd @ hd + b.data
    i = _sigmoid(z[:u])
    f = _sigmoid(z[u : 2 * u])
    gg = np.tanh(z[2 * u : 3 * u])
    o = _sigmoid(z[3 * u :])
    c_new = f * cd + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    cn = Tensor(c_new)
    hn = Tensor(h_new)
    if tape is not None:
        # Fused backward in two entries: h' is recorded after c', so the
        # reverse sweep feeds h's contribution into c'.grad before c' runs.
        def bwd_c(gc):
            di = gc * gg * i * (1.0 - i)
            df = gc * cd * f * (1.0 - f)
            dg = gc * i * (1.0 - gg * gg)
            dz = np.concatenate([di, df, dg])
            w3x, w3h = wxd[: 3 * u], whd[: 3 * u]
            gx = w3x.T @ dz
            gh = w3h.T @ dz
            gwx = np.zeros_like(wxd)
            gwx[: 3 * u] = np.outer(dz, xd)
            gwh = np.zeros_like(whd)
            gwh[: 3 * u] = np.outer(dz, hd)
            gb = np.concatenate([dz, np.zeros(u)])
            return (gx, gh, gc * f, gwx, gwh, gb)

        tape.record(cn, (x, h, c, wx, wh, b), bwd_c)

        def bwd_h(gh_):
            do = gh_ * tc * o * (1.0 - o)
            gcn = gh_ * o * (1.0 - tc * tc)
            wox, woh = wxd[3 * u :], whd[3 * u :]
            gx = wox.T @ do
            ghp = woh.T @ do
            gwx = np.zeros_like(wxd)
            gwx[3 * u :] = np.outer(do, xd)
            gwh = np.zeros_like(whd)
            gwh[3 * u :] = np.outer(do, hd)
            gb = np.concatenate([np.zeros(3 * u), do])
            return (gcn, gx, ghp, gwx, gwh, gb)

        tape.record(hn, (cn, x, h, wx, wh, b), bwd_h)
    return hn, cn


def lstm_run(seq, params, tape=None, reverse=False):
    """Run an LSTM over the rows of ``seq``; returns hidden states (T, u).

    Numerically identical to folding lstm_step over the rows, but recorded as
    one fused tape entry whose backward does truncated-free BPTT with batched
    weight-gradient GEMMs.  With reverse=True the recurrence runs
    right-to-left and states stay aligned to the original row positions.
    """
    seq = as_tensor(seq)
    if seq.data.ndim != 2 or seq.data.shape[0] < 1:
        raise ShapeError(f"lstm_run needs a nonempty (T, d) sequence, got {seq.data.shape}")
    if seq.data.shape[1] != params.input_dim:
        raise ShapeError(
            f"lstm_run: input dim {seq.data.shape[1]}, cell expects {params.input_dim}"
        )
    wx, wh, b = params.wx, params.wh, params.b
    wxd, whd, bd = wx.data, wh.data, b.data
    u = params.units
    t_count = seq.data.shape[0]
    order = (
        list(range(t_count - 1, -1, -1)) if reverse else list(range(t_count))
    )
    x_ord = seq.data[order]
    gi = np.empty((t_count, u))
    gf = np.empty((t_count, u))
    gg = np.empty((t_count, u))
    go = np.empty((t_count, u))
    tc = np.empty((t_count, u))
    c_prev = np.empty((t_count, u))
    h_prev = np.empty((t_count, u))
    out = np.empty((t_count, u))
    h = np.zeros(u)
    c = np.zeros(u)
    for s in range(t_count):
        z = wxd @ x_ord[s] + whd @ h + bd
        i = _sigmoid(z[:u])
        f = _sigmoid(z[u : 2 * u])
        g_ = np.tanh(z[2 * u : 3 * u])
        o = _sigmoid(z[3 * u :])
        c_prev[s] = c
        h_prev[s] = h
        c = f * c + i * g_
        t = np.tanh(c)
        h = o * t
        gi[s], gf[s], gg[s], go[s], tc[s] = i, f, g_, o, t
        out[order[s]] = h
    result = Tensor(out)
    if tape is not None:

        def bwd(g):
            # gate-derivative factors are recursion-free; hoist them
            k_o = tc * go * (1.0 - go)
            k_c = go * (1.0 - tc * tc)
            k_i = gg * gi * (1.0 - gi)
            k_f = c_prev * gf * (1.0 - gf)
            k_g = gi * (1.0 - gg * gg)
            g_ord = g[order]
            dz = np.empty((t_count, 4 * u))
            dh = np.zeros(u)
            dc = np.zeros(u)
            for s in range(t_count - 1, -1, -1):
                dh = dh + g_ord[s]
                dc = dc + dh * k_c[s]
                dz[s, :u] = dc * k_i[s]
                dz[s, u : 2 * u] = dc * k_f[s]
                dz[s, 2 * u : 3 * u] = dc * k_g[s]
                dz[s, 3 * u :] = dh * k_o[s]
                dh = whd.T @ dz[s]
                dc = dc * gf[s]
            gseq = np.empty_like(seq.data)
            gseq[order] = dz @ wxd
            return (gseq, dz.T @ x_ord, dz.T @ h_prev, dz.sum(axis=0))

        tape.record(result, (seq, wx, wh, b), bwd)
    return result


def bilstm_forward(seq, params, tape=None):
    """Bidirectional LSTM pass; returns (forward_states, backward_states)."""
    seq = as_tensor(seq)
    if seq.data.ndim != 2 or seq.data.shape[0] < 1:
        raise ShapeError(f"bilstm_forward needs a nonempty sequence, got {seq.data.shape}")
    fwd = lstm_run(seq, params.fw, tape)
    bwd_states = lstm_run(seq, params.bw, tape, reverse=True)
    return fwd, bwd_states

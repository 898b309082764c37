"""Recurrent state-transition cells.

Every step function accepts a hidden state of shape ``(D_h,)`` or a batch of
shape ``(B, D_h)`` (inputs likewise), and parameter containers whose fields
are numpy arrays or :class:`~eirehn.ndcore.Tensor` leaves.  Matrices keep the
``W [h; x; 1]`` layout: a weight acting on the augmented vector has shape
``(out, D_h + D_x + 1)`` with the bias in the last column.

Cells provided:

* ``rnn``    plain tanh RNN
* ``lstm``   LSTM with row blocks ordered (proposal, input, forget, output)
* ``rhn``    fixed-depth highway cell, per-layer weights, independent carry gate
* ``srhn``   highway cell sharing one weight set across depth, coupled gate
* ``srehn``  ``srhn`` whose gate is scaled by the elastic gate, adaptive depth
* ``eirehn`` ``srehn`` plus hypernetwork-generated diagonal weight updates
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import ndcore as nd
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .ndcore import Tensor

CELL_KINDS = ("rnn", "lstm", "rhn", "srhn", "srehn", "eirehn")


# -- parameter containers ----------------------------------------------------


@dataclass
class RnnParams:
    W_R: Any


@dataclass
class LstmParams:
    W_L: Any


@dataclass
class RhnParams:
    """``W_H[0]`` sees ``[h; x; 1]``; deeper layers see ``[h; 1]`` only."""

    W_H: list


@dataclass
class ElasticGateParams:
    alpha_hat: Any
    beta_hat: Any
    W_a: Any


@dataclass
class HyperParams:
    W_zh: Any
    W_zg: Any
    W_z: Any
    b_z: Any
    P_s: Any
    P_g: Any
    Pbar_s: Any
    Pbar_g: Any
    bbar_s: Any
    bbar_g: Any


@dataclass
class SrhnParams:
    W_xs: Any
    W_xg: Any
    W_s: Any
    W_g: Any
    b_s: Any
    b_g: Any
    depth: int = field(default=1, metadata={"static": True})


@dataclass
class SrehnParams:
    W_xs: Any
    W_xg: Any
    W_s: Any
    W_g: Any
    b_s: Any
    b_g: Any
    gate: ElasticGateParams
    R_max: int = field(default=10, metadata={"static": True})


@dataclass
class EirehnParams:
    W_xs: Any
    W_xg: Any
    W_s: Any
    W_g: Any
    b_s: Any
    b_g: Any
    gate: ElasticGateParams
    hyper: HyperParams
    R_max: int = field(default=10, metadata={"static": True})


@dataclass
class StepTrace:
    """Diagnostics of one adaptive-depth step.

    ``realized_depth`` is an int for unbatched input, an int array ``(B,)``
    otherwise.  ``gates``, ``elastic`` and ``hyper_states`` hold one array per
    evaluated layer ``r = 1, 2, ...``; the layer after the last executed one is
    included when it was evaluated (that is, whenever some sample halted on a
    zero gate before ``R_max``).  Gate arrays are raw, before the per-sample
    halting mask.
    """

    realized_depth: Any
    R_max: int
    gates: list = field(default_factory=list)
    elastic: list = field(default_factory=list)
    hyper_states: list = field(default_factory=list)


def _is_tensorlike(v):
    return isinstance(v, (np.ndarray, Tensor))


def named_tensors(params, prefix=""):
    """Yield ``(dotted name, value)`` for every array/tensor field, recursively."""
    if dataclasses.is_dataclass(params):
        for f in dataclasses.fields(params):
            yield from named_tensors(getattr(params, f.name), f"{prefix}{f.name}.")
    elif isinstance(params, (list, tuple)):
        for i, v in enumerate(params):
            yield from named_tensors(v, f"{prefix}{i}.")
    elif _is_tensorlike(params):
        yield prefix[:-1], params


def map_tensors(params, fn, prefix=""):
    """Rebuild ``params`` with ``fn(name, value)`` applied to every tensor field."""
    if dataclasses.is_dataclass(params):
        return dataclasses.replace(
            params,
            **{
                f.name: map_tensors(getattr(params, f.name), fn, f"{prefix}{f.name}.")
                for f in dataclasses.fields(params)
            },
        )
    if isinstance(params, (list, tuple)):
        return type(params)(map_tensors(v, fn, f"{prefix}{i}.") for i, v in enumerate(params))
    if _is_tensorlike(params):
        return fn(prefix[:-1], params)
    return params


def flatten(params, prefix=""):
    return {prefix + k: (v.value if isinstance(v, Tensor) else v) for k, v in named_tensors(params)}


def unflatten(template, flat, prefix=""):
    """Fill ``template``'s structure with values from the flat dict ``flat``."""
    return map_tensors(template, lambda name, _: flat[prefix + name])


def count_parameters(params):
    """Number of learnable scalars (all tensor fields, biases and gate scalars included)."""
    return int(sum(np.size(v.value if isinstance(v, Tensor) else v) for _, v in named_tensors(params)))


# -- shared helpers ------------------------------------------------------------


def _aug(h, x):
    h = nd.as_tensor(h)
    ones = np.ones(h.shape[:-1] + (1,))
    return nd.concat([h, x, ones], axis=-1)


def _check_state(h_prev, x, D_h, D_x):
    hs, xs = nd.as_tensor(h_prev).shape, nd.as_tensor(x).shape
    if hs[-1:] != (D_h,) or xs[-1:] != (D_x,) or hs[:-1] != xs[:-1] or len(hs) > 2:
        raise ShapeError(f"state shape {hs} / input shape {xs} do not match D_h={D_h}, D_x={D_x}")


def _value(v):
    return v.value if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


# -- baseline cells ----------------------------------------------------------------


def rnn_step(p, h_prev, x):
    """``tanh(W_R [h; x; 1])``."""
    D_h = _value(p.W_R).shape[0]
    _check_state(h_prev, x, D_h, _value(p.W_R).shape[1] - D_h - 1)
    return nd.tanh(nd.linear(_aug(h_prev, x), p.W_R))


def lstm_step(p, h_prev, c_prev, x):
    D4 = _value(p.W_L).shape[0]
    D = D4 // 4
    _check_state(h_prev, x, D, _value(p.W_L).shape[1] - D - 1)
    pre = nd.linear(_aug(h_prev, x), p.W_L)
    a = nd.tanh(pre[..., 0:D])
    i = nd.sigm(pre[..., D:2 * D])
    f = nd.sigm(pre[..., 2 * D:3 * D])
    o = nd.sigm(pre[..., 3 * D:])
    c = f * c_prev + i * a
    return o * nd.tanh(c), c


def rhn_step(p, h_prev, x):
    """Fixed-depth highway transition; the input enters only the first layer."""
    if not p.W_H:
        raise ShapeError("RHN needs at least one layer")
    D = _value(p.W_H[0]).shape[0] // 3
    _check_state(h_prev, x, D, _value(p.W_H[0]).shape[1] - D - 1)
    h = nd.as_tensor(h_prev)
    ones = np.ones(h.shape[:-1] + (1,))
    for r, W in enumerate(p.W_H, start=1):
        inp = _aug(h, x) if r == 1 else nd.concat([h, ones], axis=-1)
        pre = nd.linear(inp, W)
        s = nd.tanh(pre[..., 0:D])
        t = nd.sigm(pre[..., D:2 * D])
        c = nd.sigm(pre[..., 2 * D:])
        h = t * s + c * h
    return h


# -- elastic gate --------------------------------------------------------------------


def _gate_terms(gp, h_prev, x):
    """Per-timestep constants of the elastic gate: ``beta + e^alpha`` and ``alpha + alpha_t``."""
    alpha = nd.softplus(gp.alpha_hat)
    beta = nd.sigm(gp.beta_hat)
    alpha_t = nd.sigm(nd.linear(_aug(h_prev, x), gp.W_a))
    return beta + nd.exp(alpha), alpha + alpha_t


def _gate_at(ceiling, rate, r):
    return nd.max0(ceiling - nd.exp(rate * float(r)))


def elastic_gate(gp, h_prev, x, r):
    """``max(beta + e^alpha - e^((alpha + alpha_t) r), 0)`` for layer ``r >= 1``."""
    if r < 1:
        raise ValueError("layer index r must be >= 1")
    ceiling, rate = _gate_terms(gp, h_prev, x)
    return _gate_at(ceiling, rate, r)


def depth_upper_bound(gp):
    """Global bound on the realized depth implied by ``alpha_hat`` and ``beta_hat``.

    ``max_i floor(log(beta_i + e^alpha_i) / alpha_i)``.  A relative slack of
    1e-12 before flooring keeps exact-integer quotients from rounding down;
    overstating a bound by one at an exact integer is harmless.
    """
    a_hat, b_hat = _value(gp.alpha_hat), _value(gp.beta_hat)
    alpha = np.logaddexp(0.0, a_hat)
    beta = nd.sigm(b_hat).value
    q = np.log(beta + np.exp(alpha)) / alpha
    return int(np.max(np.floor(q * (1.0 + 1e-12))))


# -- hypernetwork -------------------------------------------------------------------


def hyper_step(hp, s_prev, g_prev, z_prev):
    """One hypernetwork update.

    Returns ``(z, w_s, w_g, gbar_s, gbar_g)``.  ``None`` for any of the three
    inputs stands for a zero vector (the state before the first layer).
    """
    pre = hp.b_z
    if s_prev is not None:
        pre = nd.linear(s_prev, hp.W_zh) + pre
    if g_prev is not None:
        pre = nd.linear(g_prev, hp.W_zg) + pre
    if z_prev is not None:
        pre = nd.linear(z_prev, hp.W_z) + pre
    z = nd.tanh(pre)
    w_s = nd.linear(z, hp.P_s)
    w_g = nd.linear(z, hp.P_g)
    gbar_s = nd.sigm(nd.linear(z, hp.Pbar_s) + hp.bbar_s)
    gbar_g = nd.sigm(nd.linear(z, hp.Pbar_g) + hp.bbar_g)
    return z, w_s, w_g, gbar_s, gbar_g


def _stream(ep, stream):
    if stream == "s":
        return ep.W_s, ep.W_xs, ep.b_s, nd.tanh
    if stream == "g":
        return ep.W_g, ep.W_xg, ep.b_g, nd.sigm
    raise ValueError(f"stream must be 's' or 'g', got {stream!r}")


def _residual(W, b, act, h_in, x_term, dyn=None):
    # the dynamic term is added last so a zero contribution is bit-neutral
    pre = nd.linear(h_in, W) + b
    if x_term is not None:
        pre = pre + x_term
    if dyn is not None:
        pre = pre + dyn
    return act(pre)


def gated_residual(ep, stream, W_accum, w_new, gbar, h_in, x, r):
    """Residual component (``stream='s'``) or residual gating (``'g'``) at layer ``r``.

    The pre-activation is ``W h + gbar*(A*h) + (1-gbar)*(w*h) + [r==1] W_x x + b``
    where ``W`` is the dense base matrix, ``A`` the accumulated diagonal
    deltas of earlier layers (``W_accum``) and ``w`` this layer's delta.
    Returns ``(value, A + w)``; ``W_accum=None`` means no accumulation yet.
    """
    W, W_x, b, act = _stream(ep, stream)
    x_term = nd.linear(x, W_x) if r == 1 else None
    acc = w_new if W_accum is None else W_accum + w_new
    return _residual(W, b, act, h_in, x_term, _dynamic(W_accum, w_new, gbar, h_in)), acc


# -- adaptive-depth cells -------------------------------------------------------------


def _batch_norm1(g):
    return np.abs(g).sum(axis=-1) > 0.0


def _adaptive_loop(ep, h_prev, x, layer, t=None):
    """Shared halting loop of SREHN and EI-REHN.

    ``layer(r, h, carry) -> (s, ghat, carry, z)`` computes layer ``r``'s
    residual component and residual gating.  Samples halt individually on the
    first layer whose gate is all zero; halted samples are masked out of later
    layers so the batched result equals per-sample evaluation.
    """
    h = nd.as_tensor(h_prev)
    ceiling, rate = _gate_terms(ep.gate, h_prev, x)
    batch_shape = h.shape[:-1]
    active = np.ones(batch_shape, dtype=bool)
    depth = np.zeros(batch_shape, dtype=np.int64)
    trace = StepTrace(realized_depth=None, R_max=ep.R_max)
    carry = None
    for r in range(1, ep.R_max + 1):
        s, ghat, carry, z = layer(r, h, carry)
        d = _gate_at(ceiling, rate, r)
        g = d * ghat
        trace.gates.append(g.value)
        trace.elastic.append(d.value)
        if z is not None:
            trace.hyper_states.append(z.value)
        live = _batch_norm1(g.value) & active
        if not live.any():
            break
        if not live.all():
            g = g * np.broadcast_to(live[..., None], g.shape).astype(np.float64)
        active = live
        depth[live] = r
        h = h + g * (s - h)
        if not np.all(np.isfinite(h.value)):
            raise NumericalError(f"non-finite hidden state at t={t}, r={r}", (t, r))
    trace.realized_depth = int(depth) if depth.ndim == 0 else depth
    return h, trace


def srhn_step(p, h_prev, x):
    """Fixed-depth highway update with one shared weight set and coupled gate."""
    D = _value(p.W_s).shape[0]
    _check_state(h_prev, x, D, _value(p.W_xs).shape[1])
    h = nd.as_tensor(h_prev)
    xs, xg = nd.linear(x, p.W_xs), nd.linear(x, p.W_xg)
    for r in range(1, p.depth + 1):
        s = _residual(p.W_s, p.b_s, nd.tanh, h, xs if r == 1 else None)
        g = _residual(p.W_g, p.b_g, nd.sigm, h, xg if r == 1 else None)
        h = h + g * (s - h)
    return h


def srehn_step(p, h_prev, x, t=None):
    """Shared-weight highway cell with elastic gating; returns ``(h, trace)``."""
    D = _value(p.W_s).shape[0]
    _check_state(h_prev, x, D, _value(p.W_xs).shape[1])
    xs, xg = nd.linear(x, p.W_xs), nd.linear(x, p.W_xg)

    def layer(r, h, carry):
        s = _residual(p.W_s, p.b_s, nd.tanh, h, xs if r == 1 else None)
        ghat = _residual(p.W_g, p.b_g, nd.sigm, h, xg if r == 1 else None)
        return s, ghat, None, None

    return _adaptive_loop(p, h_prev, x, layer, t)


def eirehn_step(ep, h_prev, x, t=None):
    """One EI-REHN timestep with adaptive depth; returns ``(h, trace)``.

    Per timestep the hypernetwork state, its inputs and both diagonal
    accumulators start at zero, and the local decreasing rate is computed once
    from ``(h_prev, x)``.
    """
    D = _value(ep.W_s).shape[0]
    _check_state(h_prev, x, D, _value(ep.W_xs).shape[1])
    xs, xg = nd.linear(x, ep.W_xs), nd.linear(x, ep.W_xg)
    hp = ep.hyper

    def layer(r, h, carry):
        s_prev, g_prev, z_prev, acc_s, acc_g = carry or (None, None, None, None, None)
        z, w_s, w_g, gbar_s, gbar_g = hyper_step(hp, s_prev, g_prev, z_prev)
        s = _residual(ep.W_s, ep.b_s, nd.tanh, h, xs if r == 1 else None,
                      _dynamic(acc_s, w_s, gbar_s, h))
        ghat = _residual(ep.W_g, ep.b_g, nd.sigm, h, xg if r == 1 else None,
                         _dynamic(acc_g, w_g, gbar_g, h))
        acc_s = w_s if acc_s is None else acc_s + w_s
        acc_g = w_g if acc_g is None else acc_g + w_g
        return s, ghat, (s, ghat, z, acc_s, acc_g), z

    return _adaptive_loop(ep, h_prev, x, layer, t)


def _dynamic(acc, w_new, gbar, h):
    if acc is None:
        return ((1.0 - gbar) * w_new) * h
    return (w_new + gbar * (acc - w_new)) * h


# -- cell objects ---------------------------------------------------------------------


@dataclass
class Cell:
    """A cell kind with fixed dimensions.

    ``depth`` is the fixed depth of ``rhn``/``srhn``; ``R_max`` the depth cap
    of ``srehn``/``eirehn``.  ``D_z`` defaults to ``ceil(D_h / 2)``.
    """

    kind: str
    D_h: int
    D_x: int
    depth: int = 1
    R_max: int = 10
    D_z: int | None = None
    # alpha_hat = 0 makes every gate zero at r = 1 (dead units get no gradient);
    # these defaults start with live gates and a depth bound of 5
    alpha_hat_init: float = -2.0
    beta_hat_init: float = 2.0
    gate_bias_init: float = -4.0

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind {self.kind!r}; expected one of {CELL_KINDS}")
        if self.D_h < 1 or self.D_x < 1 or self.depth < 1 or self.R_max < 1:
            raise ConfigError("dimensions, depth and R_max must be positive")
        if self.D_z is None:
            self.D_z = math.ceil(self.D_h / 2)
        if self.D_z < 1:
            raise ConfigError("D_z must be positive")

    @property
    def adaptive(self):
        return self.kind in ("srehn", "eirehn")

    def init(self, rng):
        """Fresh parameters: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        D, X, Z = self.D_h, self.D_x, self.D_z
        aug = D + X + 1

        def u(shape, fan):
            s = 1.0 / math.sqrt(fan)
            return rng.uniform(-s, s, size=shape)

        if self.kind == "rnn":
            return RnnParams(W_R=u((D, aug), aug))
        if self.kind == "lstm":
            return LstmParams(W_L=u((4 * D, aug), aug))
        if self.kind == "rhn":
            layers = [u((3 * D, aug), aug)] + [u((3 * D, D + 1), D + 1) for _ in range(self.depth - 1)]
            return RhnParams(W_H=layers)
        shared = dict(
            W_xs=u((D, X), aug), W_xg=u((D, X), aug),
            W_s=u((D, D), aug), W_g=u((D, D), aug),
            b_s=np.zeros(D), b_g=np.zeros(D),
        )
        if self.kind == "srhn":
            return SrhnParams(**shared, depth=self.depth)
        gate = ElasticGateParams(
            alpha_hat=np.full(D, self.alpha_hat_init),
            beta_hat=np.full(D, self.beta_hat_init),
            W_a=np.concatenate([u((D, D + X), aug), np.full((D, 1), self.gate_bias_init)], axis=1),
        )
        if self.kind == "srehn":
            return SrehnParams(**shared, gate=gate, R_max=self.R_max)
        zfan = 2 * D + Z + 1
        hyper = HyperParams(
            W_zh=u((Z, D), zfan), W_zg=u((Z, D), zfan), W_z=u((Z, Z), zfan), b_z=np.zeros(Z),
            P_s=u((D, Z), Z), P_g=u((D, Z), Z),
            Pbar_s=u((D, Z), Z), Pbar_g=u((D, Z), Z),
            bbar_s=np.zeros(D), bbar_g=np.zeros(D),
        )
        return EirehnParams(**shared, gate=gate, hyper=hyper, R_max=self.R_max)

    def initial_state(self, batch_shape=()):
        h = np.zeros(tuple(batch_shape) + (self.D_h,))
        return (h, h.copy()) if self.kind == "lstm" else (h,)

    def step(self, params, state, x, t=None):
        """Advance one timestep: ``(state, x) -> (state', h, trace or None)``."""
        k = self.kind
        if k == "rnn":
            h = rnn_step(params, state[0], x)
        elif k == "lstm":
            h, c = lstm_step(params, state[0], state[1], x)
            return (h, c), h, None
        elif k == "rhn":
            h = rhn_step(params, state[0], x)
        elif k == "srhn":
            h = srhn_step(params, state[0], x)
        elif k == "srehn":
            h, trace = srehn_step(params, state[0], x, t)
            return (h,), h, trace
        else:
            h, trace = eirehn_step(params, state[0], x, t)
            return (h,), h, trace
        return (h,), h, None

    def describe(self):
        return dataclasses.asdict(self)


def _time_steps(xs):
    if isinstance(xs, np.ndarray):
        return [xs[t] for t in range(xs.shape[0])]
    if isinstance(xs, Tensor):
        return [xs[t] for t in range(xs.shape[0])]
    return list(xs)


def unroll(cell, params, xs, state0=None):
    """Thread a cell's state through a time-major input sequence.

    ``xs`` is a sequence (or time-major array) of inputs ``(D_x,)`` or
    ``(B, D_x)``.  Returns ``(hs, traces)``; ``traces`` holds ``None`` entries
    for fixed-depth cells.
    """
    steps = _time_steps(xs)
    if not steps:
        raise ShapeError("cannot unroll an empty sequence")
    state = state0 if state0 is not None else cell.initial_state(nd.as_tensor(steps[0]).shape[:-1])
    hs, traces = [], []
    for t, x in enumerate(steps):
        state, h, trace = cell.step(params, state, x, t)
        hs.append(h)
        traces.append(trace)
    return hs, traces


def unroll_stack(layers, xs):
    """Unroll stacked layers; layer ``l`` consumes layer ``l-1``'s hidden sequence.

    ``layers`` is a list of ``(cell, params)``.  Returns the top layer's hidden
    sequence and the per-layer trace lists.
    """
    if not layers:
        raise ConfigError("need at least one layer")
    seq, all_traces = xs, []
    for cell, params in layers:
        seq, traces = unroll(cell, params, seq)
        all_traces.append(traces)
    return seq, all_traces


# -- serialization ---------------------------------------------------------------------

META_KEY = "__meta__"


def save_checkpoint(path, flat, meta=None):
    """Write ``{name: array}`` to an ``.npz`` archive.

    Layout: one float64 row-major array per dotted parameter name, plus an
    optional ``__meta__`` entry holding a JSON document.  Round trips are
    bit-exact.
    """
    arrays = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in flat.items()}
    if META_KEY in arrays:
        raise ConfigError(f"{META_KEY} is reserved")
    if meta is not None:
        arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(flat, meta)``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            flat = {k: z[k] for k in z.files if k != META_KEY}
            meta = json.loads(str(z[META_KEY])) if META_KEY in z.files else None
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return flat, meta

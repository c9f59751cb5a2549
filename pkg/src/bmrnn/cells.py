"""Single-timestep forward and gradient computation for the recurrent cells.

Two cells live here. The baseline gated recurrent cell:

    z_t = sigmoid(W_zx x_t + W_zh h_prev + b_z)        update gate
    r_t = sigmoid(W_rx x_t + W_rh h_prev + b_r)        reset gate
    h~  = tanh(W_hx x_t + W_hh (r_t * h_prev) + b_h)   candidate
    h_t = z_t * h~ + (1 - z_t) * h_prev

Careful: the update gate multiplies the *candidate* here, not the carried
state. Some formulations swap the two terms; this whole package follows the
convention above.

The skip-gated cell extends it with a preservation path. When timestep t has
a skip-ancestor p (an earlier step whose hidden state h_p must survive to t),
a skip gate decides how much of h_p to reinject into the candidate:

    s_t = sigmoid(W_sx x_t + W_sh h_p + b_s)           skip gate
    h~  = tanh(W_hx x_t + W_hh (r_t * h_prev) + W_hp (s_t * h_p) + b_h)

With no ancestor the skip term vanishes and the cell is bit-identical to the
baseline cell on the embedded base parameters.

Gradients are hand-written analytic derivatives of the above; they are
checked against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .numeric import Array, SeededRng, init_params

__all__ = [
    "GRUParams",
    "SGRUParams",
    "StepTrace",
    "GRUStepGrads",
    "SGRUStepGrads",
    "init_gru_params",
    "init_sgru_params",
    "gru_forward",
    "gru_backward",
    "sgru_forward",
    "sgru_backward",
]


@dataclass
class GRUParams:
    """Weights of the baseline cell. Matrices are (hidden, input) or (hidden, hidden)."""

    W_zx: Array
    W_zh: Array
    W_rx: Array
    W_rh: Array
    W_hx: Array
    W_hh: Array
    b_z: Array
    b_r: Array
    b_h: Array

    @property
    def hidden_dim(self) -> int:
        return self.W_zh.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_zx.shape[1]

    def named_tensors(self):
        """Canonical (name, array) pairs, fixed order."""
        for name in ("W_zx", "W_zh", "W_rx", "W_rh", "W_hx", "W_hh", "b_z", "b_r", "b_h"):
            yield name, getattr(self, name)

    def copy(self) -> "GRUParams":
        return GRUParams(**{n: t.copy() for n, t in self.named_tensors()})


@dataclass
class SGRUParams:
    """Baseline weights plus the skip gate and preservation matrices."""

    base: GRUParams
    W_sx: Array
    W_sh: Array
    W_hp: Array
    b_s: Array

    @property
    def hidden_dim(self) -> int:
        return self.base.hidden_dim

    @property
    def input_dim(self) -> int:
        return self.base.input_dim

    def named_tensors(self):
        base = dict(self.base.named_tensors())
        for name in ("W_zx", "W_zh", "W_rx", "W_rh", "W_sx", "W_sh", "W_hx", "W_hh", "W_hp"):
            yield name, base[name] if name in base else getattr(self, name)
        for name in ("b_z", "b_r", "b_s", "b_h"):
            yield name, base[name] if name in base else getattr(self, name)

    def copy(self) -> "SGRUParams":
        return SGRUParams(
            base=self.base.copy(),
            W_sx=self.W_sx.copy(),
            W_sh=self.W_sh.copy(),
            W_hp=self.W_hp.copy(),
            b_s=self.b_s.copy(),
        )


@dataclass
class StepTrace:
    """Gate activations and states of one timestep, kept for the backward pass."""

    z: Array
    r: Array
    s: Array | None
    h_tilde: Array
    h: Array
    had_skip: bool


@dataclass
class GRUStepGrads:
    params: GRUParams
    dx: Array
    dh_prev: Array


@dataclass
class SGRUStepGrads:
    params: SGRUParams
    dx: Array
    dh_prev: Array
    dh_skip: Array


def init_gru_params(
    input_dim: int, hidden_dim: int, rng: SeededRng, scale: float | None = None
) -> GRUParams:
    """Uniform fan-in-scaled weights, zero biases."""
    return GRUParams(
        W_zx=init_params(hidden_dim, input_dim, rng, scale=scale),
        W_zh=init_params(hidden_dim, hidden_dim, rng, scale=scale),
        W_rx=init_params(hidden_dim, input_dim, rng, scale=scale),
        W_rh=init_params(hidden_dim, hidden_dim, rng, scale=scale),
        W_hx=init_params(hidden_dim, input_dim, rng, scale=scale),
        W_hh=init_params(hidden_dim, hidden_dim, rng, scale=scale),
        b_z=np.zeros(hidden_dim),
        b_r=np.zeros(hidden_dim),
        b_h=np.zeros(hidden_dim),
    )


def init_sgru_params(
    input_dim: int, hidden_dim: int, rng: SeededRng, scale: float | None = None
) -> SGRUParams:
    return SGRUParams(
        base=init_gru_params(input_dim, hidden_dim, rng, scale=scale),
        W_sx=init_params(hidden_dim, input_dim, rng, scale=scale),
        W_sh=init_params(hidden_dim, hidden_dim, rng, scale=scale),
        W_hp=init_params(hidden_dim, hidden_dim, rng, scale=scale),
        b_s=np.zeros(hidden_dim),
    )


def zeros_like_gru(p: GRUParams) -> GRUParams:
    return GRUParams(**{n: np.zeros_like(t) for n, t in p.named_tensors()})


def zeros_like_sgru(p: SGRUParams) -> SGRUParams:
    return SGRUParams(
        base=zeros_like_gru(p.base),
        W_sx=np.zeros_like(p.W_sx),
        W_sh=np.zeros_like(p.W_sh),
        W_hp=np.zeros_like(p.W_hp),
        b_s=np.zeros_like(p.b_s),
    )


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_step_dims(params, x_t: Array, h_prev: Array) -> None:
    if x_t.shape != (params.input_dim,):
        raise ShapeMismatchError("cell input", x_t.shape, (params.input_dim,))
    if h_prev.shape != (params.hidden_dim,):
        raise ShapeMismatchError("cell hidden state", h_prev.shape, (params.hidden_dim,))


def gru_forward(params: GRUParams, x_t: Array, h_prev: Array) -> StepTrace:
    """One baseline-cell step."""
    _check_step_dims(params, x_t, h_prev)
    z = _sigmoid(params.W_zx @ x_t + params.W_zh @ h_prev + params.b_z)
    r = _sigmoid(params.W_rx @ x_t + params.W_rh @ h_prev + params.b_r)
    h_tilde = np.tanh(params.W_hx @ x_t + params.W_hh @ (r * h_prev) + params.b_h)
    h = z * h_tilde + (1.0 - z) * h_prev
    return StepTrace(z=z, r=r, s=None, h_tilde=h_tilde, h=h, had_skip=False)


def sgru_forward(
    params: SGRUParams, x_t: Array, h_prev: Array, h_skip: Array | None = None
) -> StepTrace:
    """One skip-cell step; h_skip is the ancestor state, or None for skip-free steps.

    The skip gate is only evaluated when an ancestor exists.
    """
    if h_skip is None:
        return gru_forward(params.base, x_t, h_prev)
    _check_step_dims(params, x_t, h_prev)
    if h_skip.shape != h_prev.shape:
        raise ShapeMismatchError("skip-ancestor state", h_skip.shape, h_prev.shape)
    base = params.base
    z = _sigmoid(base.W_zx @ x_t + base.W_zh @ h_prev + base.b_z)
    r = _sigmoid(base.W_rx @ x_t + base.W_rh @ h_prev + base.b_r)
    s = _sigmoid(params.W_sx @ x_t + params.W_sh @ h_skip + params.b_s)
    h_tilde = np.tanh(
        base.W_hx @ x_t
        + base.W_hh @ (r * h_prev)
        + params.W_hp @ (s * h_skip)
        + base.b_h
    )
    h = z * h_tilde + (1.0 - z) * h_prev
    return StepTrace(z=z, r=r, s=s, h_tilde=h_tilde, h=h, had_skip=True)


def gru_backward(
    params: GRUParams,
    x_t: Array,
    h_prev: Array,
    trace: StepTrace,
    dh_t: Array,
) -> GRUStepGrads:
    """Analytic gradients of one baseline step given upstream dL/dh_t."""
    z, r, h_tilde = trace.z, trace.r, trace.h_tilde
    g = zeros_like_gru(params)

    dz = dh_t * (h_tilde - h_prev)
    dh_tilde = dh_t * z
    dh_prev = dh_t * (1.0 - z)

    da_h = dh_tilde * (1.0 - h_tilde * h_tilde)
    g.W_hx += np.outer(da_h, x_t)
    rh = r * h_prev
    g.W_hh += np.outer(da_h, rh)
    g.b_h += da_h
    dx = params.W_hx.T @ da_h
    drh = params.W_hh.T @ da_h
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r

    da_z = dz * z * (1.0 - z)
    g.W_zx += np.outer(da_z, x_t)
    g.W_zh += np.outer(da_z, h_prev)
    g.b_z += da_z
    dx += params.W_zx.T @ da_z
    dh_prev = dh_prev + params.W_zh.T @ da_z

    da_r = dr * r * (1.0 - r)
    g.W_rx += np.outer(da_r, x_t)
    g.W_rh += np.outer(da_r, h_prev)
    g.b_r += da_r
    dx += params.W_rx.T @ da_r
    dh_prev = dh_prev + params.W_rh.T @ da_r

    return GRUStepGrads(params=g, dx=dx, dh_prev=dh_prev)


def sgru_backward(
    params: SGRUParams,
    x_t: Array,
    h_prev: Array,
    h_skip: Array | None,
    trace: StepTrace,
    dh_t: Array,
) -> SGRUStepGrads:
    """Analytic gradients of one skip step; dh_skip is zero for skip-free steps."""
    if not trace.had_skip:
        base = gru_backward(params.base, x_t, h_prev, trace, dh_t)
        g = zeros_like_sgru(params)
        g.base = base.params
        return SGRUStepGrads(
            params=g,
            dx=base.dx,
            dh_prev=base.dh_prev,
            dh_skip=np.zeros_like(base.dh_prev),
        )

    base = params.base
    z, r, s, h_tilde = trace.z, trace.r, trace.s, trace.h_tilde
    g = zeros_like_sgru(params)
    gb = g.base

    dz = dh_t * (h_tilde - h_prev)
    dh_tilde = dh_t * z
    dh_prev = dh_t * (1.0 - z)

    da_h = dh_tilde * (1.0 - h_tilde * h_tilde)
    gb.W_hx += np.outer(da_h, x_t)
    rh = r * h_prev
    gb.W_hh += np.outer(da_h, rh)
    gb.b_h += da_h
    dx = base.W_hx.T @ da_h
    drh = base.W_hh.T @ da_h
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r

    # preservation term: W_hp (s * h_skip) inside the candidate
    sh = s * h_skip
    g.W_hp += np.outer(da_h, sh)
    dsh = params.W_hp.T @ da_h
    ds = dsh * h_skip
    dh_skip = dsh * s

    da_s = ds * s * (1.0 - s)
    g.W_sx += np.outer(da_s, x_t)
    g.W_sh += np.outer(da_s, h_skip)
    g.b_s += da_s
    dx += params.W_sx.T @ da_s
    dh_skip = dh_skip + params.W_sh.T @ da_s

    da_z = dz * z * (1.0 - z)
    gb.W_zx += np.outer(da_z, x_t)
    gb.W_zh += np.outer(da_z, h_prev)
    gb.b_z += da_z
    dx += base.W_zx.T @ da_z
    dh_prev = dh_prev + base.W_zh.T @ da_z

    da_r = dr * r * (1.0 - r)
    gb.W_rx += np.outer(da_r, x_t)
    gb.W_rh += np.outer(da_r, h_prev)
    gb.b_r += da_r
    dx += base.W_rx.T @ da_r
    dh_prev = dh_prev + base.W_rh.T @ da_r

    return SGRUStepGrads(params=g, dx=dx, dh_prev=dh_prev, dh_skip=dh_skip)

"""Exact linear-quadratic benchmark via a backward matrix Riccati equation.

The oracle lives at the discretized level: for the n-dimensional system
obtained by replacing the Laplacian with the three-point matrix, the value
function of the linear-quadratic problem is exactly quadratic,

    V(t, x) = <x, R(t) x>_{L2} + r(t) = h x' R(t) x + r(t),

with R solving a matrix Riccati ODE backward from the terminal cost.  The
factor conventions fixed here and used by every cross-module comparison:

    gradient of V   p(t) = 2 R(t) x(t)          (nodal field),
    Hessian of V    P(t) = 2 R(t)               (operator matrix; kernel 2R/h),
    martingale term q_j(t) = 2 R(t) sigma_j(x(t), u(t))   (column per channel).

Noise loadings per channel j are sigma_j(x, u) = gamma_j x + delta_j . u
+ e_j, with the restriction that a channel is either state-multiplicative or
additive (mixed channels would break the quadratic ansatz), and that
control-multiplicative loadings never combine with additive ones.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .function_space import Grid, laplacian_array
from .model import ControlBox, ControlLaw, NemytskiiModel

logger = logging.getLogger(__name__)


def dirichlet_laplacian_matrix(grid: Grid) -> np.ndarray:
    n, h = grid.n, grid.h
    lap = np.zeros((n, n))
    idx = np.arange(n)
    lap[idx, idx] = -2.0 / h**2
    lap[idx[:-1], idx[:-1] + 1] = 1.0 / h**2
    lap[idx[1:], idx[1:] - 1] = 1.0 / h**2
    return lap


@dataclass(frozen=True)
class LQSpec:
    """Linear-quadratic problem data for the discretized system.

    Cost matrices are quadratic forms on nodal values and already contain the
    quadrature weights: running cost = x' state_cost x + u' control_cost u,
    terminal cost = x' terminal_cost x.
    """

    grid: Grid
    drift_matrix: np.ndarray      # (n, n) symmetric, Laplacian included
    control_matrix: np.ndarray    # (n, d_u) injection fields as columns
    gamma: np.ndarray             # (m,) state-multiplicative loadings
    delta: np.ndarray             # (m, d_u) control-multiplicative loadings
    additive: np.ndarray          # (m,) additive loadings (constant rows)
    state_cost: np.ndarray        # (n, n) PSD
    control_cost: np.ndarray      # (d_u, d_u) PD
    terminal_cost: np.ndarray     # (n, n) PSD
    control_box: ControlBox | None = None

    def __post_init__(self):
        for name in ("drift_matrix", "control_matrix", "gamma", "delta",
                     "additive", "state_cost", "control_cost", "terminal_cost"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.grid.n
        if self.drift_matrix.shape != (n, n):
            raise ValueError("drift matrix shape mismatch")
        for name in ("state_cost", "terminal_cost"):
            mat = getattr(self, name)
            if not np.allclose(mat, mat.T):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(mat)) < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        nl = self.control_cost
        if not np.allclose(nl, nl.T) or np.min(np.linalg.eigvalsh(nl)) <= 0:
            raise ValueError("control cost must be symmetric positive definite")
        if np.any((self.gamma != 0) & (self.additive != 0)):
            raise ValueError("channels must be state-multiplicative or additive")
        if np.any(self.delta != 0) and np.any(self.additive != 0):
            raise ValueError("control-multiplicative loadings cannot combine "
                             "with additive ones (value loses quadratic form)")

    @property
    def d_u(self) -> int:
        return self.control_matrix.shape[1]

    @property
    def m(self) -> int:
        return self.gamma.size


def lq_spec_from_model(model: NemytskiiModel, grid: Grid, a: float,
                       beta, cost_x: float, cost_u: float,
                       cost_terminal: float) -> LQSpec:
    """Assemble the discretized LQ data matching lq_model coefficients.

    Pointwise drift a x + beta . u injects each control component as a
    constant field; nodal quadrature turns the cost densities into
    state_cost = cost_x h I, control_cost = cost_u n h I, terminal = cost_h h I.
    """
    n, h = grid.n, grid.h
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    b_u = np.ones((n, 1)) @ beta[None, :] if beta.ndim == 1 else beta
    lap = dirichlet_laplacian_matrix(grid)
    gamma = np.zeros(model.m)
    additive = np.zeros(model.m)
    zeros = np.zeros(n)
    sig0 = model.sigma(zeros, np.zeros(model.d_u))[0]
    sig1 = model.sigma(np.ones(n), np.zeros(model.d_u))[0]
    additive = np.asarray(sig0)
    gamma = np.asarray(sig1) - additive
    return LQSpec(
        grid=grid,
        drift_matrix=lap + a * np.eye(n),
        control_matrix=b_u,
        gamma=gamma,
        delta=np.zeros((model.m, model.d_u)),
        additive=additive,
        state_cost=cost_x * h * np.eye(n),
        control_cost=cost_u * n * h * np.eye(model.d_u),
        terminal_cost=cost_terminal * h * np.eye(n),
        control_box=model.control_box,
    )


@dataclass(frozen=True)
class RiccatiPath:
    """Backward Riccati solution sampled on the scheme's time grid."""

    spec: LQSpec
    times: np.ndarray             # (N+1,) ascending
    matrices: np.ndarray          # (N+1, n, n) symmetric R(t_i)
    offsets: np.ndarray           # (N+1,) scalar r(t_i)

    def __post_init__(self):
        for name in ("times", "matrices", "offsets"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def _locate(self, t: float) -> tuple[int, float, bool]:
        times = self.times
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise ValueError(f"time {t} outside [{times[0]}, {times[-1]}]")
        i = int(np.searchsorted(times, t))
        i = min(max(i, 0), len(times) - 1)
        if abs(times[i] - t) <= 1e-12:
            return i, 0.0, True
        if i > 0 and abs(times[i - 1] - t) <= 1e-12:
            return i - 1, 0.0, True
        i = int(np.searchsorted(times, t, side="right")) - 1
        w = (t - times[i]) / (times[i + 1] - times[i])
        return i, w, False

    def matrix_at(self, t: float) -> np.ndarray:
        i, w, exact = self._locate(t)
        if exact:
            return self.matrices[i]
        warnings.warn(f"time {t} off the Riccati grid; interpolating linearly",
                      stacklevel=2)
        return (1 - w) * self.matrices[i] + w * self.matrices[i + 1]

    def offset_at(self, t: float) -> float:
        i, w, exact = self._locate(t)
        if exact:
            return float(self.offsets[i])
        return float((1 - w) * self.offsets[i] + w * self.offsets[i + 1])


def _soft_rhs(spec: LQSpec, r_mat: np.ndarray) -> np.ndarray:
    """Backward-time derivative of R without the stiff conjugation flow.

    Backward variable s = T - t:  dR/ds = M + g2 R - quad(R), where quad is
    the control-completion term and M the state-cost form divided by h.
    """
    h = spec.grid.h
    b = spec.control_matrix
    ones = np.ones(spec.grid.n)
    trace_r = float(ones @ r_mat @ ones)
    g2 = float(np.sum(spec.gamma**2))
    n_eff = spec.control_cost + h * trace_r * (spec.delta.T @ spec.delta)
    w = spec.gamma @ spec.delta  # (d_u,)
    s_r = b.T @ r_mat + np.outer(w, ones @ r_mat)  # (d_u, n)
    quad = h * (s_r.T @ np.linalg.solve(n_eff, s_r))
    out = spec.state_cost / h + g2 * r_mat - quad
    return 0.5 * (out + out.T)


def _riccati_rhs(spec: LQSpec, r_mat: np.ndarray) -> tuple[np.ndarray, float]:
    """Forward-time derivative of (R, r): the full Riccati ODE."""
    a = spec.drift_matrix
    stiff = a @ r_mat + r_mat @ a
    dr = -stiff - _soft_rhs(spec, r_mat)
    ones = np.ones(spec.grid.n)
    e2 = float(np.sum(spec.additive**2))
    doff = -spec.grid.h * e2 * float(ones @ r_mat @ ones)
    return 0.5 * (dr + dr.T), doff


def riccati_solve(spec: LQSpec, times: np.ndarray, substeps: int = 4) -> RiccatiPath:
    """Integrate the Riccati ODE backward, sub-stepped per scheme interval.

    The conjugation flow driven by the drift matrix (Laplacian included) is
    far too stiff for an explicit integrator at the scheme's resolution, so
    each substep applies its exact spectral exponential in a symmetric
    (Strang) split around an RK4 substep for the smooth cost/control part.
    The scalar noise offset r accumulates by trapezoid on the substep grid.
    """
    times = np.asarray(times, dtype=np.float64)
    n_t = times.size
    n = spec.grid.n
    alpha, q_mat = np.linalg.eigh(spec.drift_matrix)
    e2 = float(np.sum(spec.additive**2))
    ones = np.ones(n)

    mats = np.empty((n_t, n, n))
    offs = np.empty(n_t)
    mats[-1] = spec.terminal_cost / spec.grid.h
    offs[-1] = 0.0

    def half_flow(r_mat, dtau):
        # exact backward flow of dR/ds = A R + R A over dtau/2
        exp_half = q_mat @ (np.exp(alpha * (dtau / 2.0))[:, None] * q_mat.T)
        return exp_half @ r_mat @ exp_half

    for i in range(n_t - 1, 0, -1):
        r_mat = mats[i].copy()
        off = offs[i]
        dtau = (times[i] - times[i - 1]) / substeps
        for _ in range(substeps):
            trace_before = float(ones @ r_mat @ ones)
            r_mat = half_flow(r_mat, dtau)
            k1 = _soft_rhs(spec, r_mat)
            k2 = _soft_rhs(spec, r_mat + 0.5 * dtau * k1)
            k3 = _soft_rhs(spec, r_mat + 0.5 * dtau * k2)
            k4 = _soft_rhs(spec, r_mat + dtau * k3)
            r_mat = r_mat + dtau / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            r_mat = half_flow(r_mat, dtau)
            r_mat = 0.5 * (r_mat + r_mat.T)
            trace_after = float(ones @ r_mat @ ones)
            off += spec.grid.h * e2 * 0.5 * dtau * (trace_before + trace_after)
        mats[i - 1] = r_mat
        offs[i - 1] = off
    return RiccatiPath(spec=spec, times=times, matrices=mats, offsets=offs)


def lq_value(path: RiccatiPath, t: float, x: np.ndarray) -> float:
    """V(t, x) = h x' R(t) x + r(t); off-grid times interpolate with a warning."""
    r_mat = path.matrix_at(t)
    x = np.asarray(x, dtype=np.float64)
    return float(path.spec.grid.h * (x @ r_mat @ x) + path.offset_at(t))


def lq_value_batch(path: RiccatiPath, index: int, x: np.ndarray) -> np.ndarray:
    """Values at grid time index for an ensemble of states (paths, n)."""
    r_mat = path.matrices[index]
    quad = np.einsum("pi,ij,pj->p", x, r_mat, x)
    return path.spec.grid.h * quad + path.offsets[index]


def value_time_derivative(path: RiccatiPath, index: int, x: np.ndarray) -> float:
    """Exact partial time derivative of the quadratic value at a grid time,
    evaluated through the Riccati right-hand side."""
    dr, doff = _riccati_rhs(path.spec, path.matrices[index])
    x = np.asarray(x, dtype=np.float64)
    return float(path.spec.grid.h * (x @ dr @ x) + doff)


def feedback_gain(path: RiccatiPath, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Affine feedback u = -(gain) x at grid time index, plus the effective
    control-cost matrix used (for diagnostics)."""
    spec = path.spec
    h = spec.grid.h
    r_mat = path.matrices[index]
    ones = np.ones(spec.grid.n)
    trace_r = float(ones @ r_mat @ ones)
    n_eff = spec.control_cost + h * trace_r * (spec.delta.T @ spec.delta)
    w = spec.gamma @ spec.delta
    s_r = spec.control_matrix.T @ r_mat + np.outer(w, ones @ r_mat)
    return h * np.linalg.solve(n_eff, s_r), n_eff


def lq_feedback(path: RiccatiPath, t: float, x: np.ndarray) -> np.ndarray:
    """Pointwise Hamiltonian minimizer, affine in the state, box-clipped."""
    i, _, exact = path._locate(t)
    if not exact:
        warnings.warn(f"time {t} off the Riccati grid; using nearest index",
                      stacklevel=2)
    gain, _ = feedback_gain(path, i)
    u = -gain @ np.asarray(x, dtype=np.float64)
    box = path.spec.control_box
    if box is not None:
        u, clipped = box.clip(u)
        if clipped:
            logger.info("riccati feedback clipped to control box at t=%g", t)
    return u


@dataclass(frozen=True)
class RiccatiFeedback(ControlLaw):
    """Optimal LQ feedback as a simulation control law."""

    path: RiccatiPath
    name: str = "riccati_feedback"
    _gains: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        gains = np.stack([feedback_gain(self.path, i)[0]
                          for i in range(len(self.path.times))])
        gains.setflags(write=False)
        object.__setattr__(self, "_gains", gains)

    def __call__(self, step, t, x):
        u = -(x @ self._gains[step].T)
        box = self.path.spec.control_box
        if box is not None:
            u = np.clip(u, box.lower, box.upper)
        return u


def lq_adjoints(path: RiccatiPath, states: np.ndarray,
                controls: np.ndarray | None = None,
                model: NemytskiiModel | None = None):
    """Closed-form adjoints along a trajectory, the smooth-case reference.

    ``states`` has shape (T+1, ..., n) aligned with path.times.  Returns
    (p, P_matrices, q): p matches states' shape; P is (T+1, n, n) operator
    matrices 2 R(t); q is None unless the model is given, else
    (T+1, ..., n, m) with columns 2 R sigma_j(state, control).
    """
    mats = path.matrices
    p = 2.0 * np.einsum("tij,t...j->t...i", mats, states)
    p_ops = 2.0 * mats
    q = None
    if model is not None:
        if controls is None:
            raise ValueError("controls required to evaluate sigma for q")
        sig = np.stack([model.sigma(states[i], controls[i])
                        for i in range(states.shape[0])])
        q = 2.0 * np.einsum("tij,t...jm->t...im", mats, sig)
    return p, p_ops, q


def hjb_residual(path: RiccatiPath, index: int, x: np.ndarray) -> float:
    """Residual of the dynamic-programming PDE at a grid time and state.

    The time derivative of V comes from the Riccati right-hand side, the
    spatial terms from the quadratic form, and the Hamiltonian minimum from
    the closed-form feedback; for the quadratic value function the result
    sits at integrator tolerance.
    """
    spec = path.spec
    h = spec.grid.h
    x = np.asarray(x, dtype=np.float64)
    r_mat = path.matrices[index]
    dr, doff = _riccati_rhs(spec, r_mat)
    v_t = h * (x @ dr @ x) + doff
    p = 2.0 * (r_mat @ x)
    lap_term = h * float(laplacian_array(x, spec.grid) @ p)
    # nemytskii part of the drift (total drift matrix minus the laplacian)
    a_nem = spec.drift_matrix - dirichlet_laplacian_matrix(spec.grid)
    gain, n_eff = feedback_gain(path, index)
    u = -gain @ x
    ones = np.ones(spec.grid.n)
    sig_cols = (np.outer(x, spec.gamma) + np.outer(ones, spec.delta @ u)
                + np.outer(ones, spec.additive))  # (n, m)
    running = float(x @ spec.state_cost @ x + u @ spec.control_cost @ u)
    drift_term = h * float(p @ (a_nem @ x + spec.control_matrix @ u))
    trace_term = h * float(np.sum(sig_cols * (r_mat @ sig_cols)))
    return v_t + lap_term + running + drift_term + trace_term

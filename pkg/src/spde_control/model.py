"""Coefficient and noise models for the controlled stochastic heat equation.

Pointwise (Nemytskii) coefficient families: drift b(x, u), diffusion rows
sigma(x, u) into m truncated noise channels, running cost density l(x, u) and
terminal cost density h(x), each with first and second x-derivatives and
declared growth constants that :func:`check_assumptions` scans numerically.

Noise is a truncated cylindrical Wiener process realized as m independent
scalar channels.  Sampling is a pure function of (seed, stage, path, step),
so ensembles replay bit-exactly and paths are independent streams.

Array convention: state arrays have node values on the last axis, shape
``(..., n)``; controls are ``(d_u,)`` or ``(..., d_u)`` with matching leading
axes; diffusion arrays gain a trailing channel axis, shape ``(..., n, m)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .function_space import Field, Grid


class ControlOutOfBoundsError(ValueError):
    """Raised when a control leaves the admissible box."""


@dataclass(frozen=True)
class ControlBox:
    """Admissible control domain: a product of closed intervals."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if np.any(lo >= hi):
            raise ValueError("box must have lower < upper componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, u) -> bool:
        u = np.asarray(u, dtype=np.float64)
        return bool(np.all(u >= self.lower) and np.all(u <= self.upper))

    def clip(self, u) -> tuple[np.ndarray, bool]:
        """Clip u into the box; the flag reports whether clipping occurred."""
        u = np.asarray(u, dtype=np.float64)
        clipped = np.clip(u, self.lower, self.upper)
        return clipped, bool(np.any(clipped != u))

    def validate(self, u) -> None:
        if not self.contains(u):
            raise ControlOutOfBoundsError(f"control {np.asarray(u)} outside box "
                                          f"[{self.lower}, {self.upper}]")


def _ucomp(u, j: int):
    """Component j of a control, broadcastable against a (..., n) state."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 0:
        return u
    if u.ndim == 1:
        return u[j]
    return u[..., j, None]


def _unorm_sq(u):
    u = np.asarray(u, dtype=np.float64)
    if u.ndim <= 1:
        return float(np.dot(np.atleast_1d(u), np.atleast_1d(u)))
    return np.sum(u * u, axis=-1)[..., None]


PointwiseMap = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NemytskiiModel:
    """Pointwise coefficient family with derivatives and declared bounds.

    ``bounds`` maps check names to declared constants:
    the derivative bounds ``b_x, b_xx, sigma_x, sigma_xx, l_xx, h_xx``,
    ``growth_linear`` for |b|, |sigma|, |l_x|, |h_x| <= C (1 + |x| + |u|),
    and ``growth_quadratic`` for |l|, |h| <= C (1 + |x|^2 + |u|^2).
    """

    name: str
    d_u: int
    m: int
    b: PointwiseMap
    b_x: PointwiseMap
    b_xx: PointwiseMap
    sigma: PointwiseMap       # (..., n) -> (..., n, m)
    sigma_x: PointwiseMap
    sigma_xx: PointwiseMap
    l: PointwiseMap
    l_x: PointwiseMap
    l_xx: PointwiseMap
    h: Callable[[np.ndarray], np.ndarray]
    h_x: Callable[[np.ndarray], np.ndarray]
    h_xx: Callable[[np.ndarray], np.ndarray]
    bounds: dict = field(default_factory=dict)
    control_box: Optional[ControlBox] = None
    sigma_depends_on_x: bool = True
    sigma_depends_on_u: bool = False
    sigma_is_zero: bool = False

    _DERIVATIVES = ("b_x", "b_xx", "sigma_x", "sigma_xx", "l_x", "l_xx", "h_x", "h_xx")

    def derivative(self, which: str):
        if which not in self._DERIVATIVES:
            raise ValueError(f"unknown derivative {which!r}; "
                             f"expected one of {self._DERIVATIVES}")
        return getattr(self, which)

    def validate_control(self, u) -> None:
        if self.control_box is not None:
            self.control_box.validate(u)


# ---------------------------------------------------------------------------
# Field-level evaluation (simulators call the pointwise maps on raw arrays)
# ---------------------------------------------------------------------------

def eval_drift(model: NemytskiiModel, x: Field, u) -> Field:
    model.validate_control(u)
    return Field(model.b(x.values, u), x.grid)


def eval_diffusion(model: NemytskiiModel, x: Field, u) -> np.ndarray:
    """Diffusion array with row i = sigma(x(i), u); Hilbert-Schmidt norm is
    sqrt(h * sum of squares)."""
    model.validate_control(u)
    return model.sigma(x.values, u)


def diffusion_hs_norm(sig: np.ndarray, grid: Grid) -> float:
    return math.sqrt(grid.h) * float(np.linalg.norm(sig))


def eval_derivatives(model: NemytskiiModel, which: str, x: Field, u=None):
    fn = model.derivative(which)
    if which.startswith("h"):
        return Field(fn(x.values), x.grid)
    out = fn(x.values, u)
    if which.startswith("sigma"):
        return out
    return Field(out, x.grid)


# ---------------------------------------------------------------------------
# built-in model library
# ---------------------------------------------------------------------------

def _sigma_affine(gamma: np.ndarray, offset: np.ndarray) -> tuple[PointwiseMap, ...]:
    """Channel maps sigma_j = gamma_j x + offset_j with derivatives."""
    gamma = np.asarray(gamma, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)

    def sig(x, u):
        return x[..., None] * gamma + offset

    def sig_x(x, u):
        return np.broadcast_to(gamma, x.shape + gamma.shape).copy()

    def sig_xx(x, u):
        return np.zeros(x.shape + gamma.shape)

    return sig, sig_x, sig_xx


def lq_model(a: float = 0.0, beta=(1.0,), sigma_additive=(0.1,), sigma_state=None,
             cost_x: float = 1.0, cost_u: float = 0.1, cost_terminal: float = 1.0,
             control_box: Optional[ControlBox] = None) -> NemytskiiModel:
    """Linear drift a x + beta . u, affine diffusion rows gamma_j x + e_j,
    quadratic running and terminal costs.  The smooth benchmark case."""
    beta = np.asarray(beta, dtype=np.float64)
    e = np.asarray(sigma_additive, dtype=np.float64)
    gamma = np.zeros_like(e) if sigma_state is None else np.asarray(sigma_state, float)
    if gamma.shape != e.shape:
        raise ValueError("sigma_state and sigma_additive must have equal length")
    if np.any((gamma != 0) & (e != 0)):
        raise ValueError("each noise channel must be either state-multiplicative "
                         "or additive (oracle value functions stay quadratic)")
    d_u = beta.size
    m = e.size

    def drift(x, u):
        out = a * x
        for j in range(d_u):
            out = out + beta[j] * _ucomp(u, j)
        return np.broadcast_to(out, np.broadcast_shapes(out.shape, x.shape)).copy()

    sig, sig_x, sig_xx = _sigma_affine(gamma, e)
    gmax = float(np.max(np.abs(gamma))) if m else 0.0
    growth = max(abs(a) + float(np.sum(np.abs(beta))), gmax + float(np.max(np.abs(e), initial=0.0)),
                 2 * cost_x, 2 * cost_terminal, 1.0)
    return NemytskiiModel(
        name="lq", d_u=d_u, m=m,
        b=drift,
        b_x=lambda x, u: np.full_like(x, a),
        b_xx=lambda x, u: np.zeros_like(x),
        sigma=sig, sigma_x=sig_x, sigma_xx=sig_xx,
        l=lambda x, u: cost_x * x**2 + cost_u * _unorm_sq(u) * np.ones_like(x),
        l_x=lambda x, u: 2 * cost_x * x,
        l_xx=lambda x, u: np.full_like(x, 2 * cost_x),
        h=lambda x: cost_terminal * x**2,
        h_x=lambda x: 2 * cost_terminal * x,
        h_xx=lambda x: np.full_like(x, 2 * cost_terminal),
        bounds={"b_x": abs(a) + 1e-12, "b_xx": 1e-12, "sigma_x": gmax + 1e-12,
                "sigma_xx": 1e-12, "l_xx": 2 * cost_x + 1e-12,
                "h_xx": 2 * cost_terminal + 1e-12,
                "growth_linear": growth, "growth_quadratic": max(cost_x, cost_u, cost_terminal)},
        control_box=control_box,
        sigma_depends_on_x=bool(np.any(gamma != 0)),
        sigma_is_zero=bool(np.all(gamma == 0) and np.all(e == 0)),
    )


def logistic_model(beta=(1.0,), sigma_additive=(0.05,), cost_x: float = 1.0,
                   cost_u: float = 0.1, cost_terminal: float = 1.0,
                   control_box: Optional[ControlBox] = None) -> NemytskiiModel:
    """Bistable cubic drift x - x^3 + beta . u with additive noise.

    The drift derivative is only locally bounded; the declared constants hold
    on |x| <= 2 and check_assumptions flags wider scans."""
    beta = np.asarray(beta, dtype=np.float64)
    e = np.asarray(sigma_additive, dtype=np.float64)
    d_u, m = beta.size, e.size

    def drift(x, u):
        out = x - x**3
        for j in range(d_u):
            out = out + beta[j] * _ucomp(u, j)
        return out

    sig, sig_x, sig_xx = _sigma_affine(np.zeros(m), e)
    return NemytskiiModel(
        name="logistic", d_u=d_u, m=m,
        b=drift,
        b_x=lambda x, u: 1.0 - 3.0 * x**2,
        b_xx=lambda x, u: -6.0 * x,
        sigma=sig, sigma_x=sig_x, sigma_xx=sig_xx,
        l=lambda x, u: cost_x * x**2 + cost_u * _unorm_sq(u) * np.ones_like(x),
        l_x=lambda x, u: 2 * cost_x * x,
        l_xx=lambda x, u: np.full_like(x, 2 * cost_x),
        h=lambda x: cost_terminal * x**2,
        h_x=lambda x: 2 * cost_terminal * x,
        h_xx=lambda x: np.full_like(x, 2 * cost_terminal),
        bounds={"b_x": 11.0, "b_xx": 12.0, "sigma_x": 1e-12, "sigma_xx": 1e-12,
                "l_xx": 2 * cost_x + 1e-12, "h_xx": 2 * cost_terminal + 1e-12,
                "growth_linear": 11.0, "growth_quadratic": max(cost_x, cost_u, cost_terminal)},
        control_box=control_box,
        sigma_depends_on_x=False,
        sigma_is_zero=bool(np.all(e == 0)),
    )


def cubic_trig_model(beta=(1.0,), sigma_amp=(0.2,), sigma_offset=(0.05,),
                     cost_x: float = 1.0, cost_u: float = 0.1,
                     cost_terminal: float = 1.0,
                     control_box: Optional[ControlBox] = None) -> NemytskiiModel:
    """Cubic drift with bounded trigonometric diffusion gamma_j sin(x) + e_j,
    so the diffusion derivative bounds hold globally."""
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(sigma_amp, dtype=np.float64)
    e = np.asarray(sigma_offset, dtype=np.float64)
    if gamma.shape != e.shape:
        raise ValueError("sigma_amp and sigma_offset must have equal length")
    d_u, m = beta.size, gamma.size

    def drift(x, u):
        out = x - x**3
        for j in range(d_u):
            out = out + beta[j] * _ucomp(u, j)
        return out

    return NemytskiiModel(
        name="cubic_trig", d_u=d_u, m=m,
        b=drift,
        b_x=lambda x, u: 1.0 - 3.0 * x**2,
        b_xx=lambda x, u: -6.0 * x,
        sigma=lambda x, u: np.sin(x)[..., None] * gamma + e,
        sigma_x=lambda x, u: np.cos(x)[..., None] * gamma,
        sigma_xx=lambda x, u: -np.sin(x)[..., None] * gamma,
        l=lambda x, u: cost_x * x**2 + cost_u * _unorm_sq(u) * np.ones_like(x),
        l_x=lambda x, u: 2 * cost_x * x,
        l_xx=lambda x, u: np.full_like(x, 2 * cost_x),
        h=lambda x: cost_terminal * x**2,
        h_x=lambda x: 2 * cost_terminal * x,
        h_xx=lambda x: np.full_like(x, 2 * cost_terminal),
        bounds={"b_x": 11.0, "b_xx": 12.0,
                "sigma_x": float(np.max(np.abs(gamma), initial=0.0)) + 1e-12,
                "sigma_xx": float(np.max(np.abs(gamma), initial=0.0)) + 1e-12,
                "l_xx": 2 * cost_x + 1e-12, "h_xx": 2 * cost_terminal + 1e-12,
                "growth_linear": 11.0, "growth_quadratic": max(cost_x, cost_u, cost_terminal)},
        control_box=control_box,
        sigma_depends_on_x=True,
        sigma_is_zero=False,
    )


MODEL_LIBRARY = {
    "lq": lq_model,
    "logistic": logistic_model,
    "cubic_trig": cubic_trig_model,
}


# ---------------------------------------------------------------------------
# general (field-level) coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneralModel:
    """Field-level coefficients B, Sigma, L, H with Lipschitz/growth constants.

    Covers coefficient families that are not pointwise, e.g. the mollified
    diffusion below.  ``drift`` maps (..., n) states to (..., n) fields,
    ``diffusion`` to (..., n, m) arrays, the costs to scalars per sample.
    """

    name: str
    grid: Grid
    d_u: int
    m: int
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    terminal_cost: Callable
    lipschitz_const: float
    growth_const: float


def general_from_nemytskii(model: NemytskiiModel, grid: Grid) -> GeneralModel:
    h = grid.h

    def running(x, u):
        return h * np.sum(model.l(x, u), axis=-1)

    def terminal(x):
        return h * np.sum(model.h(x), axis=-1)

    c = float(model.bounds.get("growth_linear", 1.0))
    return GeneralModel(
        name=model.name, grid=grid, d_u=model.d_u, m=model.m,
        drift=model.b, diffusion=model.sigma,
        running_cost=running, terminal_cost=terminal,
        lipschitz_const=max(c, float(model.bounds.get("b_x", c))),
        growth_const=max(c, float(model.bounds.get("growth_quadratic", c))),
    )


# ---------------------------------------------------------------------------
# mollified diffusion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MollifiedDiffusion:
    """Diffusion precomposed with a Gaussian smoothing of the state.

    The smoothing kernel is row-normalized on the grid, so constants are
    preserved; the smoothed diffusion is Hilbert-Schmidt Lipschitz with
    respect to the H^-1 norm of the state, which the raw pointwise
    diffusion is not.
    """

    base: NemytskiiModel
    epsilon: float
    grid: Grid
    kernel: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("mollifier width must be positive")
        nodes = self.grid.nodes
        k = np.exp(-((nodes[:, None] - nodes[None, :]) ** 2) / (4.0 * self.epsilon))
        k /= self.grid.h * k.sum(axis=1, keepdims=True)
        k.setflags(write=False)
        object.__setattr__(self, "kernel", k)

    def smooth(self, x: np.ndarray) -> np.ndarray:
        return self.grid.h * (x @ self.kernel.T)

    def diffusion(self, x: np.ndarray, u) -> np.ndarray:
        return self.base.sigma(self.smooth(x), u)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    """Truncated cylindrical noise: m channels, counter-style Philox streams.

    Stream layout: one generator per (seed, stage, path); within a path the
    stream is consumed step-major, so block sampling and per-step sampling
    agree bit-exactly.
    """

    seed: int
    m: int
    stage: int = 0

    def derive(self, stage: int) -> "NoiseModel":
        return replace(self, stage=stage)

    def path_generator(self, path_index: int) -> np.random.Generator:
        seq = np.random.SeedSequence((self.seed, self.stage, path_index))
        return np.random.Generator(np.random.Philox(seq))

    def increments(self, dt: float, n_steps: int, n_paths: int,
                   first_path: int = 0) -> np.ndarray:
        """Wiener increments, shape (n_paths, n_steps, m), variance dt each."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        out = np.empty((n_paths, n_steps, self.m))
        root = math.sqrt(dt)
        for p in range(n_paths):
            gen = self.path_generator(first_path + p)
            out[p] = root * gen.standard_normal((n_steps, self.m))
        return out

    def sample_increments(self, dt: float, path_index: int, step_index: int) -> np.ndarray:
        """Single-step increments, bit-identical to the block at the same slot."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        gen = self.path_generator(path_index)
        draws = gen.standard_normal((step_index + 1, self.m))
        return math.sqrt(dt) * draws[-1]


# ---------------------------------------------------------------------------
# admissible control families
# ---------------------------------------------------------------------------

class ControlLaw:
    """A control applied during simulation: maps (step index, time, ensemble
    state) to control values, shape (d_u,) shared or (paths, d_u) per path.

    Subclasses must be free of mutable state so ensembles can evaluate them
    in any order.
    """

    name: str = "control"

    def __call__(self, step: int, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantControl(ControlLaw):
    u: np.ndarray
    name: str = "constant"

    def __post_init__(self):
        arr = np.atleast_1d(np.asarray(self.u, dtype=np.float64))
        arr.setflags(write=False)
        object.__setattr__(self, "u", arr)

    def __call__(self, step, t, x):
        return self.u


@dataclass(frozen=True)
class OpenLoopControl(ControlLaw):
    """Piecewise-constant-in-time deterministic control, one row per step."""

    values: np.ndarray  # (n_steps, d_u)
    name: str = "open_loop"

    def __post_init__(self):
        arr = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __call__(self, step, t, x):
        return self.values[step]


@dataclass(frozen=True)
class AffineFeedback(ControlLaw):
    """Feedback u(t, x) = offset(t) + gain(t) x, clipped to the box if given.

    ``offset`` has shape (n_steps, d_u) and ``gain`` (n_steps, d_u, n); the
    gain contracts against nodal state values.
    """

    offset: np.ndarray
    gain: np.ndarray
    box: Optional[ControlBox] = None
    name: str = "affine_feedback"

    def __post_init__(self):
        off = np.asarray(self.offset, dtype=np.float64)
        gn = np.asarray(self.gain, dtype=np.float64)
        if off.ndim != 2 or gn.ndim != 3 or off.shape != gn.shape[:2]:
            raise ValueError("offset must be (steps, d_u) and gain (steps, d_u, n)")
        off.setflags(write=False)
        gn.setflags(write=False)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "gain", gn)

    def __call__(self, step, t, x):
        u = self.offset[step] + x @ self.gain[step].T
        if self.box is not None:
            u = np.clip(u, self.box.lower, self.box.upper)
        return u


@dataclass(frozen=True)
class CallableFeedback(ControlLaw):
    """Wrap an arbitrary state-feedback map u(t, x)."""

    fn: Callable[[float, np.ndarray], np.ndarray]
    name: str = "feedback"

    def __call__(self, step, t, x):
        return self.fn(t, x)


# ---------------------------------------------------------------------------
# assumption scans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundCheck:
    name: str
    declared: float
    observed: float
    passed: bool

    @property
    def ratio(self) -> float:
        return self.observed / self.declared if self.declared else math.inf


@dataclass(frozen=True)
class AssumptionReport:
    model: str
    x_range: tuple[float, float]
    checks: tuple[BoundCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "x_range": list(self.x_range),
            "passed": self.passed,
            "checks": [
                {"name": c.name, "declared": c.declared, "observed": c.observed,
                 "ratio": c.ratio, "passed": c.passed}
                for c in self.checks
            ],
        }


def _u_samples(model: NemytskiiModel, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if model.control_box is not None:
        lo, hi = model.control_box.lower, model.control_box.upper
    else:
        lo, hi = -np.ones(model.d_u), np.ones(model.d_u)
    return lo + (hi - lo) * rng.random((n, model.d_u))


def check_assumptions(model: NemytskiiModel, x_range=(-2.0, 2.0), n_x: int = 201,
                      n_u: int = 16, seed: int = 0) -> AssumptionReport:
    """Scan the declared coefficient bounds on a grid of states and sampled
    controls; reporting only, never raises."""
    xs = np.linspace(x_range[0], x_range[1], n_x)
    us = _u_samples(model, n_u, seed)
    checks = []

    def sup_over_u(fn, absolute=True):
        worst = 0.0
        for u in us:
            val = fn(xs, u)
            worst = max(worst, float(np.max(np.abs(val) if absolute else val)))
        return worst

    derivative_bounds = {
        "b_x": lambda u: model.b_x(xs, u),
        "b_xx": lambda u: model.b_xx(xs, u),
        "sigma_x": lambda u: model.sigma_x(xs, u),
        "sigma_xx": lambda u: model.sigma_xx(xs, u),
        "l_xx": lambda u: model.l_xx(xs, u),
        "h_xx": lambda u: model.h_xx(xs),
    }
    for name, fn in derivative_bounds.items():
        declared = float(model.bounds.get(name, math.inf))
        observed = sup_over_u(lambda x, u, fn=fn: fn(u))
        checks.append(BoundCheck(name, declared, observed, observed <= declared * (1 + 1e-9)))

    c_lin = float(model.bounds.get("growth_linear", math.inf))
    worst_lin = 0.0
    for u in us:
        envelope = 1.0 + np.abs(xs) + math.sqrt(_unorm_sq(u))
        for val in (model.b(xs, u), model.l_x(xs, u), model.h_x(xs)):
            worst_lin = max(worst_lin, float(np.max(np.abs(val) / envelope)))
        sig = model.sigma(xs, u)
        worst_lin = max(worst_lin, float(np.max(
            np.linalg.norm(sig, axis=-1) / envelope)))
    checks.append(BoundCheck("growth_linear", c_lin, worst_lin,
                             worst_lin <= c_lin * (1 + 1e-9)))

    c_quad = float(model.bounds.get("growth_quadratic", math.inf))
    worst_quad = 0.0
    for u in us:
        envelope = 1.0 + xs**2 + _unorm_sq(u)
        for val in (model.l(xs, u), model.h(xs)):
            worst_quad = max(worst_quad, float(np.max(np.abs(val) / envelope)))
    checks.append(BoundCheck("growth_quadratic", c_quad, worst_quad,
                             worst_quad <= c_quad * (1 + 1e-9)))

    return AssumptionReport(model.name, tuple(x_range), tuple(checks))


def check_general_assumptions(gm: GeneralModel, n_samples: int = 32,
                              seed: int = 0) -> AssumptionReport:
    """Sampled Lipschitz and quadratic-growth checks for field-level
    coefficients."""
    rng = np.random.default_rng(seed)
    n = gm.grid.n
    xs = rng.normal(size=(n_samples, n))
    xts = rng.normal(size=(n_samples, n))
    us = rng.uniform(-1.0, 1.0, size=(n_samples, gm.d_u))
    h = gm.grid.h

    worst_lip = 0.0
    worst_growth = 0.0
    for x, xt, u in zip(xs, xts, us):
        dx = math.sqrt(h) * np.linalg.norm(x - xt)
        db = math.sqrt(h) * np.linalg.norm(gm.drift(x, u) - gm.drift(xt, u))
        ds = math.sqrt(h) * np.linalg.norm(gm.diffusion(x, u) - gm.diffusion(xt, u))
        worst_lip = max(worst_lip, db / dx, ds / dx)
        nx2 = h * float(np.dot(x, x))
        worst_growth = max(
            worst_growth,
            abs(float(gm.running_cost(x, u))) / (1 + nx2),
            abs(float(gm.terminal_cost(x))) / (1 + nx2),
        )
    checks = (
        BoundCheck("lipschitz", gm.lipschitz_const, worst_lip,
                   worst_lip <= gm.lipschitz_const * (1 + 1e-9)),
        BoundCheck("growth_quadratic", gm.growth_const, worst_growth,
                   worst_growth <= gm.growth_const * (1 + 1e-9)),
    )
    return AssumptionReport(gm.name, (math.nan, math.nan), checks)

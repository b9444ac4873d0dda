"""Executable optimality checks for the controlled stochastic heat equation.

Everything here turns the optimality theory into finite-sample statistics:

* Hamiltonian and its correction-term variant for non-smooth problems,
* Monte Carlo value estimation over declared control families with caching,
* dynamic-programming and duality residuals on coupled ensembles,
* superdifferential inclusion probes (one-sided quotient tests over a
  shrinking schedule of time and space perturbations),
* necessary-condition and verification certificates with three-valued
  verdicts (Monte Carlo noise must never silently become a mathematical
  claim),
* a successive-approximation control optimizer built on the pointwise
  Hamiltonian minimizer and the adjoint solvers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .adjoint import (FirstAdjointPath, RegressionConfig, SecondAdjointPath,
                      build_mollified_terminal, solve_first_adjoint,
                      solve_second_adjoint, trace_form_array)
from .function_space import (Field, Grid, KernelField, heat_semigroup_array,
                             laplacian_array, spectral_basis)
from .lq_oracle import RiccatiPath, lq_value_batch, value_time_derivative
from .model import AffineFeedback, ControlBox, ControlLaw, NemytskiiModel, NoiseModel
from .simulate import (EnsembleTrajectory, simulate_perturbed, simulate_state,
                       subset_paths, variational_path)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Hamiltonian algebra
# ---------------------------------------------------------------------------

def hamiltonian_batch(model: NemytskiiModel, grid: Grid, x: np.ndarray,
                      u: np.ndarray, p: np.ndarray,
                      kernels: Optional[np.ndarray]) -> np.ndarray:
    """Running cost + drift pairing + half noise trace, per sample.

    ``kernels`` holds the curvature kernels (..., n, n); pass None to drop
    the trace term (only valid when it does not depend on the minimization
    argument, e.g. control-independent noise in the pointwise minimizer).
    """
    h = grid.h
    out = h * np.sum(model.l(x, u), axis=-1)
    out = out + h * np.sum(p * model.b(x, u), axis=-1)
    if kernels is not None:
        sig = model.sigma(x, u)
        out = out + 0.5 * trace_form_array(sig, kernels, h)
    return out


def hamiltonian(model: NemytskiiModel, x: Field, u, p: Field,
                kernel: Optional[KernelField]) -> float:
    kern = kernel.values[None] if kernel is not None else None
    return float(hamiltonian_batch(model, x.grid, x.values[None],
                                   np.atleast_1d(np.asarray(u, float))[None],
                                   p.values[None], kern)[0])


def correction_term_batch(model: NemytskiiModel, grid: Grid, x: np.ndarray,
                          u: np.ndarray, q: np.ndarray,
                          kernels: np.ndarray) -> np.ndarray:
    """tr(sigma(x,u)^* (q - P sigma(x,u))) per sample; nonpositive along
    optimal pairs, zero when the value function is twice differentiable."""
    h = grid.h
    sig = model.sigma(x, u)
    direct = h * np.sum(sig * q, axis=(-2, -1))
    return direct - trace_form_array(sig, kernels, h)


def correction_term(model: NemytskiiModel, x: Field, u, q: np.ndarray,
                    kernel: KernelField) -> float:
    return float(correction_term_batch(
        model, x.grid, x.values[None],
        np.atleast_1d(np.asarray(u, float))[None], q[None],
        kernel.values[None])[0])


def script_g_batch(model: NemytskiiModel, grid: Grid, x: np.ndarray,
                   u: np.ndarray, p: np.ndarray, kernels: np.ndarray,
                   q: np.ndarray, sigma_frozen: np.ndarray) -> np.ndarray:
    """Hamiltonian plus correction against the frozen optimal-pair diffusion.

    The asymmetry is deliberate: q and the kernel contraction against
    ``sigma_frozen`` (the diffusion at the reference pair) stay fixed while
    the outer diffusion varies with (x, u).
    """
    h = grid.h
    ham = hamiltonian_batch(model, grid, x, u, p, kernels)
    sig = model.sigma(x, u)
    cross = h * np.sum(sig * q, axis=(-2, -1))
    mixed = h * h * np.einsum("...im,...ij,...jm->...", sig, kernels, sigma_frozen)
    return ham + cross - mixed


def script_g(model: NemytskiiModel, x: Field, u, p: Field,
             kernel: KernelField, q: np.ndarray, sigma_frozen: np.ndarray) -> float:
    return float(script_g_batch(
        model, x.grid, x.values[None],
        np.atleast_1d(np.asarray(u, float))[None], p.values[None],
        kernel.values[None], q[None], sigma_frozen[None])[0])


# ---------------------------------------------------------------------------
# value estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlFamily:
    """A named finite collection of admissible control laws."""

    members: tuple[ControlLaw, ...]
    name: str = "family"

    def signature(self) -> str:
        return self.name + ":" + ",".join(m.name for m in self.members)


@dataclass
class ValueEstimate:
    mean: float
    se: float
    best: str
    per_member: dict


def estimate_value(model: NemytskiiModel, grid: Grid, noise: NoiseModel,
                   times: np.ndarray, t_index: int, x: np.ndarray,
                   family: ControlFamily, n_paths: int) -> ValueEstimate:
    """Minimum over the family of Monte Carlo cost estimates from (t, x).

    All members share the same noise streams (common random numbers), so
    the minimum is taken over strongly positively correlated estimates; the
    reported standard error is that of the minimizing member.
    """
    per_member = {}
    best: Optional[tuple[float, float, str]] = None
    for member in family.members:
        traj = simulate_state(model, grid, noise, x, member, times, n_paths,
                              start_index=t_index, store_states=False)
        costs = traj.total_cost()
        mean = float(np.mean(costs))
        se = float(np.std(costs, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
        per_member[member.name] = (mean, se)
        if best is None or mean < best[0]:
            best = (mean, se, member.name)
    assert best is not None, "family must not be empty"
    return ValueEstimate(mean=best[0], se=best[1], best=best[2],
                         per_member=per_member)


class ValueSource:
    """Interface for value evaluations used by probes and residual checks."""

    def value(self, t_index: int, x: np.ndarray) -> tuple[float, float]:
        raise NotImplementedError

    def value_batch(self, t_index: int, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        means = np.empty(xs.shape[0])
        ses = np.empty(xs.shape[0])
        for k in range(xs.shape[0]):
            means[k], ses[k] = self.value(t_index, xs[k])
        return means, ses


class OracleValueSource(ValueSource):
    """Exact quadratic values from a Riccati path; zero standard error."""

    def __init__(self, rpath: RiccatiPath):
        self.rpath = rpath

    def value(self, t_index, x):
        return float(lq_value_batch(self.rpath, t_index, np.asarray(x)[None])[0]), 0.0

    def value_batch(self, t_index, xs):
        return lq_value_batch(self.rpath, t_index, xs), np.zeros(xs.shape[0])


class MCValueSource(ValueSource):
    """Family-infimum Monte Carlo values, memoized by (time index, state).

    Each distinct evaluation point derives its own noise stage from the
    cache key, so repeated queries are deterministic and nested probes reuse
    completed work.
    """

    def __init__(self, model: NemytskiiModel, grid: Grid, noise: NoiseModel,
                 times: np.ndarray, family: ControlFamily, n_paths: int):
        self.model = model
        self.grid = grid
        self.noise = noise
        self.times = times
        self.family = family
        self.n_paths = n_paths
        self._cache: dict = {}

    def value(self, t_index, x):
        x = np.asarray(x, dtype=np.float64)
        key = (t_index, x.tobytes())
        if key not in self._cache:
            stage = hash(key) & 0x7FFFFFFF
            est = estimate_value(self.model, self.grid, self.noise.derive(stage),
                                 self.times, t_index, x, self.family, self.n_paths)
            self._cache[key] = (est.mean, est.se)
        return self._cache[key]


def dpp_residual(model: NemytskiiModel, grid: Grid, noise: NoiseModel,
                 times: np.ndarray, s_index: int, t_index: int, x: np.ndarray,
                 family: ControlFamily, inner_source: ValueSource,
                 n_paths: int) -> dict:
    """Dynamic-programming residual between s and t > s.

    V(s, x) minus the family-minimum of expected running cost plus the
    continuation value at t; the infimum over a finite family can only
    overshoot, so the residual is nonnegative up to noise for consistent
    sources.
    """
    if t_index < s_index:
        raise ValueError("need s <= t")
    outer = estimate_value(model, grid, noise.derive(11), times, s_index, x,
                           family, n_paths)
    if t_index == s_index:
        return {"residual": 0.0, "se": outer.se, "outer": outer.mean,
                "inner": outer.mean}
    dt = float(times[1] - times[0])
    best_inner: Optional[tuple[float, float]] = None
    for member in family.members:
        traj = simulate_state(model, grid, noise.derive(12), x, member, times,
                              n_paths, start_index=s_index,
                              store_states=True, record_cost=False)
        run = np.zeros(n_paths)
        for i in range(s_index, t_index):
            run += dt * grid.h * np.sum(model.l(traj.state(i), traj.control(i)),
                                        axis=-1)
        cont, cont_se = inner_source.value_batch(t_index, traj.state(t_index))
        total = run + cont
        mean = float(np.mean(total))
        se = float(np.std(total, ddof=1) / math.sqrt(n_paths))
        se = math.sqrt(se**2 + float(np.mean(cont_se))**2)
        if best_inner is None or mean < best_inner[0]:
            best_inner = (mean, se)
    assert best_inner is not None
    combined_se = math.sqrt(outer.se**2 + best_inner[1]**2)
    return {"residual": outer.mean - best_inner[0], "se": combined_se,
            "outer": outer.mean, "inner": best_inner[0]}


# ---------------------------------------------------------------------------
# superdifferential probes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuperdiffCandidate:
    """A proposed element (G, p, P) of the parabolic superdifferential."""

    g: float
    p: np.ndarray
    kernel: np.ndarray  # symmetric (n, n)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.kernel))
                and math.isfinite(self.g)):
            raise ValueError("candidate entries must be finite")
        if not np.array_equal(self.kernel, self.kernel.T):
            raise ValueError("candidate kernel must be symmetric")

    def shifted(self, g_shift: float = 0.0,
                cone: Optional[np.ndarray] = None) -> "SuperdiffCandidate":
        kern = self.kernel if cone is None else self.kernel + cone
        kern = 0.5 * (kern + kern.T)
        return SuperdiffCandidate(self.g + g_shift, self.p, kern)


def superdiff_quotient(candidate: SuperdiffCandidate, grid: Grid, tau: float,
                       z: np.ndarray, v_plus: float, v_base: float) -> float:
    """One-sided second-order Taylor quotient of the value increment."""
    h = grid.h
    znorm2 = h * float(np.dot(z, z))
    denom = tau + znorm2
    if denom < 1e-12:
        raise ValueError("perturbation too small: tau + |z|^2 under 1e-12")
    num = (v_plus - v_base - candidate.g * tau
           - h * float(np.dot(candidate.p, z))
           - 0.5 * h * h * float(z @ candidate.kernel @ z))
    return num / denom


@dataclass
class ProbeReport:
    t_index: int
    tolerance: float
    samples: list = field(default_factory=list)
    verdict: str = "inconclusive"

    @property
    def quotients(self) -> np.ndarray:
        return np.array([s["quotient"] for s in self.samples])

    @property
    def percentile95(self) -> float:
        return float(np.percentile(self.quotients, 95)) if self.samples else math.nan

    @property
    def max_quotient(self) -> float:
        return float(np.max(self.quotients)) if self.samples else math.nan

    def finalize(self) -> "ProbeReport":
        if not self.samples:
            self.verdict = "inconclusive"
            return self
        ses = np.array([s["se"] for s in self.samples])
        if 3.0 * float(np.median(ses)) > self.tolerance:
            self.verdict = "inconclusive"
        elif self.percentile95 <= self.tolerance:
            self.verdict = "pass"
        else:
            self.verdict = "fail"
        return self

    def as_dict(self) -> dict:
        return {"t_index": self.t_index, "tolerance": self.tolerance,
                "verdict": self.verdict, "percentile95": self.percentile95,
                "max_quotient": self.max_quotient, "samples": self.samples}


def probe_schedule(grid: Grid, times: np.ndarray, t_index: int,
                   tau_fractions: Sequence[float] = (0.08, 0.04, 0.02, 0.01),
                   z_norms: Sequence[float] = (0.2, 0.1, 0.05, 0.025),
                   n_random: int = 4, seed: int = 2718,
                   modes: int = 4) -> list[tuple[int, np.ndarray]]:
    """Default shrinking sample set: paired (tau, |z|) levels over mode and
    seeded random directions, both signs."""
    dt = float(times[1] - times[0])
    horizon = float(times[-1] - times[0])
    remaining = len(times) - 1 - t_index
    basis = spectral_basis(grid)
    rng = np.random.default_rng(seed)
    directions = []
    for k in range(min(modes, grid.n)):
        directions.append(basis.vectors[:, k])
    for _ in range(n_random):
        v = rng.normal(size=grid.n)
        v /= math.sqrt(grid.h) * np.linalg.norm(v)
        directions.append(v)
    out = []
    for frac, znorm in zip(tau_fractions, z_norms):
        tau_steps = max(1, min(remaining, round(frac * horizon / dt)))
        for d in directions:
            for sign in (1.0, -1.0):
                out.append((tau_steps, sign * znorm * d))
    return out


def probe_inclusion(candidate: SuperdiffCandidate, grid: Grid,
                    times: np.ndarray, t_index: int, x_t: np.ndarray,
                    source: ValueSource,
                    schedule: Sequence[tuple[int, np.ndarray]],
                    tolerance: float = 0.02) -> ProbeReport:
    """Inclusion probe: every quotient over the schedule, one-sided pass if
    the 95th percentile stays below tolerance, inconclusive when the value
    source's noise dominates the tolerance."""
    dt = float(times[1] - times[0])
    report = ProbeReport(t_index=t_index, tolerance=tolerance)
    v_base, se_base = source.value(t_index, x_t)
    for tau_steps, z in schedule:
        tau = tau_steps * dt
        v_plus, se_plus = source.value(t_index + tau_steps, x_t + z)
        quotient = superdiff_quotient(candidate, grid, tau, z, v_plus, v_base)
        denom = tau + grid.h * float(np.dot(z, z))
        report.samples.append({
            "tau": tau, "z_norm": math.sqrt(grid.h * float(np.dot(z, z))),
            "quotient": quotient, "se": (se_plus + se_base) / denom,
        })
    return report.finalize()


def probe_space(candidate: SuperdiffCandidate, grid: Grid, times: np.ndarray,
                t_index: int, x_t: np.ndarray, source: ValueSource,
                z_samples: Sequence[np.ndarray],
                tolerance: float = 0.02) -> tuple[ProbeReport, ProbeReport]:
    """Space-only probes: the second-order quotient restricted to tau = 0,
    plus the first-order form normalized by |z| with the curvature term
    dropped (bounded by |P| |z|^2, so the gradient alone decides)."""
    report2 = ProbeReport(t_index=t_index, tolerance=tolerance)
    report1 = ProbeReport(t_index=t_index, tolerance=tolerance)
    v_base, se_base = source.value(t_index, x_t)
    h = grid.h
    for z in z_samples:
        v_plus, se_plus = source.value(t_index, x_t + z)
        znorm2 = h * float(np.dot(z, z))
        quotient = superdiff_quotient(candidate, grid, 0.0, z, v_plus, v_base)
        report2.samples.append({"tau": 0.0, "z_norm": math.sqrt(znorm2),
                                "quotient": quotient,
                                "se": (se_plus + se_base) / znorm2})
        znorm = math.sqrt(znorm2)
        first = (v_plus - v_base - h * float(np.dot(candidate.p, z))) / znorm
        report1.samples.append({"tau": 0.0, "z_norm": znorm, "quotient": first,
                                "se": (se_plus + se_base) / znorm})
    return report2.finalize(), report1.finalize()


def probe_time(candidate: SuperdiffCandidate, grid: Grid, times: np.ndarray,
               t_index: int, x_t: np.ndarray, source: ValueSource,
               tau_steps_list: Sequence[int],
               tolerance: float = 0.02) -> ProbeReport:
    """Time-only probe: quotients restricted to z = 0."""
    dt = float(times[1] - times[0])
    report = ProbeReport(t_index=t_index, tolerance=tolerance)
    v_base, se_base = source.value(t_index, x_t)
    zero = np.zeros(grid.n)
    for tau_steps in tau_steps_list:
        tau = tau_steps * dt
        v_plus, se_plus = source.value(t_index + tau_steps, x_t)
        quotient = superdiff_quotient(candidate, grid, tau, zero, v_plus, v_base)
        report.samples.append({"tau": tau, "z_norm": 0.0, "quotient": quotient,
                               "se": (se_plus + se_base) / tau})
    return report.finalize()


def cone_property_on_samples(report: ProbeReport, grid: Grid,
                             g_shift: float, cone: np.ndarray,
                             schedule: Sequence[tuple[int, np.ndarray]],
                             times: np.ndarray) -> list[float]:
    """Re-evaluate stored quotients for the shifted candidate (G + shift,
    p, P + S) purely algebraically: raising G subtracts shift tau/(tau+|z|^2)
    and a positive cone direction subtracts its quadratic form."""
    dt = float(times[1] - times[0])
    h = grid.h
    out = []
    for sample, (tau_steps, z) in zip(report.samples, schedule):
        tau = tau_steps * dt
        denom = tau + h * float(np.dot(z, z))
        shift = (-g_shift * tau - 0.5 * h * h * float(z @ cone @ z)) / denom
        out.append(sample["quotient"] + shift)
    return out


# ---------------------------------------------------------------------------
# candidate construction
# ---------------------------------------------------------------------------

def adjoint_candidate(model: NemytskiiModel, traj: EnsembleTrajectory,
                      first: FirstAdjointPath, second: SecondAdjointPath,
                      t_index: int, path: int = 0) -> SuperdiffCandidate:
    """Boundary candidate built from the solved adjoints at one probe point:
    G = -<Lap x, p> - script-G(t, x, u), p the first adjoint, P the
    mollified second-order kernel."""
    grid = traj.grid
    h = grid.h
    x = traj.state(t_index)[path]
    u = traj.control(t_index)[path] if t_index < traj.n_steps else \
        traj.control(t_index - 1)[path]
    p = first.p_at(t_index)[path]
    q = first.q_at(min(t_index, traj.n_steps - 1))[path]
    kern = second.kernels[t_index][path]
    sigma_frozen = model.sigma(x, u)
    g_script = script_g_batch(model, grid, x[None], u[None], p[None],
                              kern[None], q[None], sigma_frozen[None])[0]
    lap_pairing = h * float(laplacian_array(x, grid) @ p)
    return SuperdiffCandidate(g=-lap_pairing - float(g_script), p=p, kernel=kern)


def oracle_candidate(rpath: RiccatiPath, t_index: int,
                     x: np.ndarray) -> SuperdiffCandidate:
    """Smooth-case candidate from the quadratic value function: its time
    derivative, gradient 2 R x and Hessian kernel 2 R / h."""
    grid = rpath.spec.grid
    r_mat = rpath.matrices[t_index]
    p = 2.0 * (r_mat @ x)
    kern = 2.0 * r_mat / grid.h
    g = value_time_derivative(rpath, t_index, x)
    return SuperdiffCandidate(g=g, p=p, kernel=kern)


# ---------------------------------------------------------------------------
# duality residuals
# ---------------------------------------------------------------------------

def duality_first_residual(model: NemytskiiModel, base: EnsembleTrajectory,
                           first: FirstAdjointPath, t_index: int,
                           tau_steps: int, z: np.ndarray) -> dict:
    """First-order duality residual on the coupled ensemble.

    Pairs the linearized cost variation against the adjoint at the restart
    time plus the quadratic and remainder corrections; the identity holds
    exactly for the discrete scheme up to regression and Monte Carlo error.
    """
    grid = base.grid
    h = grid.h
    dt = base.dt
    pert = simulate_perturbed(base, model, t_index, tau_steps, z)
    vp = variational_path(base, pert, model)
    j = vp.start_index
    n_steps = base.n_steps

    lhs = np.zeros(base.n_paths)
    quad = np.zeros(base.n_paths)
    remainder = np.zeros(base.n_paths)
    for r in range(j, n_steps):
        x = base.state(r)
        u = base.control(r)
        y = vp.y_at(r)
        p_r = first.p_at(r)
        q_r = first.q_at(r)
        lhs += dt * h * np.sum(model.l_x(x, u) * y, axis=-1)
        quad += dt * 0.5 * h * np.sum(p_r * model.b_xx(x, u) * y * y, axis=-1)
        quad += dt * 0.5 * h * np.einsum(
            "pnm,pnm,pn->p", q_r, model.sigma_xx(x, u), y * y)
        remainder += dt * h * np.sum(p_r * vp.phi2[r - j], axis=-1)
        remainder += dt * h * np.einsum("pnm,pnm->p", q_r, vp.psi2[r - j])
    lhs += h * np.sum(model.h_x(base.state(n_steps)) * vp.y_at(n_steps), axis=-1)
    rhs_pairing = h * np.sum(first.p_at(j) * vp.y_at(j), axis=-1)

    resid = lhs - rhs_pairing - quad - remainder
    n = base.n_paths
    return {
        "residual": float(np.mean(resid)),
        "se": float(np.std(resid, ddof=1) / math.sqrt(n)),
        "remainder": float(np.mean(remainder)),
        "remainder_se": float(np.std(remainder, ddof=1) / math.sqrt(n)),
        "lhs": float(np.mean(lhs)),
        "tau": tau_steps * dt,
        "z_norm2": h * float(np.dot(z, z)),
    }


def duality_second_residuals(model: NemytskiiModel, base: EnsembleTrajectory,
                             first: FirstAdjointPath, eta: float,
                             pairs: Sequence[tuple[int, np.ndarray]],
                             t_index: int,
                             config: RegressionConfig = RegressionConfig()
                             ) -> list[dict]:
    """Second-order (kernel) duality residuals for a batch of perturbations.

    One backward kernel solve serves every (tau, z) pair: a step callback
    accumulates the remainder pairings against the tensor sources while the
    snapshots at each restart index provide the quadratic form on the left.
    """
    grid = base.grid
    h = grid.h
    dt = base.dt
    n_steps = base.n_steps

    variations = []
    for tau_steps, z in pairs:
        pert = simulate_perturbed(base, model, t_index, tau_steps, z)
        variations.append(variational_path(base, pert, model))
    starts = [vp.start_index for vp in variations]

    remainders = [np.zeros(base.n_paths) for _ in pairs]

    def accumulate(r, kern, q_kern):
        x = base.state(r)
        u = base.control(r)
        sig_x = model.sigma_x(x, u)
        for k, vp in enumerate(variations):
            if r < starts[k] or r >= n_steps:
                continue
            y = vp.y_at(r)
            phi1 = vp.phi1[r - starts[k]]
            psi1 = vp.psi1[r - starts[k]]
            sxy = sig_x * y[..., None]
            pair_phi = 2.0 * np.einsum("pi,pij,pj->p", y, kern, phi1)
            pair_phi += 2.0 * np.einsum("pim,pij,pjm->p", sxy, kern, psi1)
            pair_phi += np.einsum("pim,pij,pjm->p", psi1, kern, psi1)
            pair_psi = 2.0 * np.einsum("pi,pijm,pjm->p", y, q_kern, psi1)
            remainders[k] += dt * h * h * (pair_phi + pair_psi)

    second = solve_second_adjoint(model, base, first, eta, config=config,
                                  snapshot_indices=sorted(set(starts)),
                                  step_callback=accumulate)

    terminal = build_mollified_terminal(model, base.state(n_steps), grid, eta)
    out = []
    for k, (tau_steps, z) in enumerate(pairs):
        vp = variations[k]
        j = starts[k]
        lhs_run = np.zeros(base.n_paths)
        for r in range(j, n_steps):
            x = base.state(r)
            u = base.control(r)
            y = vp.y_at(r)
            dens = (model.l_xx(x, u) + model.b_xx(x, u) * first.p_at(r)
                    + np.einsum("pnm,pnm->pn", model.sigma_xx(x, u),
                                first.q_at(r)))
            lhs_run += dt * h * np.sum(dens * y * y, axis=-1)
        y_t = vp.y_at(n_steps)
        lhs_term = h * h * np.einsum("pi,pij,pj->p", y_t, terminal, y_t)
        y_j = vp.y_at(j)
        rhs_pairing = h * h * np.einsum("pi,pij,pj->p", y_j,
                                        second.kernels[j], y_j)
        resid = lhs_run + lhs_term - rhs_pairing - remainders[k]
        n = base.n_paths
        out.append({
            "residual": float(np.mean(resid)),
            "se": float(np.std(resid, ddof=1) / math.sqrt(n)),
            "remainder": float(np.mean(remainders[k])),
            "remainder_se": float(np.std(remainders[k], ddof=1) / math.sqrt(n)),
            "tau": tau_steps * dt,
            "z_norm2": h * float(np.dot(z, z)),
        })
    return out


def remainder_slope(rows: Sequence[dict], key: str = "remainder") -> float:
    """Log-log slope of |remainder| against tau + |z|^2 across rows."""
    xs, ys = [], []
    for row in rows:
        size = row["tau"] + row["z_norm2"]
        val = abs(row[key])
        if val > 0 and size > 0:
            xs.append(math.log(size))
            ys.append(math.log(val))
    if len(xs) < 2:
        return math.nan
    slope, _ = np.polyfit(xs, ys, 1)
    return float(slope)


def correction_report(model: NemytskiiModel, grid: Grid, times: np.ndarray,
                      control: ControlLaw, x0: np.ndarray, noise: NoiseModel,
                      probe_indices: Sequence[int], n_replications: int = 6,
                      n_paths: int = 384, kernel_paths: int = 96,
                      eta: float = 2.5e-3, substeps: int = 4,
                      config: RegressionConfig = RegressionConfig(n_modes=6)
                      ) -> list[dict]:
    """Correction-term statistics over independently replicated ensembles.

    Each replication simulates a fresh ensemble along the control, solves
    both adjoints, and records the ensemble-mean correction at every probe
    time.  Reported per probe time: the replication mean with its standard
    error (the two-sided smooth-case check) and the 95th percentile of the
    replicated estimates (the one-sided nonpositivity check).  Replication
    quantiles are the honest surrogate for the almost-sure statement: the
    tail of raw per-path fitted values reflects regression edge artifacts
    rather than the adapted correction process, so per-path quantiles are
    reported only as a diagnostic.
    """
    per_probe = {i: [] for i in probe_indices}
    per_path_q95 = {i: [] for i in probe_indices}
    for rep in range(n_replications):
        rep_noise = noise.derive(1000 + rep)
        traj = simulate_state(model, grid, rep_noise, x0, control, times, n_paths)
        first = solve_first_adjoint(model, traj, config)
        sub = subset_paths(traj, kernel_paths)
        first_sub = FirstAdjointPath(
            grid=first.grid, times=first.times, start_index=first.start_index,
            p=first.p[:, :kernel_paths], q=first.q[:, :kernel_paths],
            core=first.core[:, :kernel_paths], max_condition=first.max_condition)
        second = solve_second_adjoint(model, sub, first_sub, eta, config=config,
                                      snapshot_indices=probe_indices,
                                      substeps=substeps)
        for i in probe_indices:
            x = sub.state(i)
            u = sub.control(min(i, sub.n_steps - 1))
            corr = correction_term_batch(model, grid, x, u, first_sub.q_at(i),
                                         second.kernels[i])
            per_probe[i].append(float(np.mean(corr)))
            per_path_q95[i].append(float(np.percentile(corr, 95)))
    rows = []
    for i in probe_indices:
        vals = np.array(per_probe[i])
        se = float(vals.std(ddof=1) / math.sqrt(len(vals)))
        rows.append({
            "t_index": i,
            "mean": float(vals.mean()),
            "se": se,
            "replication_q95": float(np.percentile(vals, 95)),
            "per_path_q95": float(np.mean(per_path_q95[i])),
            "two_sided_pass": bool(abs(vals.mean()) <= 3.0 * se),
            "one_sided_pass": bool(np.percentile(vals, 95) <= 3.0 * se),
        })
    return rows


# ---------------------------------------------------------------------------
# time-increment checks
# ---------------------------------------------------------------------------

def increment_checks(model: NemytskiiModel, base: EnsembleTrajectory,
                     first: FirstAdjointPath, second: SecondAdjointPath,
                     t_index: int, tau_steps_list: Sequence[int],
                     z: np.ndarray) -> dict:
    """Residuals of the three increment limits at a probe time.

    (a) first-adjoint pairing increment over tau against its drift limit,
    (b) kernel quadratic form of the state increment against the noise
        trace, (c) mixed kernel pairing of a fixed z against the state
        increment, normalized by tau + |z|^2.
    """
    grid = base.grid
    h = grid.h
    dt = base.dt
    x_t = base.state(t_index)
    u_t = base.control(t_index)
    p_t = first.p_at(t_index)
    q_t = first.q_at(t_index)
    sig_t = model.sigma(x_t, u_t)
    kern_t = second.kernels[t_index]

    drift = laplacian_array(x_t, grid) + model.b(x_t, u_t)
    limit_a = h * np.sum(p_t * drift, axis=-1) + h * np.einsum(
        "pnm,pnm->p", q_t, sig_t)
    limit_b = trace_form_array(sig_t, kern_t, h)

    rows_a, rows_b, rows_c = [], [], []
    for tau_steps in tau_steps_list:
        tau = tau_steps * dt
        idx = t_index + tau_steps
        dx = base.state(idx) - x_t
        p_plus = first.p_at(idx)
        kern_plus = second.kernels[idx]
        stat_a = h * np.sum(p_plus * dx, axis=-1) / tau - limit_a
        stat_b = h * h * np.einsum("pi,pij,pj->p", dx, kern_plus, dx) / tau - limit_b
        denom = tau + h * float(np.dot(z, z))
        stat_c = h * h * np.einsum("i,pij,pj->p", z, kern_plus, dx) / denom
        n = base.n_paths
        rows_a.append({"tau": tau, "residual": float(np.mean(stat_a)),
                       "se": float(np.std(stat_a, ddof=1) / math.sqrt(n))})
        rows_b.append({"tau": tau, "residual": float(np.mean(stat_b)),
                       "se": float(np.std(stat_b, ddof=1) / math.sqrt(n))})
        rows_c.append({"tau": tau, "residual": float(np.mean(stat_c)),
                       "se": float(np.std(stat_c, ddof=1) / math.sqrt(n))})
    return {"pairing": rows_a, "quadratic": rows_b, "mixed": rows_c}


# ---------------------------------------------------------------------------
# necessary condition and verification certificate
# ---------------------------------------------------------------------------

CandidateProvider = Callable[[int], tuple[np.ndarray, np.ndarray, np.ndarray]]
"""Maps a time index to per-path (G, p, kernels) arrays of shapes
(paths,), (paths, n), (paths, n, n)."""


def oracle_candidate_provider(rpath: RiccatiPath,
                              traj: EnsembleTrajectory) -> CandidateProvider:
    grid = rpath.spec.grid

    def provide(index: int):
        x = traj.state(index)
        r_mat = rpath.matrices[index]
        p = 2.0 * (x @ r_mat.T)
        kerns = np.broadcast_to(2.0 * r_mat / grid.h,
                                (x.shape[0],) + r_mat.shape)
        g = np.array([value_time_derivative(rpath, index, x[k])
                      for k in range(x.shape[0])])
        return g, p, kerns

    return provide


def adjoint_candidate_provider(model: NemytskiiModel, traj: EnsembleTrajectory,
                               first: FirstAdjointPath,
                               second: SecondAdjointPath) -> CandidateProvider:
    grid = traj.grid
    h = grid.h

    def provide(index: int):
        x = traj.state(index)
        u = traj.control(min(index, traj.n_steps - 1))
        p = first.p_at(index)
        q = first.q_at(min(index, traj.n_steps - 1))
        kerns = second.kernels[index]
        sigma_frozen = model.sigma(x, u)
        g_script = script_g_batch(model, grid, x, u, p, kerns, q, sigma_frozen)
        lap_pairing = h * np.sum(laplacian_array(x, grid) * p, axis=-1)
        return -lap_pairing - g_script, p, kerns

    return provide


def necessary_condition_check(model: NemytskiiModel, traj: EnsembleTrajectory,
                              provider: CandidateProvider,
                              probe_indices: Sequence[int],
                              tolerance: float = 1e-3) -> list[dict]:
    """Pointwise necessary-condition statistic at probe times: the candidate
    triple must make G + <Lap x, p> + Hamiltonian nonnegative up to noise."""
    grid = traj.grid
    h = grid.h
    rows = []
    for index in probe_indices:
        x = traj.state(index)
        u = traj.control(min(index, traj.n_steps - 1))
        g, p, kerns = provider(index)
        ham = hamiltonian_batch(model, grid, x, u, p, kerns)
        stat = g + h * np.sum(laplacian_array(x, grid) * p, axis=-1) + ham
        mean = float(np.mean(stat))
        se = float(np.std(stat, ddof=1) / math.sqrt(traj.n_paths))
        rows.append({"t_index": index, "statistic": mean, "se": se,
                     "passed": mean >= -3.0 * se - tolerance})
    return rows


@dataclass
class Certificate:
    """Verification-certificate outcome for a candidate control."""

    estimate: float
    se: float
    tolerance: float
    verdict: str
    prerequisites: dict

    def as_dict(self) -> dict:
        return {"estimate": self.estimate, "se": self.se,
                "tolerance": self.tolerance, "verdict": self.verdict,
                "prerequisites": self.prerequisites}


def verify_control(model: NemytskiiModel, traj: EnsembleTrajectory,
                   provider: CandidateProvider,
                   eval_indices: Optional[Sequence[int]] = None,
                   tolerance: float = 1e-3,
                   prerequisites: Optional[dict] = None) -> Certificate:
    """Integrated verification statistic along the candidate control's
    trajectory; a pass certifies optimality modulo the probabilistic
    tolerances, provided the superdifferential and regularity prerequisites
    were established separately."""
    grid = traj.grid
    h = grid.h
    dt = traj.dt
    prereq = dict(prerequisites or {})
    if not prereq:
        prereq["note"] = "no prerequisite checks recorded"
    if eval_indices is None:
        eval_indices = range(traj.start_index, traj.n_steps)
    eval_indices = sorted(eval_indices)

    integrand = np.zeros((len(eval_indices), traj.n_paths))
    for row, index in enumerate(eval_indices):
        x = traj.state(index)
        u = traj.control(min(index, traj.n_steps - 1))
        g, p, kerns = provider(index)
        ham = hamiltonian_batch(model, grid, x, u, p, kerns)
        integrand[row] = g + h * np.sum(laplacian_array(x, grid) * p, axis=-1) + ham

    weights = _integration_weights(np.asarray(eval_indices, dtype=float) * dt,
                                   (traj.n_steps - traj.start_index) * dt,
                                   traj.start_index * dt)
    totals = weights @ integrand
    mean = float(np.mean(totals))
    se = float(np.std(totals, ddof=1) / math.sqrt(traj.n_paths))
    missing = [k for k, v in prereq.items() if v is False]
    if missing:
        verdict = "inconclusive"
    elif mean <= 3.0 * se + tolerance:
        verdict = "pass"
    else:
        verdict = "fail"
    return Certificate(estimate=mean, se=se, tolerance=tolerance,
                       verdict=verdict, prerequisites=prereq)


def _integration_weights(points: np.ndarray, t_end: float,
                         t_start: float) -> np.ndarray:
    """Trapezoid weights on a possibly coarse evaluation subgrid covering
    [t_start, t_end]; a single point integrates as the full interval."""
    if points.size == 1:
        return np.array([t_end - t_start])
    w = np.zeros(points.size)
    mids = 0.5 * (points[1:] + points[:-1])
    edges = np.concatenate(([t_start], mids, [t_end]))
    return np.diff(edges)


# ---------------------------------------------------------------------------
# regularity scans
# ---------------------------------------------------------------------------

def regularity_checks(model: NemytskiiModel, grid: Grid, times: np.ndarray,
                      source: ValueSource, x_samples: Sequence[np.ndarray],
                      t_indices: Sequence[int], tau_steps: int = 4) -> dict:
    """Sampled growth, semiconcavity, and terminal-consistency diagnostics.

    (a) one-sided time growth constant for [V(t+tau,x) - V(t,x)] / tau
        against 1 + |x|_{H1}^2, (b) midpoint semiconcavity constant,
        (c) decay of (V(t,x) - terminal cost of the heat-flowed state)^+
        as t approaches the horizon.
    """
    h = grid.h
    dt = float(times[1] - times[0])
    growth_c = 0.0
    for t_index in t_indices:
        for x in x_samples:
            v0, _ = source.value(t_index, x)
            v1, _ = source.value(t_index + tau_steps, x)
            h1sq = -h * float(laplacian_array(x, grid) @ x)
            growth_c = max(growth_c, (v1 - v0) / (tau_steps * dt) / (1.0 + h1sq))

    semi_c = 0.0
    pairs = [(a, b) for i, a in enumerate(x_samples)
             for b in x_samples[i + 1:]]
    for t_index in t_indices:
        for x, y in pairs:
            vx, _ = source.value(t_index, x)
            vy, _ = source.value(t_index, y)
            vm, _ = source.value(t_index, 0.5 * (x + y))
            d2 = h * float(np.dot(x - y, x - y))
            if d2 > 1e-14:
                semi_c = max(semi_c, (0.5 * vx + 0.5 * vy - vm) * 4.0 / d2)

    n_last = len(times) - 1
    terminal_rows = []
    for t_index in sorted({n_last - 8, n_last - 4, n_last - 2, n_last - 1}):
        worst = 0.0
        r = float(times[n_last] - times[t_index])
        for x in x_samples:
            v, _ = source.value(t_index, x)
            flowed = heat_semigroup_array(r, x, grid)
            target = h * float(np.sum(model.h(flowed)))
            worst = max(worst, max(v - target, 0.0))
        terminal_rows.append({"t_index": t_index, "gap": worst})
    return {"growth_constant": growth_c, "semiconcavity_constant": semi_c,
            "terminal_consistency": terminal_rows}


# ---------------------------------------------------------------------------
# pointwise Hamiltonian minimization and control optimization
# ---------------------------------------------------------------------------

def argmin_hamiltonian(model: NemytskiiModel, grid: Grid, x: np.ndarray,
                       p: np.ndarray, kernel: Optional[np.ndarray],
                       box: ControlBox, grid_points: int = 33,
                       refine: bool = True, refine_tol: float = 1e-6) -> np.ndarray:
    """Pointwise Hamiltonian minimizer over the control box.

    Scans a product grid (first hit wins, so exact ties resolve to the
    lexicographically smallest point) and, for scalar controls, refines the
    bracketing cell by golden-section search.
    """
    axes = [np.linspace(box.lower[d], box.upper[d], grid_points)
            for d in range(box.dim)]
    mesh = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")],
                    axis=-1)
    kerns = None if kernel is None else np.broadcast_to(
        kernel, (mesh.shape[0],) + kernel.shape)
    values = hamiltonian_batch(model, grid, np.broadcast_to(
        x, (mesh.shape[0],) + x.shape), mesh, np.broadcast_to(
        p, (mesh.shape[0],) + p.shape), kerns)
    best = int(np.argmin(values))
    u = mesh[best]
    if refine and box.dim == 1:
        lo = max(float(box.lower[0]), float(u[0] - (axes[0][1] - axes[0][0])))
        hi = min(float(box.upper[0]), float(u[0] + (axes[0][1] - axes[0][0])))

        def scalar_ham(v):
            vv = np.array([[v]])
            kern1 = None if kernel is None else kernel[None]
            return float(hamiltonian_batch(model, grid, x[None], vv,
                                           p[None], kern1)[0])

        u = np.array([_golden_section(scalar_ham, lo, hi, refine_tol)])
    return u


def _golden_section(f, lo: float, hi: float, tol: float) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _argmin_batch(model: NemytskiiModel, grid: Grid, x: np.ndarray,
                  p: np.ndarray, kernels: Optional[np.ndarray],
                  box: ControlBox, grid_points: int = 17,
                  golden_iters: int = 32) -> np.ndarray:
    """Vectorized scalar-control argmin across an ensemble: coarse grid
    bracket then simultaneous golden-section on all paths."""
    if box.dim != 1:
        return np.stack([argmin_hamiltonian(
            model, grid, x[k], p[k],
            None if kernels is None else kernels[k], box, grid_points)
            for k in range(x.shape[0])])
    n_paths = x.shape[0]
    grid_u = np.linspace(box.lower[0], box.upper[0], grid_points)
    values = np.empty((grid_points, n_paths))
    for k, uval in enumerate(grid_u):
        u = np.full((n_paths, 1), uval)
        values[k] = hamiltonian_batch(model, grid, x, u, p, kernels)
    best = np.argmin(values, axis=0)
    du = grid_u[1] - grid_u[0]
    a = np.maximum(grid_u[best] - du, box.lower[0])
    b = np.minimum(grid_u[best] + du, box.upper[0])
    invphi = (math.sqrt(5.0) - 1.0) / 2.0

    def ham(u_vec):
        return hamiltonian_batch(model, grid, x, u_vec[:, None], p, kernels)

    for _ in range(golden_iters):
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        left = ham(c) < ham(d)
        b = np.where(left, d, b)
        a = np.where(left, a, c)
    return (0.5 * (a + b))[:, None]


@dataclass
class OptimizeResult:
    control: ControlLaw
    iterations: int
    converged: bool
    gap_history: list
    cost_history: list
    damping_history: list


def optimize_control(model: NemytskiiModel, grid: Grid, noise: NoiseModel,
                     x0: np.ndarray, times: np.ndarray, box: ControlBox,
                     n_paths: int = 512, max_iterations: int = 20,
                     damping: float = 1.0, gap_tolerance: float = 1e-3,
                     regression: RegressionConfig = RegressionConfig(),
                     ridge: float = 1e-8,
                     initial: Optional[ControlLaw] = None) -> OptimizeResult:
    """Successive approximation toward the pointwise Hamiltonian minimizer.

    Each sweep simulates an ensemble under the current affine feedback,
    solves the first-order adjoint (and the kernel adjoint only when the
    noise is control-dependent), replaces the control at every (time, path)
    by a damped step toward the minimizer, and refits the affine feedback
    by ridge regression on nodal states.  Cost increases beyond the Monte
    Carlo allowance reject the sweep and halve the damping.
    """
    n_steps = len(times) - 1
    n = grid.n
    d_u = box.dim
    if initial is None:
        control: ControlLaw = AffineFeedback(np.zeros((n_steps, d_u)),
                                             np.zeros((n_steps, d_u, n)), box)
    else:
        control = initial

    gap_history: list[float] = []
    cost_history: list[float] = []
    damping_history: list[float] = []
    prev_cost = math.inf
    prev_se = 0.0
    converged = False
    iteration = 0
    kernel_snapshots = None

    for iteration in range(1, max_iterations + 1):
        traj = simulate_state(model, grid, noise, x0, control, times, n_paths)
        costs = traj.total_cost()
        cost = float(np.mean(costs))
        cost_se = float(np.std(costs, ddof=1) / math.sqrt(n_paths))
        if cost > prev_cost + 3.0 * (cost_se + prev_se) and damping > 1e-3:
            damping *= 0.5
            logger.info("cost increased (%.6g > %.6g); damping halved to %g",
                        cost, prev_cost, damping)
            damping_history.append(damping)
            continue
        prev_cost, prev_se = cost, cost_se
        cost_history.append(cost)
        damping_history.append(damping)

        first = solve_first_adjoint(model, traj, regression)
        if model.sigma_depends_on_u:
            snaps = list(range(0, n_steps + 1, max(1, n_steps // 16)))
            second = solve_second_adjoint(model, traj, first, eta=2.5e-3,
                                          config=regression,
                                          snapshot_indices=snaps)
            kernel_snapshots = second

        offset = np.zeros((n_steps, d_u))
        gain = np.zeros((n_steps, d_u, n))
        gap = 0.0
        dt = float(times[1] - times[0])
        for i in range(n_steps):
            x = traj.state(i)
            u_cur = traj.control(i)
            # pair the control response against the smoothed costate: the
            # pointwise minimizer of the discrete-time Hamiltonian, whose
            # fixed point tracks the discretized problem's optimal feedback
            p = first.core_at(i)
            kerns = None
            if model.sigma_depends_on_u and kernel_snapshots is not None:
                snap = min(kernel_snapshots.kernels,
                           key=lambda s: abs(s - i))
                kerns = kernel_snapshots.kernels[snap]
            u_target = _argmin_batch(model, grid, x, p, kerns, box)
            ham_cur = hamiltonian_batch(model, grid, x, u_cur, p, kerns)
            ham_new = hamiltonian_batch(model, grid, x, u_target, p, kerns)
            gap += dt * float(np.mean(ham_cur - ham_new))
            # ridge fit of the damped target on [1, nodal state]
            u_fit = u_cur + damping * (u_target - u_cur)
            design = np.concatenate([np.ones((n_paths, 1)), x], axis=1)
            gram = design.T @ design + ridge * n_paths * np.eye(n + 1)
            beta = np.linalg.solve(gram, design.T @ u_fit)
            offset[i] = beta[0]
            gain[i] = beta[1:].T
        control = AffineFeedback(offset, gain, box)
        gap_history.append(gap)
        if gap <= gap_tolerance:
            converged = True
            break

    return OptimizeResult(control=control, iterations=iteration,
                          converged=converged, gap_history=gap_history,
                          cost_history=cost_history,
                          damping_history=damping_history)

"""Forward simulation of the controlled stochastic heat equation.

Time stepping is semi-implicit Euler-Maruyama: the Laplacian is treated
implicitly (unconditionally stable banded solve), the reaction drift and the
diffusion explicitly,

    (I - dt Lap) x_{i+1} = x_i + dt b(x_i, u_i) + sigma(x_i, u_i) dW_i.

Ensembles are path-vectorized: states live in arrays of shape
(steps, paths, n) and every path owns an independent noise stream, so
perturbed restarts can replay the recorded increments (common random
numbers) and conditional expectations at a time t are realized by branching
fresh sub-ensembles from a frozen state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .function_space import (Field, Grid, implicit_heat_solve_array,
                             laplacian_array, spectral_basis)
from .model import ControlLaw, NemytskiiModel, NoiseModel


class SimulationBlowUpError(RuntimeError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state values at step {step}")


@dataclass
class EnsembleTrajectory:
    """A bundle of Monte Carlo sample paths on a shared time grid.

    ``states`` holds nodal values from ``start_index`` on, shape
    (N + 1 - start_index, paths, n); ``increments`` always covers the full
    grid so restarts can replay any window.  ``controls`` records the
    realized control values per step, shape (N - start_index, paths, d_u).
    """

    grid: Grid
    times: np.ndarray
    start_index: int
    states: Optional[np.ndarray]
    controls: np.ndarray
    increments: np.ndarray
    noise: NoiseModel
    path_offset: int
    running_cost: Optional[np.ndarray] = None   # (paths,) accumulated l-integral
    terminal_cost: Optional[np.ndarray] = None  # (paths,)
    perturbation: Optional[dict] = None         # set by simulate_perturbed

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def state(self, index: int) -> np.ndarray:
        """Ensemble state at absolute time index, shape (paths, n)."""
        if self.states is None:
            raise ValueError("trajectory was simulated without state storage")
        if index < self.start_index:
            raise IndexError(f"index {index} precedes start {self.start_index}")
        return self.states[index - self.start_index]

    def control(self, index: int) -> np.ndarray:
        if index < self.start_index:
            raise IndexError(f"index {index} precedes start {self.start_index}")
        return self.controls[index - self.start_index]

    def field(self, index: int, path: int = 0) -> Field:
        return Field(self.state(index)[path], self.grid)

    def total_cost(self) -> np.ndarray:
        if self.running_cost is None or self.terminal_cost is None:
            raise ValueError("trajectory was simulated without cost recording")
        return self.running_cost + self.terminal_cost


def _control_values(control: ControlLaw, step: int, t: float, x: np.ndarray,
                    n_paths: int, d_u_hint: int) -> np.ndarray:
    u = np.asarray(control(step, t, x), dtype=np.float64)
    if u.ndim == 0:
        u = u[None]
    if u.ndim == 1:
        u = np.broadcast_to(u, (n_paths, u.size))
    return u


def simulate_state(model: NemytskiiModel, grid: Grid, noise: NoiseModel,
                   x0: np.ndarray, control: ControlLaw, times: np.ndarray,
                   n_paths: int, *, start_index: int = 0, path_offset: int = 0,
                   increments: Optional[np.ndarray] = None,
                   store_states: bool = True,
                   record_cost: bool = True) -> EnsembleTrajectory:
    """Run the semi-implicit scheme from ``times[start_index]`` to the end.

    ``x0`` is a shared (n,) start value or per-path (paths, n).  Increments
    may be supplied (common random numbers); otherwise each path draws its
    stream from ``noise`` at ``path_offset + p``.  Non-finite values abort
    with the offending step index.
    """
    times = np.asarray(times, dtype=np.float64)
    n_steps = len(times) - 1
    dt = float(times[1] - times[0])
    n = grid.n
    if increments is None:
        increments = noise.increments(dt, n_steps, n_paths, first_path=path_offset)
    x = np.array(np.broadcast_to(np.asarray(x0, dtype=np.float64), (n_paths, n)))

    n_store = n_steps - start_index
    states = np.empty((n_store + 1, n_paths, n)) if store_states else None
    controls = np.empty((n_store, n_paths, model.d_u))
    run_cost = np.zeros(n_paths) if record_cost else None
    if store_states:
        states[0] = x

    h = grid.h
    for i in range(start_index, n_steps):
        u = _control_values(control, i, float(times[i]), x, n_paths, model.d_u)
        controls[i - start_index] = u
        with np.errstate(over="ignore", invalid="ignore"):
            drift = model.b(x, u)
            if model.sigma_is_zero:
                noise_term = 0.0
            else:
                sig = model.sigma(x, u)
                noise_term = np.einsum("pnm,pm->pn", sig, increments[:, i, :])
            if record_cost:
                run_cost += 0.5 * dt * h * np.sum(model.l(x, u), axis=-1)
            rhs = x + dt * drift + noise_term
        if not np.all(np.isfinite(rhs)):
            raise SimulationBlowUpError(i + 1)
        x = implicit_heat_solve_array(rhs, grid, dt)
        if not np.all(np.isfinite(x)):
            raise SimulationBlowUpError(i + 1)
        if record_cost:
            # trapezoid within the interval, control held at its left value
            run_cost += 0.5 * dt * h * np.sum(model.l(x, u), axis=-1)
        if store_states:
            states[i + 1 - start_index] = x

    term_cost = h * np.sum(model.h(x), axis=-1) if record_cost else None
    return EnsembleTrajectory(
        grid=grid, times=times, start_index=start_index, states=states,
        controls=controls, increments=increments, noise=noise,
        path_offset=path_offset, running_cost=run_cost, terminal_cost=term_cost)


def subset_paths(base: EnsembleTrajectory, n_paths: int) -> EnsembleTrajectory:
    """View-like trajectory restricted to the first n_paths sample paths."""
    if n_paths > base.n_paths:
        raise ValueError(f"requested {n_paths} of {base.n_paths} paths")
    return EnsembleTrajectory(
        grid=base.grid, times=base.times, start_index=base.start_index,
        states=None if base.states is None else base.states[:, :n_paths],
        controls=base.controls[:, :n_paths],
        increments=base.increments[:n_paths], noise=base.noise,
        path_offset=base.path_offset,
        running_cost=None if base.running_cost is None else base.running_cost[:n_paths],
        terminal_cost=None if base.terminal_cost is None else base.terminal_cost[:n_paths],
        perturbation=base.perturbation)


def branch_ensemble(base: EnsembleTrajectory, model: NemytskiiModel,
                    control: ControlLaw, t_index: int, n_paths: int,
                    branch_noise: NoiseModel, path: int = 0,
                    store_states: bool = True) -> EnsembleTrajectory:
    """Sub-ensemble realizing the conditional law given the state of one base
    path at ``t_index``: fresh noise streams, frozen start value."""
    x_t = base.state(t_index)[path]
    return simulate_state(model, base.grid, branch_noise, x_t, control,
                          base.times, n_paths, start_index=t_index,
                          store_states=store_states)


def simulate_perturbed(base: EnsembleTrajectory, model: NemytskiiModel,
                       t_index: int, tau_steps: int,
                       z: np.ndarray) -> EnsembleTrajectory:
    """Restart every path at ``t_index + tau_steps`` from state(t_index) + z,
    driven by the same recorded increments and control values."""
    j = t_index + tau_steps
    if j > base.n_steps:
        raise ValueError(f"restart index {j} beyond horizon {base.n_steps}")
    z = np.asarray(z, dtype=np.float64)
    x_start = base.state(t_index) + z
    frozen = _FrozenControls(base, j)
    out = simulate_state(model, base.grid, base.noise, x_start, frozen,
                         base.times, base.n_paths, start_index=j,
                         increments=base.increments,
                         path_offset=base.path_offset, record_cost=False)
    out.perturbation = {"t_index": t_index, "tau_steps": tau_steps, "z": z}
    return out


@dataclass(frozen=True)
class _FrozenControls(ControlLaw):
    """Replays the control values recorded by a finished trajectory."""

    base: EnsembleTrajectory
    start: int
    name: str = "frozen"

    def __call__(self, step, t, x):
        return self.base.control(step)


# ---------------------------------------------------------------------------
# variational processes
# ---------------------------------------------------------------------------

@dataclass
class VariationalPath:
    """Difference process y = perturbed - base together with the first- and
    second-order Taylor remainders of the coefficient expansions.

    Remainders are indexed by step r = start_index .. N-1 (left endpoints of
    the scheme intervals), matching rectangle-rule time integrals; phi are
    drift remainders (steps, paths, n), psi diffusion remainders
    (steps, paths, n, m).
    """

    grid: Grid
    times: np.ndarray
    start_index: int
    z: np.ndarray
    tau: float
    y: np.ndarray
    phi1: np.ndarray
    psi1: np.ndarray
    phi2: np.ndarray
    psi2: np.ndarray

    def y_at(self, index: int) -> np.ndarray:
        return self.y[index - self.start_index]


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_legendre_01(k: int) -> tuple[np.ndarray, np.ndarray]:
    if k not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(k)
        _GL_CACHE[k] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[k]


def variational_path(base: EnsembleTrajectory, perturbed: EnsembleTrajectory,
                     model: NemytskiiModel, *, theta_points: int = 16) -> VariationalPath:
    """Build y and its Taylor remainders on the perturbed trajectory's window.

    The remainder integrals over the Taylor parameter are evaluated with
    Gauss-Legendre quadrature; the integrands are smooth in theta, so the
    quadrature error is negligible against Monte Carlo noise.
    """
    if base.grid != perturbed.grid or base.n_paths != perturbed.n_paths:
        raise ValueError("base and perturbed ensembles are not aligned")
    j = perturbed.start_index
    n_steps = base.n_steps
    y = perturbed.states - base.states[j - base.start_index:]
    theta, weights = _gauss_legendre_01(theta_points)

    steps = n_steps - j
    p, n = y.shape[1], y.shape[2]
    m = model.m
    phi1 = np.zeros((steps, p, n))
    phi2 = np.zeros((steps, p, n))
    psi1 = np.zeros((steps, p, n, m))
    psi2 = np.zeros((steps, p, n, m))
    for r in range(steps):
        xb = base.state(j + r)
        u = base.control(j + r)
        yr = y[r]
        bx0 = model.b_x(xb, u)
        bxx0 = model.b_xx(xb, u)
        sx0 = model.sigma_x(xb, u)
        sxx0 = model.sigma_xx(xb, u)
        for q in range(theta_points):
            xq = xb + theta[q] * yr
            wq = weights[q]
            phi1[r] += wq * (model.b_x(xq, u) - bx0) * yr
            phi2[r] += wq * (1.0 - theta[q]) * (model.b_xx(xq, u) - bxx0) * yr**2
            psi1[r] += wq * (model.sigma_x(xq, u) - sx0) * yr[..., None]
            psi2[r] += wq * (1.0 - theta[q]) * (model.sigma_xx(xq, u) - sxx0) * (yr**2)[..., None]
    if perturbed.perturbation is not None:
        z = perturbed.perturbation["z"]
        tau = perturbed.perturbation["tau_steps"] * base.dt
    else:
        z = np.zeros(base.grid.n)
        tau = 0.0
    return VariationalPath(grid=base.grid, times=base.times, start_index=j,
                           z=z, tau=tau, y=y, phi1=phi1, psi1=psi1,
                           phi2=phi2, psi2=psi2)


def reintegrate_variational(base: EnsembleTrajectory, vp: VariationalPath,
                            model: NemytskiiModel) -> np.ndarray:
    """Integrate the first-order expansion of y with its remainders and the
    recorded noise; must reproduce perturbed - base to scheme tolerance."""
    j = vp.start_index
    dt = base.dt
    y = vp.y[0].copy()
    out = np.empty_like(vp.y)
    out[0] = y
    for r in range(base.n_steps - j):
        xb = base.state(j + r)
        u = base.control(j + r)
        dw = base.increments[:, j + r, :]
        drift = model.b_x(xb, u) * y + vp.phi1[r]
        diff = model.sigma_x(xb, u) * y[..., None] + vp.psi1[r]
        rhs = y + dt * drift + np.einsum("pnm,pm->pn", diff, dw)
        y = implicit_heat_solve_array(rhs, base.grid, dt)
        out[r + 1] = y
    return out


# ---------------------------------------------------------------------------
# second variation
# ---------------------------------------------------------------------------

@dataclass
class SecondVariationPath:
    """Rank-one tensor processes Y = y (x) y with the kernel-level sources
    that drive the tensor evolution equation.

    Materializes (steps, paths, n, n) arrays; intended for small ensembles.
    Quadratic-functional checks should use the bilinear contractions below
    instead of these dense kernels.
    """

    grid: Grid
    start_index: int
    kernels: np.ndarray     # (steps+1, paths, n, n)
    phi: np.ndarray         # (steps, paths, n, n)
    psi: np.ndarray         # (steps, paths, n, n, m)


def second_variation(base: EnsembleTrajectory, vp: VariationalPath,
                     model: NemytskiiModel) -> SecondVariationPath:
    j = vp.start_index
    y = vp.y
    kernels = np.einsum("spi,spj->spij", y, y)
    steps = y.shape[0] - 1
    p, n = y.shape[1], y.shape[2]
    m = model.m
    phi = np.empty((steps, p, n, n))
    psi = np.empty((steps, p, n, n, m))
    for r in range(steps):
        xb = base.state(j + r)
        u = base.control(j + r)
        yr = y[r]
        sx = model.sigma_x(xb, u)          # (p, n, m)
        sxy = sx * yr[..., None]           # sigma_x y, (p, n, m)
        f1 = vp.phi1[r]
        p1 = vp.psi1[r]
        phi[r] = (np.einsum("pi,pj->pij", yr, f1)
                  + np.einsum("pi,pj->pij", f1, yr)
                  + np.einsum("pim,pjm->pij", sxy, p1)
                  + np.einsum("pim,pjm->pij", p1, sxy)
                  + np.einsum("pim,pjm->pij", p1, p1))
        psi[r] = (np.einsum("pi,pjm->pijm", yr, p1)
                  + np.einsum("pim,pj->pijm", p1, yr))
    return SecondVariationPath(grid=base.grid, start_index=j, kernels=kernels,
                               phi=phi, psi=psi)


# ---------------------------------------------------------------------------
# a-priori and regularity ratio checks
# ---------------------------------------------------------------------------

def sup_and_h1_integral(vp: VariationalPath, grid: Grid, dt: float):
    """Per-path sup of |y|_{L2}^2 and the time integral of |y|_{H1}^2."""
    y = vp.y
    h = grid.h
    l2sq = h * np.sum(y * y, axis=-1)                # (steps+1, p)
    h1sq = -h * np.sum(laplacian_array(y, grid) * y, axis=-1)
    sup_l2 = np.max(l2sq, axis=0)
    int_h1 = dt * np.sum(h1sq[:-1], axis=0)
    return sup_l2, int_h1


def apriori_ratios(base: EnsembleTrajectory, model: NemytskiiModel,
                   t_index: int, levels: Sequence[tuple[int, np.ndarray]],
                   k_values: Sequence[int] = (1, 2)) -> list[dict]:
    """Moment-to-perturbation ratios for a grid of (tau, z) levels.

    For each level the perturbed ensemble restarts with common random
    numbers; the reported ratio estimates the conditional moment of the
    variational process divided by tau^k + |z|^{2k}.  A vanishing
    perturbation reports ratio zero by convention.
    """
    rows = []
    dt = base.dt
    h = base.grid.h
    for tau_steps, z in levels:
        z = np.asarray(z, dtype=np.float64)
        tau = tau_steps * dt
        znorm2 = h * float(np.dot(z, z))
        pert = simulate_perturbed(base, model, t_index, tau_steps, z)
        vp = variational_path(base, pert, model, theta_points=4)
        sup_l2, int_h1 = sup_and_h1_integral(vp, base.grid, dt)
        for k in k_values:
            denom = tau**k + znorm2**k
            if denom == 0.0:
                rows.append({"tau": tau, "z_norm": math.sqrt(znorm2), "k": k,
                             "ratio": 0.0, "se": 0.0})
                continue
            stat = int_h1**k + sup_l2**k
            mean = float(np.mean(stat))
            se = float(np.std(stat, ddof=1) / math.sqrt(len(stat)))
            rows.append({"tau": tau, "z_norm": math.sqrt(znorm2), "k": k,
                         "ratio": mean / denom, "se": se / denom})
    return rows


def terminal_regularity_ratio(base: EnsembleTrajectory, model: NemytskiiModel,
                              t_index: int, tau_steps: int, z: np.ndarray,
                              gamma: float) -> dict:
    """Conditional H^gamma moment of y at the terminal time divided by
    tau + |z|^2, for fractional orders gamma in (0, 1/4)."""
    if not 0.0 < gamma < 0.25:
        raise ValueError(f"gamma must lie in (0, 1/4), got {gamma}")
    grid = base.grid
    dt = base.dt
    z = np.asarray(z, dtype=np.float64)
    tau = tau_steps * dt
    znorm2 = grid.h * float(np.dot(z, z))
    pert = simulate_perturbed(base, model, t_index, tau_steps, z)
    y_t = pert.states[-1] - base.states[-1]
    basis = spectral_basis(grid)
    coeffs = grid.h * (y_t @ basis.vectors)
    hgamma_sq = np.sum(basis.eigenvalues**gamma * coeffs**2, axis=-1)
    denom = tau + znorm2
    if denom == 0.0:
        return {"gamma": gamma, "tau": tau, "z_norm": math.sqrt(znorm2),
                "ratio": 0.0, "se": 0.0, "y_terminal": y_t}
    mean = float(np.mean(hgamma_sq))
    se = float(np.std(hgamma_sq, ddof=1) / math.sqrt(len(hgamma_sq)))
    return {"gamma": gamma, "tau": tau, "z_norm": math.sqrt(znorm2),
            "ratio": mean / denom, "se": se / denom, "y_terminal": y_t}


# ---------------------------------------------------------------------------
# trajectory export
# ---------------------------------------------------------------------------

def dump_trajectory_csv(traj: EnsembleTrajectory, path: int, fname) -> None:
    """Columnar dump of one sample path: time then nodal values per row."""
    with open(fname, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time"] + [f"node_{i}" for i in range(traj.grid.n)])
        for i in range(traj.start_index, traj.n_steps + 1):
            writer.writerow([repr(float(traj.times[i]))]
                            + [repr(float(v)) for v in traj.state(i)[path]])

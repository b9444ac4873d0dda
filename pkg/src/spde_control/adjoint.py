"""Backward solvers for the first- and second-order adjoint equations.

Both solvers run backward along a stored forward ensemble and realize
conditional expectations by least-squares Monte Carlo regression on a
polynomial basis in the leading spectral coefficients of the state.

The backward steps are built as the exact discrete adjoints of the
linearized forward scheme.  With M = (I - dt Lap) and forward linearization
y+ = M^{-1}[(1 + dt b_x + sigma_x dW) y], the dual recursion is

    q_i   = M^{-1} E_i[p_{i+1} dW_i] / dt,
    p_i   = (1 + dt b_x) M^{-1} E_i[p_{i+1}] + dt (sigma_x . q_i + l_x),

with coefficients frozen at the left endpoint, so the discrete duality
pairing <p_i, y_i> telescopes exactly up to regression and Monte Carlo
error.  E_i[p_{i+1}] is realized pathwise by subtracting the fitted
martingale increment, which keeps the solution adapted up to regression
error.  The kernel-valued second-order solver is the same construction on
the tensor square: the two factorized tridiagonal sweeps apply exactly
(M (x) M)^{-1}, the dual of the product of two forward solves, and diagonal
delta-type sources inject the second-derivative costs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .function_space import (Field, Grid, KernelField,
                             implicit_heat_solve_array, spectral_basis)
from .model import NemytskiiModel
from .simulate import EnsembleTrajectory


class RegressionIllConditionedError(RuntimeError):
    def __init__(self, step: int, cond: float, threshold: float):
        self.step = step
        self.cond = cond
        super().__init__(f"regression design matrix at step {step} has condition "
                         f"number {cond:.3e} above threshold {threshold:.1e}")


@dataclass(frozen=True)
class RegressionConfig:
    """Least-squares Monte Carlo basis: tensor polynomials up to ``degree``
    in the leading ``n_modes`` spectral coefficients of the state.

    Designs whose condition number exceeds ``cond_threshold`` abort the run;
    with ``truncate_degenerate`` (default) numerically unresolved directions
    are dropped first, which is the right treatment for ensembles whose
    spread legitimately spans fewer directions than the basis (early steps,
    low-rank noise)."""

    n_modes: int = 4
    degree: int = 2
    cond_threshold: float = 1e8
    truncate_degenerate: bool = True


def regression_features(states: np.ndarray, grid: Grid,
                        config: RegressionConfig) -> np.ndarray:
    """Design matrix (paths, n_features) with intercept column first.

    Quadratic columns are products of ensemble-centered coefficients: the
    span is unchanged but the columns stay well conditioned when the state
    fluctuation is small against its mean.
    """
    basis = spectral_basis(grid)
    k = min(config.n_modes, grid.n)
    coeffs = grid.h * (states @ basis.vectors[:, :k])  # (paths, k)
    cols = [np.ones(states.shape[0])]
    if config.degree >= 1:
        cols.extend(coeffs.T)
    if config.degree >= 2:
        centered = coeffs - coeffs.mean(axis=0)
        for a in range(k):
            for b in range(a, k):
                cols.append(centered[:, a] * centered[:, b])
    return np.column_stack(cols)


def _design_projector(features: np.ndarray, step: int,
                      config: RegressionConfig) -> tuple[np.ndarray, float]:
    """Orthonormal basis of the numerically resolved span of the design.

    Columns are standardized; directions with singular value below
    s_max / cond_threshold are truncated when the config allows, otherwise
    their presence aborts the run.  The reported condition number is that
    of the design actually used.
    """
    threshold = config.cond_threshold
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    keep = std > 1e-12
    keep[0] = True  # intercept survives standardization as a ones column
    reduced = np.ones((features.shape[0], int(np.sum(keep))))
    reduced[:, 1:] = (features[:, keep][:, 1:] - mean[keep][1:]) / std[keep][1:]
    u_mat, svals, _ = np.linalg.svd(reduced, full_matrices=False)
    cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else math.inf
    if not config.truncate_degenerate and cond > threshold:
        raise RegressionIllConditionedError(step, cond, threshold)
    retain = svals > svals[0] / threshold
    cond = float(svals[0] / np.min(svals[retain]))
    if cond > threshold:
        raise RegressionIllConditionedError(step, cond, threshold)
    return u_mat[:, retain], cond


def _project(basis: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return basis @ (basis.T @ targets)


def _ensemble_is_constant(arr: np.ndarray) -> bool:
    return bool(np.all(arr == arr[:1]))


@dataclass
class FirstAdjointPath:
    """Backward-solved (p, q) aligned to a forward trajectory's grid.

    ``p`` has shape (steps+1, paths, n) with p[k] at absolute index
    start_index + k; ``q`` has shape (steps, paths, n, m) with q[k] at the
    left endpoint of interval k.  ``core`` holds the smoothed conditional
    mean of the next-step adjoint, (I - dt Lap)^{-1} E_i[p_{i+1}], which is
    the costate the one-step discrete control response pairs against.
    """

    grid: Grid
    times: np.ndarray
    start_index: int
    p: np.ndarray
    q: np.ndarray
    core: np.ndarray
    max_condition: float

    def p_at(self, index: int) -> np.ndarray:
        return self.p[index - self.start_index]

    def q_at(self, index: int) -> np.ndarray:
        return self.q[index - self.start_index]

    def core_at(self, index: int) -> np.ndarray:
        return self.core[index - self.start_index]


def solve_first_adjoint(model: NemytskiiModel, traj: EnsembleTrajectory,
                        config: RegressionConfig = RegressionConfig(),
                        substeps: int = 1) -> FirstAdjointPath:
    """Backward solve of the first-order adjoint pair along an ensemble.

    The martingale density q is the regression coefficient of the smoothed
    next-step adjoint against the scaled noise increments; for an ensemble
    whose next-step adjoint is constant across paths the density is exactly
    zero (deterministic dynamics shortcut).

    ``substeps=1`` is the exact discrete adjoint of the forward scheme (the
    duality checks rely on it); larger values subdivide the deterministic
    backward flow per interval and shrink the time-discretization gap
    against continuum references.
    """
    grid = traj.grid
    dt = traj.dt
    n_steps = traj.n_steps - traj.start_index
    n_paths = traj.n_paths
    n, m = grid.n, model.m

    p = np.empty((n_steps + 1, n_paths, n))
    q = np.zeros((n_steps, n_paths, n, m))
    cores = np.empty((n_steps, n_paths, n))
    p[-1] = model.h_x(traj.state(traj.n_steps))
    max_cond = 0.0

    for k in range(n_steps - 1, -1, -1):
        i = traj.start_index + k
        x = traj.state(i)
        u = traj.control(i)
        dw = traj.increments[:, i, :]
        p_next = p[k + 1]

        if model.sigma_is_zero or _ensemble_is_constant(p_next):
            q_raw = np.zeros((n_paths, n, m))
        else:
            feats = regression_features(x, grid, config)
            basis, cond = _design_projector(feats, i, config)
            max_cond = max(max_cond, cond)
            # center against the conditional mean before multiplying by the
            # increments: unbiased for the same coefficient, variance drops
            # from |p|^2/dt to the one-step fluctuation of p
            resid = p_next - _project(basis, p_next)
            targets = (resid[:, :, None] * dw[:, None, :] / dt).reshape(n_paths, n * m)
            q_raw = _project(basis, targets).reshape(n_paths, n, m)

        q[k] = implicit_heat_solve_array(
            q_raw.transpose(0, 2, 1).reshape(n_paths * m, n), grid, dt
        ).reshape(n_paths, m, n).transpose(0, 2, 1)

        sigma_q = np.einsum("pnm,pnm->pn", model.sigma_x(x, u), q[k])
        source = sigma_q + model.l_x(x, u)
        b_x = model.b_x(x, u)
        value = p_next - np.einsum("pnm,pm->pn", q_raw, dw)
        cores[k] = implicit_heat_solve_array(value, grid, dt)
        dsub = dt / substeps
        for _ in range(substeps):
            core = implicit_heat_solve_array(value, grid, dsub)
            value = (1.0 + dsub * b_x) * core + dsub * source
        p[k] = value

    return FirstAdjointPath(grid=grid, times=traj.times,
                            start_index=traj.start_index, p=p, q=q,
                            core=cores, max_condition=max_cond)


# ---------------------------------------------------------------------------
# mollified terminal kernel
# ---------------------------------------------------------------------------

def gaussian_kernel_values(grid: Grid, eta: float) -> np.ndarray:
    if eta <= 0:
        raise ValueError(f"mollification width must be positive, got {eta}")
    nodes = grid.nodes
    d = nodes[:, None] - nodes[None, :]
    return np.exp(-d * d / (4.0 * eta)) / math.sqrt(4.0 * math.pi * eta)


def build_mollified_terminal(model: NemytskiiModel, x_terminal: np.ndarray,
                             grid: Grid, eta: float) -> np.ndarray:
    """Gaussian-mollified terminal kernel for the second-order adjoint:
    0.5 (h_xx(x_T(la)) + h_xx(x_T(mu))) times the width-eta heat kernel.

    Accepts a single state (n,) or an ensemble (paths, n); the kernel gains
    matching leading axes.
    """
    gauss = gaussian_kernel_values(grid, eta)
    hxx = model.h_xx(np.asarray(x_terminal, dtype=np.float64))
    pair_mean = 0.5 * (hxx[..., :, None] + hxx[..., None, :])
    return pair_mean * gauss


def mollified_terminal_field(model: NemytskiiModel, x_terminal: Field,
                             eta: float) -> KernelField:
    values = build_mollified_terminal(model, x_terminal.values,
                                      x_terminal.grid, eta)
    values = 0.5 * (values + values.T)
    return KernelField(values, x_terminal.grid, symmetric=True)


# ---------------------------------------------------------------------------
# second-order adjoint
# ---------------------------------------------------------------------------

def solve_kernel_implicit(arr: np.ndarray, grid: Grid, dt: float) -> np.ndarray:
    """Apply (M (x) M)^{-1} to kernels (..., n, n) by two tridiagonal sweeps,
    one along each variable."""
    lead = arr.shape[:-2]
    n = grid.n
    flat = arr.reshape(-1, n, n)
    first = implicit_heat_solve_array(
        flat.transpose(0, 2, 1).reshape(-1, n), grid, dt
    ).reshape(-1, n, n).transpose(0, 2, 1)
    second = implicit_heat_solve_array(first.reshape(-1, n), grid, dt)
    return second.reshape(lead + (n, n))


@dataclass
class SecondAdjointPath:
    """Mollified second-order adjoint kernels at requested snapshot indices.

    ``kernels[idx]`` maps absolute time index to the (paths, n, n) symmetric
    kernel ensemble; ``q_kernels[idx]`` holds the (paths, n, n, m) martingale
    kernels at the left endpoint of the same interval.
    """

    grid: Grid
    times: np.ndarray
    start_index: int
    eta: float
    kernels: dict[int, np.ndarray] = field(default_factory=dict)
    q_kernels: dict[int, np.ndarray] = field(default_factory=dict)
    max_condition: float = 0.0

    def kernel_field(self, index: int, path: int = 0) -> KernelField:
        values = self.kernels[index][path]
        return KernelField(values, self.grid, symmetric=True)


def solve_second_adjoint(model: NemytskiiModel, traj: EnsembleTrajectory,
                         first: FirstAdjointPath, eta: float,
                         config: RegressionConfig = RegressionConfig(),
                         snapshot_indices: Optional[Sequence[int]] = None,
                         step_callback: Optional[Callable] = None,
                         substeps: int = 1) -> SecondAdjointPath:
    """Backward solve of the mollified kernel-valued second-order adjoint.

    Follows the first-adjoint construction on the tensor square: per step
    the martingale kernel is regressed against the noise increments, the
    factorized implicit solve applies the dual of the squared forward
    operator, zeroth-order coefficients multiply pointwise, and the
    second-derivative costs enter as diagonal sources through the adjoint of
    the diagonal restriction.  ``step_callback(index, kernels, q_kernels)``
    runs after each backward step so integral functionals can accumulate
    without storing every kernel.

    With ``substeps=1`` the step is the exact discrete adjoint of the
    squared forward scheme (what the duality checks pair against); larger
    values sub-divide the deterministic backward flow within each interval,
    trading that exactness for a smaller time-discretization gap against
    continuum references.
    """
    grid = traj.grid
    dt = traj.dt
    n_steps = traj.n_steps - traj.start_index
    n_paths = traj.n_paths
    n, m = grid.n, model.m
    h = grid.h

    snapshots = set(snapshot_indices) if snapshot_indices is not None else set()
    snapshots.add(traj.start_index)
    snapshots.add(traj.n_steps)

    out = SecondAdjointPath(grid=grid, times=traj.times,
                            start_index=traj.start_index, eta=eta)
    kern = build_mollified_terminal(model, traj.state(traj.n_steps), grid, eta)
    kern = 0.5 * (kern + kern.transpose(0, 2, 1))
    if traj.n_steps in snapshots:
        out.kernels[traj.n_steps] = kern.copy()

    max_cond = 0.0
    diag = np.arange(n)
    for k in range(n_steps - 1, -1, -1):
        i = traj.start_index + k
        x = traj.state(i)
        u = traj.control(i)
        dw = traj.increments[:, i, :]

        if model.sigma_is_zero or _ensemble_is_constant(kern):
            q_raw = np.zeros((n_paths, n, n, m))
        else:
            feats = regression_features(x, grid, config)
            basis, cond = _design_projector(feats, i, config)
            max_cond = max(max_cond, cond)
            resid = kern - _project(basis, kern.reshape(n_paths, n * n)
                                    ).reshape(n_paths, n, n)
            targets = (resid[..., None] * dw[:, None, None, :] / dt
                       ).reshape(n_paths, n * n * m)
            q_raw = _project(basis, targets).reshape(n_paths, n, n, m)

        q_kern = solve_kernel_implicit(
            q_raw.transpose(0, 3, 1, 2).reshape(n_paths * m, n, n), grid, dt
        ).reshape(n_paths, m, n, n).transpose(0, 2, 3, 1)

        b_x = model.b_x(x, u)                       # (paths, n)
        sig_x = model.sigma_x(x, u)                 # (paths, n, m)
        coeff = (b_x[:, :, None] + b_x[:, None, :]
                 + np.einsum("pim,pjm->pij", sig_x, sig_x))
        q_term = np.einsum("pim,pijm->pij", sig_x, q_kern) \
            + np.einsum("pjm,pijm->pij", sig_x, q_kern)

        source_diag = (model.l_xx(x, u) + model.b_xx(x, u) * first.p_at(i)
                       + np.einsum("pnm,pnm->pn", model.sigma_xx(x, u),
                                   first.q_at(i)))
        kern = kern - np.einsum("pijm,pm->pij", q_raw, dw)
        dsub = dt / substeps
        for _ in range(substeps):
            core = solve_kernel_implicit(kern, grid, dsub)
            kern = (1.0 + dsub * coeff) * core + dsub * q_term
            kern[:, diag, diag] += dsub * source_diag / h
        kern = 0.5 * (kern + kern.transpose(0, 2, 1))

        if i in snapshots:
            out.kernels[i] = kern.copy()
            out.q_kernels[i] = q_kern
        if step_callback is not None:
            step_callback(i, kern, q_kern)

    out.max_condition = max_cond
    return out


# ---------------------------------------------------------------------------
# kernel algebra
# ---------------------------------------------------------------------------

def kernel_apply(kernel: KernelField, f: Field) -> Field:
    """Operator action of a kernel on a field: g = h K f."""
    if kernel.grid != f.grid:
        raise ValueError("kernel and field grids differ")
    return Field(kernel.grid.h * (kernel.values @ f.values), f.grid)


def trace_form(sigma: np.ndarray, kernel: KernelField) -> float:
    """Noise trace form: sum over channels of <sigma_j, K sigma_j>_{L2}."""
    h = kernel.grid.h
    return float(h * h * np.einsum("im,ij,jm->", sigma, kernel.values, sigma))


def trace_form_array(sigma: np.ndarray, kernels: np.ndarray, h: float) -> np.ndarray:
    """Batched trace form: sigma (..., n, m), kernels (..., n, n) -> (...)."""
    return h * h * np.einsum("...im,...ij,...jm->...", sigma, kernels, sigma)

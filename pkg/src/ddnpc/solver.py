"""General constrained nonlinear programming used by the predictive layers.

Smooth objective, linear and nonlinear equality constraints, inequality
constraints and box bounds. Equalities and inequalities are handled by an
augmented-Lagrangian outer loop (multiplier updates, penalty growth when
feasibility stalls); each inner subproblem is a box-constrained smooth
minimization delegated to a projected limited-memory quasi-Newton method.
Identical problems, options and guesses give identical reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize


class CallbackError(RuntimeError):
    """A problem callback raised or returned non-finite values."""


@dataclass
class LinearEquality:
    A: np.ndarray
    b: np.ndarray


@dataclass
class NlpProblem:
    """Problem data in callback form.

    ``objective(z)`` returns ``(value, gradient)``. ``eq_residual`` /
    ``eq_jacobian`` describe nonlinear equalities ``c(z) = 0``;
    ``ineq_residual`` / ``ineq_jacobian`` describe ``g(z) <= 0``. Linear
    equalities carry their matrix explicitly. Bounds with equal lower and
    upper entry pin a variable.
    """

    dim: int
    objective: Callable[[np.ndarray], tuple]
    x0: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    eq_residual: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eq_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    linear_eq: Optional[LinearEquality] = None
    ineq_residual: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    # Optional sum-of-squares form of the objective (f = ||ls_residual||^2).
    # When provided, inner subproblems run on a bounded Gauss-Newton method,
    # which converges far faster than quasi-Newton on these problems.
    ls_residual: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ls_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if self.x0.size != self.dim:
            raise ValueError(f"initial guess has size {self.x0.size}, expected {self.dim}")
        if self.lower is None:
            self.lower = np.full(self.dim, -np.inf)
        if self.upper is None:
            self.upper = np.full(self.dim, np.inf)
        self.lower = np.asarray(self.lower, dtype=float).reshape(-1)
        self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if self.lower.size != self.dim or self.upper.size != self.dim:
            raise ValueError("bound sizes do not match the decision dimension")
        f0, g0 = self.objective(np.clip(self.x0, self.lower, self.upper))
        if not (np.isfinite(f0) and np.all(np.isfinite(g0))):
            raise CallbackError("objective not finite at the initial guess")


@dataclass
class SolverOptions:
    feasibility_tol: float = 1e-7
    optimality_tol: float = 1e-6
    max_outer: int = 20
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e12
    inner_maxiter: int = 500
    debug_check_gradients: bool = False


@dataclass
class SolverReport:
    x: np.ndarray
    objective: float
    max_eq_violation: float
    max_ineq_violation: float
    iterations: int
    kkt_residual: float
    status: str  # converged | max-iter | infeasible-detected

    @property
    def max_violation(self) -> float:
        return max(self.max_eq_violation, self.max_ineq_violation)


def _stack_equalities(problem: NlpProblem):
    """Merge linear and nonlinear equalities into one residual/jacobian pair."""
    lin = problem.linear_eq
    has_nl = problem.eq_residual is not None

    if lin is None and not has_nl:
        return None, None
    A = None if lin is None else np.asarray(lin.A, dtype=float)
    b = None if lin is None else np.asarray(lin.b, dtype=float).reshape(-1)

    def residual(z):
        parts = []
        if has_nl:
            parts.append(np.asarray(problem.eq_residual(z), dtype=float).reshape(-1))
        if A is not None:
            parts.append(A @ z - b)
        return np.concatenate(parts)

    def jacobian(z):
        parts = []
        if has_nl:
            parts.append(np.atleast_2d(np.asarray(problem.eq_jacobian(z), dtype=float)))
        if A is not None:
            parts.append(A)
        return np.vstack(parts)

    return residual, jacobian


def solve(problem: NlpProblem, options: Optional[SolverOptions] = None) -> SolverReport:
    """Minimize the problem with an augmented-Lagrangian loop.

    Feasibility is measured in the sup norm over all constraints; optimality
    by the projected gradient of the Lagrangian at the returned point. Slow
    convergence yields a ``max-iter`` report rather than an exception; a
    stalled penalty at its cap with large violation is reported as
    ``infeasible-detected``.
    """
    opts = options or SolverOptions()
    if opts.debug_check_gradients:
        check_gradients(problem, n_points=3, tol=1e-5)

    eq_res, eq_jac = _stack_equalities(problem)
    in_res, in_jac = problem.ineq_residual, problem.ineq_jacobian

    z = np.clip(problem.x0.copy(), problem.lower, problem.upper)
    n_eq = eq_res(z).size if eq_res is not None else 0
    n_in = np.asarray(in_res(z)).size if in_res is not None else 0

    mu = np.zeros(n_eq)
    nu = np.zeros(n_in)
    rho = opts.penalty_init
    bounds = list(zip(problem.lower, problem.upper))
    total_inner = 0
    prev_violation = np.inf

    def al_value_grad(zz):
        f, g = problem.objective(zz)
        if eq_res is not None:
            c = eq_res(zz)
            J = eq_jac(zz)
            f = f + mu @ c + 0.5 * rho * (c @ c)
            g = g + J.T @ (mu + rho * c)
        if in_res is not None:
            gi = np.asarray(in_res(zz), dtype=float).reshape(-1)
            Ji = np.atleast_2d(np.asarray(in_jac(zz), dtype=float))
            s = np.maximum(0.0, nu + rho * gi)
            f = f + (s @ s - nu @ nu) / (2.0 * rho)
            g = g + Ji.T @ s
        return f, g

    def violations(zz):
        ve = float(np.max(np.abs(eq_res(zz)))) if n_eq else 0.0
        vi = float(np.max(np.maximum(0.0, in_res(zz)))) if n_in else 0.0
        return ve, vi

    def kkt_residual(zz):
        _, g = problem.objective(zz)
        if eq_res is not None:
            g = g + eq_jac(zz).T @ (mu + rho * eq_res(zz))
        if in_res is not None:
            gi = np.asarray(in_res(zz), dtype=float).reshape(-1)
            g = g + np.atleast_2d(in_jac(zz)).T @ np.maximum(0.0, nu + rho * gi)
        proj = np.clip(zz - g, problem.lower, problem.upper) - zz
        return float(np.max(np.abs(proj))) if proj.size else 0.0

    use_gn = problem.ls_residual is not None
    free = problem.lower < problem.upper
    idx_free = np.nonzero(free)[0]

    def inner_gauss_newton(z_start):
        """Bounded Gauss-Newton on the free variables; pinned entries are
        substituted as constants. The penalty terms enter as extra residual
        rows (hinged for inequalities)."""
        from scipy.optimize import least_squares

        z_fix = z_start.copy()
        sr = math.sqrt(0.5 * rho)

        def embed(zf):
            z_full = z_fix.copy()
            z_full[idx_free] = zf
            return z_full

        def res_fn(zf):
            z_full = embed(zf)
            rows = [problem.ls_residual(z_full)]
            if eq_res is not None:
                rows.append(sr * (eq_res(z_full) + mu / rho))
            if in_res is not None:
                gi = np.asarray(in_res(z_full), dtype=float).reshape(-1)
                rows.append(sr * np.maximum(0.0, gi + nu / rho))
            return np.concatenate(rows)

        def jac_fn(zf):
            z_full = embed(zf)
            rows = [np.atleast_2d(problem.ls_jacobian(z_full))]
            if eq_res is not None:
                rows.append(sr * eq_jac(z_full))
            if in_res is not None:
                gi = np.asarray(in_res(z_full), dtype=float).reshape(-1)
                Ji = np.atleast_2d(np.asarray(in_jac(z_full), dtype=float))
                active = (gi + nu / rho) > 0
                rows.append(sr * (Ji * active[:, None]))
            return np.vstack(rows)[:, idx_free]

        res = least_squares(
            res_fn,
            z_start[idx_free],
            jac=jac_fn,
            bounds=(problem.lower[idx_free], problem.upper[idx_free]),
            method="trf",
            xtol=1e-12,
            ftol=1e-12,
            gtol=1e-10,
            max_nfev=opts.inner_maxiter,
        )
        return embed(res.x), int(res.nfev)

    status = "max-iter"
    outer = 0
    for outer in range(1, opts.max_outer + 1):
        if use_gn:
            z, nit = inner_gauss_newton(z)
            total_inner += nit
            z = np.clip(z, problem.lower, problem.upper)
            ve, vi = violations(z)
            kkt = kkt_residual(z)
            if max(ve, vi) <= opts.feasibility_tol and kkt <= opts.optimality_tol:
                status = "converged"
                break
            violation = max(ve, vi)
            if n_eq:
                mu = mu + rho * eq_res(z)
            if n_in:
                nu = np.maximum(0.0, nu + rho * np.asarray(in_res(z), dtype=float).reshape(-1))
            if violation > opts.feasibility_tol and violation > 0.25 * prev_violation:
                if rho >= opts.penalty_max:
                    if violation > 1e3 * opts.feasibility_tol and violation > 0.9 * prev_violation:
                        status = "infeasible-detected"
                        break
                rho = min(rho * opts.penalty_growth, opts.penalty_max)
            prev_violation = violation
            continue
        res = minimize(
            al_value_grad,
            z,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={
                "maxiter": opts.inner_maxiter,
                "ftol": 1e-14,
                "gtol": min(1e-9, 0.1 * opts.optimality_tol),
                "maxcor": 10,
            },
        )
        z = np.clip(res.x, problem.lower, problem.upper)
        total_inner += int(res.nit)
        ve, vi = violations(z)
        violation = max(ve, vi)
        kkt = kkt_residual(z)
        if violation <= opts.feasibility_tol and kkt <= opts.optimality_tol:
            status = "converged"
            break
        if n_eq:
            mu = mu + rho * eq_res(z)
        if n_in:
            nu = np.maximum(0.0, nu + rho * np.asarray(in_res(z), dtype=float).reshape(-1))
        if violation > opts.feasibility_tol and violation > 0.25 * prev_violation:
            if rho >= opts.penalty_max:
                if violation > 1e3 * opts.feasibility_tol and violation > 0.9 * prev_violation:
                    status = "infeasible-detected"
                    break
            rho = min(rho * opts.penalty_growth, opts.penalty_max)
        prev_violation = violation

    ve, vi = violations(z)
    f, _ = problem.objective(z)
    return SolverReport(
        x=z,
        objective=float(f),
        max_eq_violation=ve,
        max_ineq_violation=vi,
        iterations=total_inner,
        kkt_residual=kkt_residual(z),
        status=status if status != "max-iter" or outer < opts.max_outer else "max-iter",
    )


# ---------------------------------------------------------------------------
# Warm starting
# ---------------------------------------------------------------------------


@dataclass
class ShiftStructure:
    """Block layout a receding-horizon solution needs for shifting.

    ``u_pad`` / ``y_pads`` are the values appended at the tail (the setpoint;
    zero in deviation coordinates). ``hankel_pinv`` maps a stacked
    ``[features; states]`` right-hand side to the minimum-norm combination
    vector for re-initializing it against the shifted trajectory.
    """

    m: int
    degrees: tuple
    L: int
    u_pad: np.ndarray
    y_pads: list
    hankel_pinv: Optional[np.ndarray] = None
    rhs_builder: Optional[Callable] = None


def warm_start_shift(previous: dict, structure: ShiftStructure, shift: int) -> dict:
    """Shift a receding-horizon solution forward by ``shift`` steps.

    Input and output blocks advance in time with the tail padded by the
    setpoint; the combination vector is re-initialized by least squares
    against the shifted trajectory and slack entries restart at zero.
    """
    if shift < 0:
        raise ValueError("shift must be non-negative")
    u_prev = np.asarray(previous["u"], dtype=float)
    y_prev = [np.asarray(y, dtype=float) for y in previous["y"]]
    if u_prev.shape[1] != structure.m or len(y_prev) != len(structure.degrees):
        raise ValueError("previous solution does not match the shift structure")

    def shift_block(block, pad_value):
        if shift == 0:
            return block.copy()
        shifted = np.empty_like(block)
        shifted[:-shift] = block[shift:]
        shifted[-shift:] = pad_value
        return shifted

    u_new = shift_block(u_prev, structure.u_pad)
    y_new = [shift_block(y, pad) for y, pad in zip(y_prev, structure.y_pads)]

    out = {"u": u_new, "y": y_new}
    if "alpha" in previous:
        if structure.hankel_pinv is not None and structure.rhs_builder is not None:
            rhs = structure.rhs_builder(u_new, y_new)
            out["alpha"] = structure.hankel_pinv @ rhs
        else:
            out["alpha"] = np.asarray(previous["alpha"], dtype=float).copy()
    if "sigma" in previous:
        out["sigma"] = np.zeros_like(np.asarray(previous["sigma"], dtype=float))
    return out


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def _fd_gradient(fun, z, step):
    g = np.empty_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        g[i] = (fun(zp) - fun(zm)) / (2 * step)
    return g


def check_gradients(
    problem: NlpProblem,
    n_points: int = 5,
    step: float = 1e-6,
    tol: float = 1e-4,
    seed: int = 0,
    scale: float = 0.1,
) -> float:
    """Compare analytic gradients/jacobians against central differences.

    Samples points around the initial guess (inside the box), checks the
    objective gradient and every constraint jacobian row, and raises on the
    first relative mismatch beyond ``tol``. Returns the worst relative error.
    """
    rng = np.random.default_rng(seed)
    lo = np.where(np.isfinite(problem.lower), problem.lower, -1e3)
    hi = np.where(np.isfinite(problem.upper), problem.upper, 1e3)
    worst = 0.0

    def rel_err(analytic, fd):
        denom = max(1.0, float(np.max(np.abs(analytic))), float(np.max(np.abs(fd))))
        return float(np.max(np.abs(analytic - fd))) / denom

    for _ in range(n_points):
        z = np.clip(problem.x0 + scale * rng.standard_normal(problem.dim), lo, hi)
        _, g = problem.objective(z)
        g_fd = _fd_gradient(lambda zz: problem.objective(zz)[0], z, step)
        err = rel_err(g, g_fd)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(f"objective gradient mismatch: rel err {err:.2e}")
        for res, jac, tag in (
            (problem.eq_residual, problem.eq_jacobian, "equality"),
            (problem.ineq_residual, problem.ineq_jacobian, "inequality"),
        ):
            if res is None:
                continue
            J = np.atleast_2d(np.asarray(jac(z), dtype=float))
            J_fd = np.empty_like(J)
            for i in range(z.size):
                zp, zm = z.copy(), z.copy()
                zp[i] += step
                zm[i] -= step
                J_fd[:, i] = (
                    np.asarray(res(zp), dtype=float).reshape(-1)
                    - np.asarray(res(zm), dtype=float).reshape(-1)
                ) / (2 * step)
            err = rel_err(J, J_fd)
            worst = max(worst, err)
            if err > tol:
                raise AssertionError(f"{tag} jacobian mismatch: rel err {err:.2e}")
    return worst

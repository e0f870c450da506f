"""Data-based trajectory representation, simulation and output matching.

The key object stacks two Hankel matrices built from one offline trajectory:
the dictionary features evaluated along the data on top, the window states
below. A candidate input/output window belongs to the plant behavior exactly
when some combination vector reproduces both its feature sequence and its
state sequence from those blocks; simulation and output matching solve
regularized least-squares problems over that combination vector and come with
computable per-step error bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .trajlib import Sequence, build_hankel, is_persistently_exciting
from .plant import BrunovskyStructure, Trajectory, window_states
from .basis import BasisDictionary, evaluate_along


class InfeasibleInitialConditionError(RuntimeError):
    """The requested initial window state is not reachable from the data."""


class DictionaryLacksInputError(ValueError):
    """Output matching needs the raw input as the leading dictionary entries."""


class ConvergenceError(RuntimeError):
    """The combination-vector solve did not converge."""

    def __init__(self, message: str, gradient_norm: float):
        super().__init__(f"{message} (final gradient norm {gradient_norm:.3e})")
        self.gradient_norm = gradient_norm


# ---------------------------------------------------------------------------
# Hankel blocks of one offline trajectory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataDictionaryBlocks:
    """Feature and state Hankel blocks of one recorded trajectory.

    ``H_psi`` has depth ``horizon`` over the feature sequence, ``H_xi`` depth
    ``horizon + 1`` over the window states; both share their column count.
    Whether the feature sequence is persistently exciting of order
    ``horizon + n`` is recorded at construction.
    """

    horizon: int
    structure: BrunovskyStructure
    dictionary: BasisDictionary
    H_psi: np.ndarray
    H_xi: np.ndarray
    H_u: np.ndarray
    H_y: list
    pe_ok: bool
    pe_sigma_min: float
    noisy: bool

    @property
    def columns(self) -> int:
        return self.H_psi.shape[1]

    @property
    def r(self) -> int:
        return self.dictionary.r

    @classmethod
    def from_trajectory(
        cls,
        dictionary: BasisDictionary,
        traj: Trajectory,
        horizon: int,
        use_noisy: bool = False,
        pe_order_extra: Optional[int] = None,
    ) -> "DataDictionaryBlocks":
        xi_seq = traj.xi_noisy if use_noisy else traj.xi
        outputs = traj.outputs_noisy if use_noisy else traj.outputs
        N = traj.N
        feats = evaluate_along(dictionary, traj.u, xi_seq.data[:N])
        feat_seq = Sequence(feats)
        H_psi = build_hankel(feat_seq, horizon).entries
        H_xi = build_hankel(xi_seq, horizon + 1).entries
        if H_psi.shape[1] != H_xi.shape[1]:
            raise ValueError("feature and state Hankel column counts disagree")
        H_u = build_hankel(Sequence(traj.u), horizon).entries
        H_y = [
            build_hankel(Sequence(y), horizon + d).entries
            for y, d in zip(outputs, traj.structure.degrees)
        ]
        order = horizon + (pe_order_extra if pe_order_extra is not None else traj.structure.n)
        if N >= order:
            pe = is_persistently_exciting(feat_seq, order)
            pe_ok, pe_sigma = pe.is_pe, pe.sigma_min
        else:
            pe_ok, pe_sigma = False, 0.0
        return cls(
            horizon=horizon,
            structure=traj.structure,
            dictionary=dictionary,
            H_psi=H_psi,
            H_xi=H_xi,
            H_u=H_u,
            H_y=H_y,
            pe_ok=pe_ok,
            pe_sigma_min=pe_sigma,
            noisy=use_noisy,
        )

    def xi_block_row(self, k: int) -> np.ndarray:
        """Rows of state block ``k``: the map from a combination vector to the
        implied window state at step ``k``."""
        n = self.structure.n
        return self.H_xi[k * n : (k + 1) * n, :]


# ---------------------------------------------------------------------------
# Error-bound calculators
# ---------------------------------------------------------------------------


def geometric_sum(ratio: float, k: int) -> float:
    """Sum ``1 + ratio + ... + ratio**k``, stable near ratio one."""
    if k < 0:
        raise ValueError("k must be a non-negative integer")
    if ratio < 0:
        raise ValueError("ratio must be non-negative")
    if abs(ratio - 1.0) <= 1e-12:
        return float(k + 1)
    return float((1.0 - ratio ** (k + 1)) / (1.0 - ratio))


@dataclass(frozen=True)
class ErrorBoundInputs:
    """Constants entering the closed-loop prediction error bound."""

    eps_star: float
    w_star: float
    k_xi: float
    k_w: float
    g_norm_inf: float
    alpha_l1: float
    sigma_inf: float
    degrees: tuple

    def __post_init__(self):
        vals = (
            self.eps_star,
            self.w_star,
            self.k_xi,
            self.k_w,
            self.g_norm_inf,
            self.alpha_l1,
            self.sigma_inf,
        )
        if any(v < 0 for v in vals):
            raise ValueError("error-bound inputs must be non-negative")

    @property
    def d_max(self) -> int:
        return int(max(self.degrees))


def prediction_error_bound(inputs: ErrorBoundInputs, channel: int, k: int) -> float:
    """Bound on the gap between an optimal predicted output and the output the
    plant actually produces under the optimal input, ``k`` steps into the
    prediction window of the given channel.

    The bound is the geometric factor in the state Lipschitz constant times
    the one-step error budget from approximation error, measurement noise and
    slack.
    """
    d_i = inputs.degrees[channel]
    if k < 0:
        raise ValueError("step index must be non-negative")
    budget = (
        inputs.eps_star * (1.0 + inputs.alpha_l1)
        + (1.0 + inputs.k_w) * inputs.w_star * inputs.alpha_l1
        + (1.0 + inputs.g_norm_inf) * inputs.sigma_inf
    )
    return geometric_sum(inputs.k_xi, k + inputs.d_max - d_i) * budget


# ---------------------------------------------------------------------------
# Membership residual
# ---------------------------------------------------------------------------


def representation_residual(
    blocks: DataDictionaryBlocks,
    u_candidate: np.ndarray,
    y_candidates: list,
):
    """Least-squares membership test of a candidate window.

    The candidate input must span ``horizon`` steps and output channel ``i``
    must span ``horizon + d_i`` steps. Returns ``(residual, alpha)`` where the
    residual is the relative distance of the stacked candidate from the range
    of the data blocks; values near zero certify membership for noiseless
    data with an exactly representable dictionary.
    """
    L = blocks.horizon
    st = blocks.structure
    u_candidate = np.atleast_2d(np.asarray(u_candidate, dtype=float))
    if u_candidate.shape != (L, st.m):
        raise ValueError(f"candidate input must have shape ({L}, {st.m})")
    ys = [np.asarray(y, dtype=float).reshape(-1) for y in y_candidates]
    for i, (y, d) in enumerate(zip(ys, st.degrees)):
        if y.size != L + d:
            raise ValueError(f"candidate output {i} must have length {L + d}")
    xi_bar = window_states(ys, st)
    feats = evaluate_along(blocks.dictionary, u_candidate, xi_bar.data[:L])
    rhs = np.concatenate([feats.reshape(-1), xi_bar.data.reshape(-1)])
    A = np.vstack([blocks.H_psi, blocks.H_xi])
    alpha, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    denom = max(1.0, float(np.linalg.norm(rhs)))
    residual = float(np.linalg.norm(A @ alpha - rhs)) / denom
    return residual, alpha


# ---------------------------------------------------------------------------
# Shared machinery for the simulation / matching solves
# ---------------------------------------------------------------------------


def _initial_condition_subspace(H1_xi: np.ndarray, xi0: np.ndarray):
    """Particular solution and null-space basis of ``H1_xi @ alpha = xi0``.

    Raises when the equality is infeasible (the initial window state is not
    in the range of the data)."""
    U, s, Vt = np.linalg.svd(H1_xi, full_matrices=True)
    tol = max(H1_xi.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    alpha_p = Vt[:rank].T @ ((U[:, :rank].T @ xi0) / s[:rank])
    residual = float(np.linalg.norm(H1_xi @ alpha_p - xi0))
    if residual > 1e-9 * max(1.0, float(np.linalg.norm(xi0))):
        raise InfeasibleInitialConditionError(
            f"initial window state unreachable from data (residual {residual:.3e})"
        )
    nullspace = Vt[rank:].T
    return alpha_p, nullspace


def _solve_reduced(res_jac, x0, maxiter=100):
    """Damped Gauss-Newton on a reduced (equality-eliminated) residual.

    ``res_jac(beta)`` returns the stacked residual vector and its jacobian;
    the regularizer rows are part of the residual so the solve is an ordinary
    nonlinear least-squares problem.
    """
    from scipy.optimize import least_squares

    res = least_squares(
        lambda b: res_jac(b)[0],
        x0,
        jac=lambda b: res_jac(b)[1],
        method="trf",
        xtol=1e-14,
        ftol=1e-14,
        gtol=1e-12,
        max_nfev=maxiter,
    )
    f, J = res_jac(res.x)
    gnorm = float(np.max(np.abs(2.0 * (J.T @ f)))) if f.size else 0.0
    return res.x, gnorm, int(res.nfev)


@dataclass
class SimulationResult:
    outputs: list                 # channel i: (L + d_i,)
    alpha: np.ndarray
    residual_sq: float            # squared feature mismatch at the optimum
    bounds: list                  # channel i: (L + d_i,) per-step error bound
    alpha_l1: float
    objective: float
    gradient_norm: float
    iterations: int
    clamped: bool = False         # residual_sq clipped at zero


def _per_step_bounds(structure, L, eps_star, alpha_l1, gain, c_norm, k_xi):
    """Per-step bound arrays: exact zeros over the pinned initial window, then
    the geometric-sum envelope."""
    out = []
    for d in structure.degrees:
        b = np.zeros(L + d)
        for k in range(L):
            b[k + d] = geometric_sum(k_xi, k) * (
                eps_star * (1.0 + alpha_l1) + gain * c_norm
            )
        out.append(b)
    return out


def simulate_data_driven(
    blocks: DataDictionaryBlocks,
    u_new: np.ndarray,
    xi0: np.ndarray,
    lambda_alpha: float = 1e3,
    eps_star: float = 0.0,
    k_xi: float = 0.0,
    g_row_norm: float = 0.0,
    maxiter: int = 800,
) -> SimulationResult:
    """Simulate a new input from data only, with a certified error envelope.

    Minimizes the squared mismatch between the data-combined feature windows
    and the dictionary evaluated on the implied trajectory, plus a ridge term
    ``lambda_alpha * eps_star * ||alpha||^2``, subject to the combination
    reproducing the requested initial window state. That equality is
    eliminated by substitution when the first state block has full row rank.

    The first ``d_i`` returned samples of channel ``i`` equal the initial
    window exactly; later samples carry bounds built from ``eps_star``,
    ``k_xi`` and the coefficient row norm (or its model-free upper bound).
    """
    L = blocks.horizon
    st = blocks.structure
    u_new = np.atleast_2d(np.asarray(u_new, dtype=float))
    if u_new.shape != (L, st.m):
        raise ValueError(f"new input must have shape ({L}, {st.m})")
    xi0 = np.asarray(xi0, dtype=float).reshape(-1)
    if xi0.size != st.n:
        raise ValueError(f"initial window state must have length {st.n}")

    H_psi = blocks.H_psi
    H1_xi = blocks.xi_block_row(0)
    n, r = st.n, blocks.r
    alpha_p, Z = _initial_condition_subspace(H1_xi, xi0)

    # State rows 0..L of the implied trajectory, as one (L+1)*n map.
    H_xi = blocks.H_xi

    def features_and_jac(alpha, need_jac):
        xi_traj = (H_xi @ alpha).reshape(L + 1, n)
        psi = blocks.dictionary.value_batch(u_new, xi_traj[:L])
        mism = H_psi @ alpha - psi.reshape(-1)
        if not need_jac:
            return mism, None
        Jpsi = blocks.dictionary.jacobian_batch(u_new, xi_traj[:L])[:, :, st.m :]
        # d mism / d alpha = H_psi - blockdiag(dpsi/dxi) @ H_xi rows.
        J = H_psi.copy()
        for k in range(L):
            J[k * r : (k + 1) * r, :] -= Jpsi[k] @ H_xi[k * n : (k + 1) * n, :]
        return mism, J

    reg_sqrt = math.sqrt(lambda_alpha * eps_star)

    def reduced(beta):
        alpha = alpha_p + Z @ beta
        mism, J = features_and_jac(alpha, True)
        resid = np.concatenate([mism, reg_sqrt * alpha])
        jac = np.vstack([J @ Z, reg_sqrt * Z])
        return resid, jac

    # Fixed-point initialization: iterate the linear solve with the feature
    # right-hand side evaluated at the previous trajectory estimate.
    A_stack = np.vstack([H_psi, H1_xi])
    alpha = alpha_p
    for _ in range(4):
        xi_traj = (H_xi @ alpha).reshape(L + 1, n)
        psi = blocks.dictionary.value_batch(u_new, xi_traj[:L]).reshape(-1)
        rhs = np.concatenate([psi, xi0])
        alpha_new, *_ = np.linalg.lstsq(A_stack, rhs, rcond=None)
        alpha = alpha_p + Z @ (Z.T @ alpha_new)  # project back onto feasibility
    beta0 = Z.T @ (alpha - alpha_p)

    beta, gnorm, iters = _solve_reduced(reduced, beta0, maxiter=maxiter)
    f0, _ = reduced(beta)
    if gnorm > 1e-4 * max(1.0, float(f0 @ f0)):
        raise ConvergenceError("data-driven simulation solve stalled", gnorm)
    alpha = alpha_p + Z @ beta

    mism, _ = features_and_jac(alpha, False)
    reg = reg_sqrt**2
    objective = float(mism @ mism) + reg * float(alpha @ alpha)
    residual_sq = objective - reg * float(alpha @ alpha)
    clamped = residual_sq < 0
    residual_sq = max(residual_sq, 0.0)

    outputs = [Hy @ alpha for Hy in blocks.H_y]
    alpha_l1 = float(np.sum(np.abs(alpha)))
    bounds = _per_step_bounds(
        st, L, eps_star, alpha_l1, g_row_norm, math.sqrt(residual_sq), k_xi
    )
    return SimulationResult(
        outputs=outputs,
        alpha=alpha,
        residual_sq=residual_sq,
        bounds=bounds,
        alpha_l1=alpha_l1,
        objective=objective,
        gradient_norm=gnorm,
        iterations=iters,
        clamped=clamped,
    )


@dataclass
class MatchingResult:
    u: np.ndarray                 # (L, m)
    alpha: np.ndarray
    residual_sq: float
    bounds: list
    alpha_l1: float
    objective: float
    gradient_norm: float
    iterations: int
    clamped: bool = False


def match_output_data_driven(
    blocks: DataDictionaryBlocks,
    y_refs: list,
    lambda_alpha: float = 1e3,
    eps_star: float = 0.0,
    k_xi: float = 0.0,
    g_row_norm: float = 0.0,
    maxiter: int = 800,
) -> MatchingResult:
    """Recover the input that tracks a reference output window from data only.

    Dual of the simulation solve: the combination vector now implies the
    input (through the input Hankel block) while the reference fixes the full
    state window; the mismatch covers both the feature block and the state
    block. The dictionary must expose the raw input as its leading entries so
    the input can be read back out.
    """
    if not blocks.dictionary.u_prefix:
        raise DictionaryLacksInputError(
            "output matching requires the raw input as the first dictionary entries"
        )
    L = blocks.horizon
    st = blocks.structure
    ys = [np.asarray(y, dtype=float).reshape(-1) for y in y_refs]
    for i, (y, d) in enumerate(zip(ys, st.degrees)):
        if y.size != L + d:
            raise ValueError(f"reference output {i} must have length {L + d}")
    xi_bar = window_states(ys, st).data  # (L+1, n)
    xi0 = xi_bar[0]

    H_psi = blocks.H_psi
    H_xi = blocks.H_xi
    H_u = blocks.H_u
    H1_xi = blocks.xi_block_row(0)
    n, r, m = st.n, blocks.r, st.m
    alpha_p, Z = _initial_condition_subspace(H1_xi, xi0)

    xi_flat = xi_bar.reshape(-1)

    def mismatch_and_jac(alpha, need_jac):
        u_traj = (H_u @ alpha).reshape(L, m)
        psi = blocks.dictionary.value_batch(u_traj, xi_bar[:L])
        mism = np.concatenate(
            [H_psi @ alpha - psi.reshape(-1), H_xi @ alpha - xi_flat]
        )
        if not need_jac:
            return mism, None
        Jpsi = blocks.dictionary.jacobian_batch(u_traj, xi_bar[:L])[:, :, : m]
        J_top = H_psi.copy()
        for k in range(L):
            J_top[k * r : (k + 1) * r, :] -= Jpsi[k] @ H_u[k * m : (k + 1) * m, :]
        return mism, np.vstack([J_top, H_xi])

    reg_sqrt = math.sqrt(lambda_alpha * eps_star)

    def reduced(beta):
        alpha = alpha_p + Z @ beta
        mism, J = mismatch_and_jac(alpha, True)
        resid = np.concatenate([mism, reg_sqrt * alpha])
        jac = np.vstack([J @ Z, reg_sqrt * Z])
        return resid, jac

    A_stack = np.vstack([H_psi, H_xi])
    alpha = alpha_p
    for _ in range(4):
        u_traj = (H_u @ alpha).reshape(L, m)
        psi = blocks.dictionary.value_batch(u_traj, xi_bar[:L]).reshape(-1)
        rhs = np.concatenate([psi, xi_flat])
        alpha_new, *_ = np.linalg.lstsq(A_stack, rhs, rcond=None)
        alpha = alpha_p + Z @ (Z.T @ alpha_new)
    beta0 = Z.T @ (alpha - alpha_p)

    beta, gnorm, iters = _solve_reduced(reduced, beta0, maxiter=maxiter)
    f0, _ = reduced(beta)
    if gnorm > 1e-4 * max(1.0, float(f0 @ f0)):
        raise ConvergenceError("data-driven output-matching solve stalled", gnorm)
    alpha = alpha_p + Z @ beta

    mism, _ = mismatch_and_jac(alpha, False)
    reg = reg_sqrt**2
    objective = float(mism @ mism) + reg * float(alpha @ alpha)
    residual_sq = max(objective - reg * float(alpha @ alpha), 0.0)
    clamped = (objective - reg * float(alpha @ alpha)) < 0

    u_hat = (H_u @ alpha).reshape(L, m)
    alpha_l1 = float(np.sum(np.abs(alpha)))
    bounds = _per_step_bounds(
        st, L, eps_star, alpha_l1, g_row_norm + 1.0, math.sqrt(residual_sq), k_xi
    )
    return MatchingResult(
        u=u_hat,
        alpha=alpha,
        residual_sq=residual_sq,
        bounds=bounds,
        alpha_l1=alpha_l1,
        objective=objective,
        gradient_norm=gnorm,
        iterations=iters,
        clamped=clamped,
    )

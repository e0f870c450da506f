"""Nominal and robust data-driven predictive controllers.

The optimal control problem couples three decision groups: a combination
vector over the offline data columns, the predicted input window, and the
predicted per-channel output windows (the robust variant adds a slack on the
feature block). The feature block of the data representation is a nonlinear
equality; the state block is linear and, in the robust variant, absorbed into
a derived state slack that is penalized and norm-bounded. Past input/output
samples pin the window head, terminal equalities pin the final window state to
the setpoint, and the input box is enforced on every slot.

The closed-loop runner applies the first ``stride`` inputs of each solve
(one for the nominal single-step scheme, ``d_max`` for the robust multi-step
scheme), warm-starts the next solve by shifting, and logs everything needed
to evaluate the runtime error bounds afterwards.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .plant import BrunovskyStructure, NoiseModel, PlantModel
from .behavior import (
    DataDictionaryBlocks,
    ErrorBoundInputs,
    prediction_error_bound,
)
from . import solver as _solver


class MissingCertificateError(ValueError):
    """Robust mode needs certificate constants that were not supplied."""


@dataclass
class OcpSpec:
    """Static description of one receding-horizon problem family."""

    mode: str                              # "nominal" | "robust"
    L: int
    structure: BrunovskyStructure
    blocks: DataDictionaryBlocks
    Q: np.ndarray
    R: np.ndarray
    u_setpoint: np.ndarray
    y_setpoint: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    y_min: Optional[np.ndarray] = None
    y_max: Optional[np.ndarray] = None
    lambda_alpha: float = 1e4
    lambda_sigma: float = 1e8
    eps_star: float = 0.0
    w_star: float = 0.0
    slack_mode: str = "relaxed"            # "relaxed" | "exact"
    c_slack: float = 10.0
    k_psi: float = 0.0
    k_w: float = 0.0
    g_dagger_norm: float = 0.0

    def __post_init__(self):
        if self.mode not in ("nominal", "robust"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.slack_mode not in ("relaxed", "exact"):
            raise ValueError(f"unknown slack mode '{self.slack_mode}'")
        m = self.structure.m
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        np.linalg.cholesky(self.Q)
        np.linalg.cholesky(self.R)
        for name in ("u_setpoint", "y_setpoint", "u_min", "u_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(m))
        if self.y_min is not None:
            self.y_min = np.asarray(self.y_min, dtype=float).reshape(m)
            self.y_max = np.asarray(self.y_max, dtype=float).reshape(m)
        d_max = self.structure.d_max
        if self.mode == "robust" and self.L < d_max:
            raise ValueError(f"robust mode needs horizon >= {d_max}, got {self.L}")
        if self.blocks.horizon != self.L + d_max:
            raise ValueError(
                f"blocks depth {self.blocks.horizon} != L + d_max = {self.L + d_max}"
            )
        if not (np.all(self.u_setpoint > self.u_min) and np.all(self.u_setpoint < self.u_max)):
            raise ValueError("input setpoint must be strictly inside the input box")
        if self.y_min is not None and not (
            np.all(self.y_setpoint > self.y_min) and np.all(self.y_setpoint < self.y_max)
        ):
            raise ValueError("output setpoint must be strictly inside the output box")
        if self.mode == "robust" and self.slack_mode == "exact":
            if self.g_dagger_norm <= 0:
                raise MissingCertificateError(
                    "exact slack bound needs the right-inverse norm bound"
                )
        if not self.blocks.pe_ok:
            warnings.warn(
                "offline feature sequence failed the excitation check for "
                f"order {self.blocks.horizon + self.structure.n}",
                RuntimeWarning,
            )

    @property
    def d_max(self) -> int:
        return self.structure.d_max

    @property
    def horizon_total(self) -> int:
        return self.L + self.d_max

    @property
    def slack_level(self) -> float:
        return max(self.eps_star, self.w_star)


@dataclass
class OcpDecision:
    """Unpacked solution of one receding-horizon problem (absolute units)."""

    alpha: np.ndarray
    u_bar: np.ndarray                 # (L + d_max, m); row 0 is time -d_max
    y_bar: list                       # channel i: (L + d_max + d_i,)
    sigma_psi: Optional[np.ndarray]
    sigma_xi: Optional[np.ndarray]
    xi_bar: np.ndarray                # (L + d_max + 1, n)

    @property
    def alpha_l1(self) -> float:
        return float(np.sum(np.abs(self.alpha)))

    @property
    def sigma_inf(self) -> float:
        parts = [s for s in (self.sigma_psi, self.sigma_xi) if s is not None]
        if not parts:
            return 0.0
        return float(max(np.max(np.abs(s)) for s in parts))

    def planned_inputs(self, d_max: int, count: int) -> np.ndarray:
        """First ``count`` inputs of the prediction window (time 0 onward)."""
        return self.u_bar[d_max : d_max + count]


class OcpBuilder:
    """Caches the index maps and Hankel blocks of one problem family and
    assembles a solver problem for any measured history."""

    def __init__(self, spec: OcpSpec):
        self.spec = spec
        st = spec.structure
        self.m, self.n, self.r = st.m, st.n, spec.blocks.r
        self.Lp = spec.horizon_total
        self.L = spec.L
        self.d_max = spec.d_max
        self.degrees = st.degrees
        self.M = spec.blocks.columns
        self.split_alpha = spec.mode == "robust" and spec.slack_mode == "exact"
        self.has_sigma = spec.mode == "robust"

        m, n, r, Lp = self.m, self.n, self.r, self.Lp
        self.n_alpha = self.M * (2 if self.split_alpha else 1)
        self.n_u = Lp * m
        self.y_lens = [Lp + d for d in self.degrees]
        self.n_y = sum(self.y_lens)
        self.n_sigma = r * Lp if self.has_sigma else 0
        self.dim = self.n_alpha + self.n_u + self.n_y + self.n_sigma

        self.off_a = 0
        self.off_u = self.n_alpha
        self.off_y = self.off_u + self.n_u
        self.off_s = self.off_y + self.n_y
        self.y_offsets = np.cumsum([0] + self.y_lens[:-1]) + self.off_y

        # Window-state gather: xi_flat[j] = z[XI_COLS[j]] for states 0..Lp.
        off_n = st.channel_offsets()
        cols = np.empty(n * (Lp + 1), dtype=int)
        for k in range(Lp + 1):
            for i, d in enumerate(self.degrees):
                for j in range(d):
                    cols[k * n + off_n[i] + j] = self.y_offsets[i] + k + j
        self.XI_COLS = cols

        # Stage-cost gathers (prediction times 0..L-1).
        self.U_STAGE = self.off_u + (np.arange(self.d_max * m, Lp * m))
        ys = np.empty((self.L, m), dtype=int)
        for i in range(m):
            ys[:, i] = self.y_offsets[i] + self.d_max + np.arange(self.L)
        self.Y_STAGE = ys

        # Canonical decision count: combination vector, both windows, and the
        # feature slack, before any combination-vector splitting.
        self.audit_count = self.M + self.n_u + self.n_y + r * Lp
        N = self.M + Lp - 1
        expected = N + (2 * m + r - 1) * Lp + n + 1
        assert self.audit_count == expected, (self.audit_count, expected)

        self.H_psi = spec.blocks.H_psi
        self.H_xi = spec.blocks.H_xi
        self._pinv_stack = None
        self._tie_break = 1e-6 * (spec.lambda_alpha * spec.slack_level + 1.0)
        self._ls_J, self._ls_b = self._build_ls_form()

    def _build_ls_form(self):
        """Constant affine residual with ``objective = ||J z - b||^2``.

        Every objective term is a square (stage cost, regularizers, slack
        penalties), so the solver can run its Gauss-Newton inner method.
        """
        spec = self.spec
        m, Lp = self.m, self.Lp
        L_R = np.linalg.cholesky(spec.R).T
        L_Q = np.linalg.cholesky(spec.Q).T
        rows = []
        rhs = []
        for k in range(self.L):
            Ju = np.zeros((m, self.dim))
            Ju[:, self.U_STAGE[k * m : (k + 1) * m]] = L_R
            rows.append(Ju)
            rhs.append(L_R @ spec.u_setpoint)
            Jy = np.zeros((m, self.dim))
            Jy[:, self.Y_STAGE[k]] = L_Q
            rows.append(Jy)
            rhs.append(L_Q @ spec.y_setpoint)
        if self.has_sigma:
            ra = math.sqrt(spec.lambda_alpha * spec.slack_level)
            Ja = np.zeros((self.M, self.dim))
            if self.split_alpha:
                Ja[:, : self.M] = ra * np.eye(self.M)
                Ja[:, self.M : 2 * self.M] = -ra * np.eye(self.M)
            else:
                Ja[:, : self.M] = ra * np.eye(self.M)
            rows.append(Ja)
            rhs.append(np.zeros(self.M))
            if self.split_alpha:
                tb = math.sqrt(self._tie_break)
                Jt = np.zeros((2 * self.M, self.dim))
                Jt[:, : 2 * self.M] = tb * np.eye(2 * self.M)
                rows.append(Jt)
                rhs.append(np.zeros(2 * self.M))
            rs = math.sqrt(spec.lambda_sigma)
            Js = np.zeros((self.n_sigma, self.dim))
            Js[:, self.off_s : self.off_s + self.n_sigma] = rs * np.eye(self.n_sigma)
            rows.append(Js)
            rhs.append(np.zeros(self.n_sigma))
            rows.append(rs * self._sigma_xi_jacobian())
            rhs.append(np.zeros(self.H_xi.shape[0]))
        return np.vstack(rows), np.concatenate(rhs)

    # -- decision packing -------------------------------------------------

    def alpha_of(self, z: np.ndarray) -> np.ndarray:
        if self.split_alpha:
            return z[: self.M] - z[self.M : 2 * self.M]
        return z[: self.M]

    def alpha_abs_sum(self, z: np.ndarray) -> float:
        if self.split_alpha:
            return float(np.sum(z[: 2 * self.M]))
        return float(np.sum(np.abs(z[: self.M])))

    def scatter_alpha_grad(self, grad_z: np.ndarray, g_alpha: np.ndarray) -> None:
        if self.split_alpha:
            grad_z[: self.M] += g_alpha
            grad_z[self.M : 2 * self.M] -= g_alpha
        else:
            grad_z[: self.M] += g_alpha

    def u_of(self, z: np.ndarray) -> np.ndarray:
        return z[self.off_u : self.off_u + self.n_u].reshape(self.Lp, self.m)

    def y_of(self, z: np.ndarray) -> list:
        return [
            z[self.y_offsets[i] : self.y_offsets[i] + self.y_lens[i]]
            for i in range(self.m)
        ]

    def sigma_of(self, z: np.ndarray) -> Optional[np.ndarray]:
        if not self.has_sigma:
            return None
        return z[self.off_s : self.off_s + self.n_sigma]

    def xi_flat(self, z: np.ndarray) -> np.ndarray:
        return z[self.XI_COLS]

    def pack(self, alpha, u_bar, y_bar, sigma_psi=None) -> np.ndarray:
        z = np.zeros(self.dim)
        if self.split_alpha:
            z[: self.M] = np.maximum(alpha, 0.0)
            z[self.M : 2 * self.M] = np.maximum(-alpha, 0.0)
        else:
            z[: self.M] = alpha
        z[self.off_u : self.off_u + self.n_u] = np.asarray(u_bar).reshape(-1)
        for i in range(self.m):
            z[self.y_offsets[i] : self.y_offsets[i] + self.y_lens[i]] = y_bar[i]
        if self.has_sigma and sigma_psi is not None:
            z[self.off_s : self.off_s + self.n_sigma] = sigma_psi
        return z

    def unpack(self, z: np.ndarray) -> OcpDecision:
        alpha = self.alpha_of(z)
        sigma_psi = self.sigma_of(z)
        sigma_xi = None
        if self.has_sigma:
            sigma_xi = self.H_xi @ alpha - self.xi_flat(z)
        return OcpDecision(
            alpha=alpha.copy(),
            u_bar=self.u_of(z).copy(),
            y_bar=[y.copy() for y in self.y_of(z)],
            sigma_psi=None if sigma_psi is None else sigma_psi.copy(),
            sigma_xi=sigma_xi,
            xi_bar=self.xi_flat(z).reshape(self.Lp + 1, self.n),
        )

    # -- problem assembly --------------------------------------------------

    def _bounds(self, history_u: np.ndarray, history_y: np.ndarray):
        spec = self.spec
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        if self.split_alpha:
            lo[: 2 * self.M] = 0.0
        u_lo = np.tile(spec.u_min, self.Lp)
        u_hi = np.tile(spec.u_max, self.Lp)
        u_lo[: self.d_max * self.m] = history_u.reshape(-1)
        u_hi[: self.d_max * self.m] = history_u.reshape(-1)
        lo[self.off_u : self.off_u + self.n_u] = u_lo
        hi[self.off_u : self.off_u + self.n_u] = u_hi
        for i in range(self.m):
            o = self.y_offsets[i]
            if spec.y_min is not None:
                lo[o + self.d_max : o + self.Lp] = spec.y_min[i]
                hi[o + self.d_max : o + self.Lp] = spec.y_max[i]
            lo[o : o + self.d_max] = history_y[:, i]
            hi[o : o + self.d_max] = history_y[:, i]
            lo[o + self.Lp : o + self.y_lens[i]] = spec.y_setpoint[i]
            hi[o + self.Lp : o + self.y_lens[i]] = spec.y_setpoint[i]
        if self.has_sigma and spec.slack_mode == "relaxed":
            b = spec.c_slack * spec.slack_level
            lo[self.off_s : self.off_s + self.n_sigma] = -b
            hi[self.off_s : self.off_s + self.n_sigma] = b
        return lo, hi

    def _features(self, z, need_jac: bool):
        u = self.u_of(z)
        xi = self.xi_flat(z)[: self.Lp * self.n].reshape(self.Lp, self.n)
        dic = self.spec.blocks.dictionary
        psi = dic.value_batch(u, xi)
        jac = dic.jacobian_batch(u, xi) if need_jac else None
        return psi, jac

    def _eq_residual(self, z):
        psi, _ = self._features(z, False)
        c = psi.reshape(-1) - self.H_psi @ self.alpha_of(z)
        if self.has_sigma:
            c = c + self.sigma_of(z)
        return c

    def _eq_jacobian(self, z):
        _, jpsi = self._features(z, True)
        m, n, r = self.m, self.n, self.r
        J = np.zeros((r * self.Lp, self.dim))
        if self.split_alpha:
            J[:, : self.M] = -self.H_psi
            J[:, self.M : 2 * self.M] = self.H_psi
        else:
            J[:, : self.M] = -self.H_psi
        for k in range(self.Lp):
            rows = slice(k * r, (k + 1) * r)
            J[rows, self.off_u + k * m : self.off_u + (k + 1) * m] = jpsi[k, :, :m]
            ycols = self.XI_COLS[k * n : (k + 1) * n]
            J[rows.start : rows.stop, ycols] = jpsi[k, :, m:]
        if self.has_sigma:
            J[:, self.off_s : self.off_s + self.n_sigma] = np.eye(self.n_sigma)
        return J

    def _sigma_xi(self, z):
        return self.H_xi @ self.alpha_of(z) - self.xi_flat(z)

    def _sigma_xi_jacobian(self):
        """Constant jacobian of the derived state slack."""
        nrow = self.H_xi.shape[0]
        J = np.zeros((nrow, self.dim))
        if self.split_alpha:
            J[:, : self.M] = self.H_xi
            J[:, self.M : 2 * self.M] = -self.H_xi
        else:
            J[:, : self.M] = self.H_xi
        J[np.arange(nrow), self.XI_COLS] -= 1.0
        return J

    def _objective(self, z):
        spec = self.spec
        f = 0.0
        grad = np.zeros(self.dim)
        # stage cost over prediction times 0..L-1
        du = z[self.U_STAGE].reshape(self.L, self.m) - spec.u_setpoint
        dy = z[self.Y_STAGE.reshape(-1)].reshape(self.L, self.m) - spec.y_setpoint
        Ru = du @ spec.R
        Qy = dy @ spec.Q
        f += float(np.sum(du * Ru) + np.sum(dy * Qy))
        grad[self.U_STAGE] += (2.0 * Ru).reshape(-1)
        np.add.at(grad, self.Y_STAGE.reshape(-1), (2.0 * Qy).reshape(-1))
        if self.has_sigma:
            alpha = self.alpha_of(z)
            ra = spec.lambda_alpha * spec.slack_level
            f += ra * float(alpha @ alpha)
            self.scatter_alpha_grad(grad, 2.0 * ra * alpha)
            if self.split_alpha:
                # tiny tie-break on the split halves: removes the common-shift
                # null direction and drives them complementary, so their sum
                # equals the one-norm of the combination vector exactly
                tb = self._tie_break
                f += tb * float(z[: 2 * self.M] @ z[: 2 * self.M])
                grad[: 2 * self.M] += 2.0 * tb * z[: 2 * self.M]
            sp = self.sigma_of(z)
            f += spec.lambda_sigma * float(sp @ sp)
            grad[self.off_s : self.off_s + self.n_sigma] += 2.0 * spec.lambda_sigma * sp
            sx = self._sigma_xi(z)
            f += spec.lambda_sigma * float(sx @ sx)
            g_sx = 2.0 * spec.lambda_sigma * sx
            self.scatter_alpha_grad(grad, self.H_xi.T @ g_sx)
            np.subtract.at(grad, self.XI_COLS, g_sx)
        return f, grad

    def _slack_bound_constraints(self):
        """Inequality residual/jacobian for the slack sup-norm bound.

        Relaxed mode bounds only the derived state slack (the feature slack is
        boxed directly); exact mode bounds both against the combination-vector
        budget, which needs the split variables.
        """
        spec = self.spec
        J_sx = self._sigma_xi_jacobian()
        nx = J_sx.shape[0]

        if spec.slack_mode == "relaxed":
            b = spec.c_slack * spec.slack_level
            if b == 0.0:
                return None, None, True  # degenerate: enforce as equality

            def residual(z):
                sx = self._sigma_xi(z)
                return np.concatenate([sx - b, -sx - b])

            def jacobian(z):
                return np.vstack([J_sx, -J_sx])

            return residual, jacobian, False

        gain = (spec.eps_star + spec.k_w * spec.w_star) * spec.g_dagger_norm
        base = spec.k_psi * spec.w_star + gain

        def residual(z):
            bound = base + gain * self.alpha_abs_sum(z)
            sp = self.sigma_of(z)
            sx = self._sigma_xi(z)
            return np.concatenate([sp - bound, -sp - bound, sx - bound, -sx - bound])

        def jacobian(z):
            ns = self.n_sigma
            J = np.zeros((2 * ns + 2 * nx, self.dim))
            J[:ns, self.off_s : self.off_s + ns] = np.eye(ns)
            J[ns : 2 * ns, self.off_s : self.off_s + ns] = -np.eye(ns)
            J[2 * ns : 2 * ns + nx] = J_sx
            J[2 * ns + nx :] = -J_sx
            J[:, : 2 * self.M] -= gain  # d bound / d alpha_split
            return J

        return residual, jacobian, False

    def build(self, history_u: np.ndarray, history_y: np.ndarray, z0=None):
        """Solver-ready problem for one measured history.

        ``history_u`` and ``history_y`` hold the last ``d_max`` applied inputs
        and measured outputs, oldest first.
        """
        history_u = np.asarray(history_u, dtype=float).reshape(self.d_max, self.m)
        history_y = np.asarray(history_y, dtype=float).reshape(self.d_max, self.m)
        lo, hi = self._bounds(history_u, history_y)
        if z0 is None:
            z0 = self.initial_guess(history_u, history_y)
        z0 = np.clip(z0, lo, hi)

        linear_eq = None
        ineq_res = ineq_jac = None
        if self.spec.mode == "nominal":
            A = self._sigma_xi_jacobian()
            linear_eq = _solver.LinearEquality(A=A, b=np.zeros(A.shape[0]))
        else:
            ineq_res, ineq_jac, degenerate = self._slack_bound_constraints()
            if degenerate:
                A = self._sigma_xi_jacobian()
                linear_eq = _solver.LinearEquality(A=A, b=np.zeros(A.shape[0]))

        return _solver.NlpProblem(
            dim=self.dim,
            objective=self._objective,
            x0=z0,
            lower=lo,
            upper=hi,
            eq_residual=self._eq_residual,
            eq_jacobian=self._eq_jacobian,
            linear_eq=linear_eq,
            ineq_residual=ineq_res,
            ineq_jacobian=ineq_jac,
            # the split formulation keeps many variables pinned at their
            # bound; the quasi-Newton inner handles those active sets better
            # than the trust-region least-squares path
            ls_residual=None if self.split_alpha else (lambda z: self._ls_J @ z - self._ls_b),
            ls_jacobian=None if self.split_alpha else (lambda z: self._ls_J),
        )

    # -- guesses and warm starts -------------------------------------------

    def _alpha_pinv(self):
        if self._pinv_stack is None:
            self._pinv_stack = np.linalg.pinv(np.vstack([self.H_psi, self.H_xi]))
        return self._pinv_stack

    def _alpha_for_trajectory(self, u_bar, y_bar):
        from .plant import window_states

        xi = window_states(y_bar, self.spec.structure).data
        psi = self.spec.blocks.dictionary.value_batch(u_bar, xi[: self.Lp])
        rhs = np.concatenate([psi.reshape(-1), xi.reshape(-1)])
        return self._alpha_pinv() @ rhs

    def initial_guess(self, history_u, history_y) -> np.ndarray:
        """Cold-start guess: ramp the outputs to the setpoint, hold the input
        setpoint, and fit the combination vector to that trajectory."""
        spec = self.spec
        u_bar = np.tile(spec.u_setpoint, (self.Lp, 1))
        u_bar[: self.d_max] = history_u
        y_bar = []
        for i in range(self.m):
            y = np.empty(self.y_lens[i])
            y[: self.d_max] = history_y[:, i]
            ramp = np.linspace(history_y[-1, i], spec.y_setpoint[i], self.L + 1)[1:]
            y[self.d_max : self.d_max + self.L] = ramp
            y[self.d_max + self.L :] = spec.y_setpoint[i]
            y_bar.append(y)
        alpha = self._alpha_for_trajectory(u_bar, y_bar)
        sigma = None
        if self.has_sigma:
            from .plant import window_states

            xi = window_states(y_bar, self.spec.structure).data
            psi = spec.blocks.dictionary.value_batch(u_bar, xi[: self.Lp])
            sigma = self.H_psi @ alpha - psi.reshape(-1)
        return self.pack(alpha, u_bar, y_bar, sigma)

    def shift_structure(self) -> _solver.ShiftStructure:
        spec = self.spec

        def rhs(u_bar, y_bar):
            from .plant import window_states

            xi = window_states(y_bar, self.spec.structure).data
            psi = spec.blocks.dictionary.value_batch(u_bar, xi[: self.Lp])
            return np.concatenate([psi.reshape(-1), xi.reshape(-1)])

        return _solver.ShiftStructure(
            m=self.m,
            degrees=self.degrees,
            L=self.Lp,
            u_pad=spec.u_setpoint,
            y_pads=[spec.y_setpoint[i] for i in range(self.m)],
            hankel_pinv=self._alpha_pinv(),
            rhs_builder=rhs,
        )

    def shifted_guess(self, decision: OcpDecision, shift: int) -> np.ndarray:
        prev = {
            "u": decision.u_bar,
            "y": decision.y_bar,
            "alpha": decision.alpha,
        }
        if self.has_sigma:
            prev["sigma"] = decision.sigma_psi
        out = _solver.warm_start_shift(prev, self.shift_structure(), shift)
        return self.pack(
            out["alpha"], out["u"], out["y"], out.get("sigma")
        )


class _RelaxedDirect:
    """Variable-projection form of the relaxed robust problem.

    The feature equality pins the feature slack, and for fixed input/output
    windows the remaining objective is a ridge least-squares in the
    combination vector; both are eliminated with one precomputed linear map.
    What is left is a small bounded nonlinear least-squares over the free
    input/output slots. Valid whenever the slack-bound inequality is inactive
    at the optimum, which is checked afterwards.
    """

    def __init__(self, builder: OcpBuilder):
        spec = builder.spec
        if spec.mode != "robust" or spec.slack_mode != "relaxed":
            raise ValueError("direct solve applies to the relaxed robust mode only")
        if spec.c_slack * spec.slack_level <= 0:
            raise ValueError("direct solve needs a positive slack bound")
        self.b = builder
        m, L, Lp, M, n, r = builder.m, builder.L, builder.Lp, builder.M, builder.n, builder.r
        self.n_free_u = L * m
        self.n_free_y = L * m
        self.dim = self.n_free_u + self.n_free_y
        self.sl_u = slice(0, self.n_free_u)
        self.sl_y = slice(self.n_free_u, self.dim)

        # Window-state entries as a function of the reduced vector: constant
        # part from history/terminal pins plus a 0/1 scatter of the free slots.
        y_concat_to_col = np.full(builder.n_y, -1, dtype=int)
        for i in range(m):
            base = builder.y_offsets[i] - builder.off_y
            for k in range(L):
                y_concat_to_col[base + builder.d_max + k] = self.sl_y.start + i * L + k
        self.y_state_cols = y_concat_to_col[builder.XI_COLS - builder.off_y]
        n_xi = n * (Lp + 1)
        D_xi = np.zeros((n_xi, self.dim))
        for j, c in enumerate(self.y_state_cols):
            if c >= 0:
                D_xi[j, c] = 1.0
        self.D_xi = D_xi

        # Ridge elimination of the combination vector: for fixed windows,
        # alpha minimizes lam_s*||Hs a - g||^2 + ra^2*||a||^2 with constant Hs.
        self.rs = math.sqrt(spec.lambda_sigma)
        self.ra = math.sqrt(spec.lambda_alpha * spec.slack_level)
        Hs = np.vstack([builder.H_psi, builder.H_xi])
        A = np.vstack([self.rs * Hs, self.ra * np.eye(M)])
        self.P = np.linalg.pinv(A)[:, : Hs.shape[0]] * self.rs   # alpha = P @ g
        self.HpsiP = builder.H_psi @ self.P
        self.HxiP = builder.H_xi @ self.P
        self.raP = self.ra * self.P

        L_R = np.linalg.cholesky(spec.R).T
        L_Q = np.linalg.cholesky(spec.Q).T
        self.rows_stage = slice(0, 2 * L * m)
        self.rows_alpha = slice(2 * L * m, 2 * L * m + M)
        self.rows_spsi = slice(self.rows_alpha.stop, self.rows_alpha.stop + r * Lp)
        self.rows_sxi = slice(self.rows_spsi.stop, self.rows_spsi.stop + n_xi)
        self.n_rows = self.rows_sxi.stop

        J_stage = np.zeros((2 * L * m, self.dim))
        b_stage = np.zeros(2 * L * m)
        for k in range(L):
            J_stage[k * m : (k + 1) * m, k * m : (k + 1) * m] = L_R
            b_stage[k * m : (k + 1) * m] = L_R @ spec.u_setpoint
            rows = slice(L * m + k * m, L * m + (k + 1) * m)
            cols = [self.sl_y.start + i * L + k for i in range(m)]
            J_stage[rows, cols] = L_Q
            b_stage[rows] = L_Q @ spec.y_setpoint
        self.J_stage = J_stage
        self.b_stage = b_stage
        self.hist_u = None
        self.hist_y = None
        self._xi_fixed = None

    def set_history(self, hist_u, hist_y):
        self.hist_u = np.asarray(hist_u, dtype=float).reshape(self.b.d_max, self.b.m)
        self.hist_y = np.asarray(hist_y, dtype=float).reshape(self.b.d_max, self.b.m)
        y_fixed = self._assemble_y_concat(np.zeros(self.n_free_y))
        xi = y_fixed[self.b.XI_COLS - self.b.off_y]
        self._xi_fixed = np.where(self.y_state_cols < 0, xi, 0.0)

    def _assemble_y_concat(self, y_free):
        b = self.b
        out = np.empty(b.n_y)
        for i in range(b.m):
            base = b.y_offsets[i] - b.off_y
            out[base : base + b.d_max] = self.hist_y[:, i]
            out[base + b.d_max : base + b.d_max + b.L] = y_free[i * b.L : (i + 1) * b.L]
            out[base + b.Lp : base + b.y_lens[i]] = b.spec.y_setpoint[i]
        return out

    def _u_full(self, zf):
        return np.vstack([self.hist_u, zf[self.sl_u].reshape(self.b.L, self.b.m)])

    def _pieces(self, zf, need_jac):
        b = self.b
        xi_flat = self._xi_fixed + self.D_xi @ zf
        xi = xi_flat.reshape(b.Lp + 1, b.n)
        u_full = self._u_full(zf)
        dic = b.spec.blocks.dictionary
        psi = dic.value_batch(u_full, xi[: b.Lp]).reshape(-1)
        g = np.concatenate([psi, xi_flat])
        if not need_jac:
            return g, psi, xi_flat, None
        jpsi = dic.jacobian_batch(u_full, xi[: b.Lp])
        m, n, r = b.m, b.n, b.r
        dpsi = np.zeros((r * b.Lp, self.dim))
        for k in range(b.Lp):
            rows = slice(k * r, (k + 1) * r)
            if k >= b.d_max:
                ku = k - b.d_max
                dpsi[rows, ku * m : (ku + 1) * m] = jpsi[k, :, :m]
            cols = self.y_state_cols[k * n : (k + 1) * n]
            for q in range(n):
                if cols[q] >= 0:
                    dpsi[rows, cols[q]] += jpsi[k, :, m + q]
        return g, psi, xi_flat, dpsi

    def residual(self, zf):
        g, psi, xi_flat, _ = self._pieces(zf, False)
        return np.concatenate(
            [
                self.J_stage @ zf - self.b_stage,
                self.raP @ g,
                self.rs * (self.HpsiP @ g - psi),
                self.rs * (self.HxiP @ g - xi_flat),
            ]
        )

    def jacobian(self, zf):
        g, psi, xi_flat, dpsi = self._pieces(zf, True)
        dg = np.vstack([dpsi, self.D_xi])
        return np.vstack(
            [
                self.J_stage,
                self.raP @ dg,
                self.rs * (self.HpsiP @ dg - dpsi),
                self.rs * (self.HxiP @ dg - self.D_xi),
            ]
        )

    def bounds(self):
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        lo[self.sl_u] = np.tile(self.b.spec.u_min, self.b.L)
        hi[self.sl_u] = np.tile(self.b.spec.u_max, self.b.L)
        return lo, hi

    def reduced_from_decision(self, d: OcpDecision) -> np.ndarray:
        b = self.b
        zf = np.empty(self.dim)
        zf[self.sl_u] = d.u_bar[b.d_max :].reshape(-1)
        zf[self.sl_y] = np.concatenate(
            [d.y_bar[i][b.d_max : b.d_max + b.L] for i in range(b.m)]
        )
        return zf

    def decision_from_reduced(self, zf: np.ndarray) -> OcpDecision:
        b = self.b
        g, psi, xi_flat, _ = self._pieces(zf, False)
        alpha = self.P @ g
        u_bar = self._u_full(zf)
        y_free = zf[self.sl_y]
        y_bar = []
        for i in range(b.m):
            y = np.empty(b.y_lens[i])
            y[: b.d_max] = self.hist_y[:, i]
            y[b.d_max : b.d_max + b.L] = y_free[i * b.L : (i + 1) * b.L]
            y[b.Lp :] = b.spec.y_setpoint[i]
            y_bar.append(y)
        return OcpDecision(
            alpha=alpha,
            u_bar=u_bar,
            y_bar=y_bar,
            sigma_psi=b.H_psi @ alpha - psi,
            sigma_xi=b.H_xi @ alpha - xi_flat,
            xi_bar=xi_flat.reshape(b.Lp + 1, b.n),
        )


def solve_relaxed_direct(
    builder: OcpBuilder,
    history_u,
    history_y,
    warm_decision: Optional[OcpDecision] = None,
    maxiter: int = 60,
):
    """Solve the relaxed robust problem by slack and combination elimination.

    Returns ``(decision, info)`` where ``info`` carries the objective, solver
    iterations and whether the slack bound held at the optimum (when it does
    not, the caller must fall back to the constrained path).
    """
    from scipy.optimize import least_squares

    direct = getattr(builder, "_direct_cache", None)
    if direct is None:
        direct = _RelaxedDirect(builder)
        builder._direct_cache = direct
    direct.set_history(history_u, history_y)
    if warm_decision is None:
        z0_full = builder.initial_guess(
            np.asarray(history_u, dtype=float).reshape(builder.d_max, builder.m),
            np.asarray(history_y, dtype=float).reshape(builder.d_max, builder.m),
        )
        warm_decision = builder.unpack(z0_full)
    zf0 = direct.reduced_from_decision(warm_decision)
    lo, hi = direct.bounds()
    zf0 = np.clip(zf0, lo, hi)
    res = least_squares(
        direct.residual,
        zf0,
        jac=direct.jacobian,
        bounds=(lo, hi),
        method="trf",
        xtol=1e-12,
        ftol=1e-12,
        gtol=1e-10,
        max_nfev=maxiter,
    )
    decision = direct.decision_from_reduced(res.x)
    bound = builder.spec.c_slack * builder.spec.slack_level
    bound_ok = decision.sigma_inf <= bound + 1e-9
    if not bound_ok:
        status = "bound-active"
    elif res.status > 0:
        status = "converged"
    else:
        status = "max-iter"
    info = {
        "objective": float(res.cost * 2.0),
        "iterations": int(res.nfev),
        "status": status,
        "bound_ok": bound_ok,
    }
    return decision, info


def build_nominal_ocp(spec: OcpSpec, history_u, history_y):
    """Nominal problem for one history; returns ``(problem, builder)``."""
    if spec.mode != "nominal":
        raise ValueError("spec mode must be 'nominal'")
    builder = OcpBuilder(spec)
    return builder.build(history_u, history_y), builder


def build_robust_ocp(spec: OcpSpec, history_u, history_y):
    """Robust problem for one history; returns ``(problem, builder)``."""
    if spec.mode != "robust":
        raise ValueError("spec mode must be 'robust'")
    builder = OcpBuilder(spec)
    return builder.build(history_u, history_y), builder


def constraint_violation(builder: OcpBuilder, problem: _solver.NlpProblem, z) -> float:
    """Sup-norm violation of every constraint group at a candidate point."""
    v = 0.0
    z = np.asarray(z, dtype=float)
    v = max(v, float(np.max(np.maximum(problem.lower - z, z - problem.upper))))
    if problem.eq_residual is not None:
        v = max(v, float(np.max(np.abs(problem.eq_residual(z)))))
    if problem.linear_eq is not None:
        v = max(v, float(np.max(np.abs(problem.linear_eq.A @ z - problem.linear_eq.b))))
    if problem.ineq_residual is not None:
        v = max(v, float(np.max(np.maximum(0.0, problem.ineq_residual(z)))))
    return v


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------


@dataclass
class SolveRecord:
    t: int
    status: str
    objective: float
    alpha_l1: float
    sigma_inf: float
    iterations: int
    max_violation: float
    applied: bool
    predicted_outputs: list          # channel i: prediction times 0..L+d_i-1
    decision: Optional[OcpDecision] = None


@dataclass
class ClosedLoopLog:
    stride: int
    degrees: tuple
    u_setpoint: np.ndarray
    y_setpoint: np.ndarray
    bootstrap_steps: int
    times: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    outputs_clean: list = field(default_factory=list)
    outputs_measured: list = field(default_factory=list)
    stage_costs: list = field(default_factory=list)
    solves: list = field(default_factory=list)

    def settled_error(self, last: int = 50) -> float:
        """Time-averaged sup-norm output error over the final ``last`` steps."""
        y = np.asarray(self.outputs_clean[-last:])
        return float(np.mean(np.max(np.abs(y - self.y_setpoint), axis=1)))

    def as_arrays(self) -> dict:
        return {
            "t": np.asarray(self.times),
            "u": np.asarray(self.inputs),
            "y": np.asarray(self.outputs_clean),
            "y_measured": np.asarray(self.outputs_measured),
            "stage_cost": np.asarray(self.stage_costs),
        }


def run_closed_loop(
    spec: OcpSpec,
    plant_model: PlantModel,
    noise: NoiseModel,
    x0: np.ndarray,
    total_steps: int,
    stride: Optional[int] = None,
    hold_input: Optional[np.ndarray] = None,
    solver_options: Optional[_solver.SolverOptions] = None,
    keep_decisions: bool = False,
) -> ClosedLoopLog:
    """Receding-horizon loop on a ground-truth plant.

    Before the first solve the plant is pre-rolled ``d_max`` steps holding
    ``hold_input`` (default: the input setpoint) to populate the history
    pins. Measurement noise affects only what the controller sees; the clean
    outputs are logged alongside for evaluation. A solve that neither
    converges nor reaches near-feasibility is not applied: the previous
    input is held for one stride and the event is flagged in the log.
    """
    mode_stride = spec.d_max if spec.mode == "robust" else 1
    stride = mode_stride if stride is None else stride
    if total_steps % stride != 0:
        raise ValueError(f"total steps must be a multiple of the stride {stride}")
    builder = OcpBuilder(spec)
    opts = solver_options or _solver.SolverOptions()
    d_max = spec.d_max
    m = spec.structure.m

    w = noise.samples(d_max + total_steps, m)
    hold = spec.u_setpoint if hold_input is None else np.asarray(hold_input, dtype=float)

    log = ClosedLoopLog(
        stride=stride,
        degrees=spec.structure.degrees,
        u_setpoint=spec.u_setpoint.copy(),
        y_setpoint=spec.y_setpoint.copy(),
        bootstrap_steps=d_max,
    )

    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    hist_u = np.empty((d_max, m))
    hist_y = np.empty((d_max, m))

    def record(t, u):
        nonlocal x
        y_clean = plant_model.measure(x)
        y_meas = y_clean + w[t]
        du = u - spec.u_setpoint
        dy = y_clean - spec.y_setpoint
        log.times.append(t - d_max)
        log.inputs.append(u.copy())
        log.outputs_clean.append(y_clean)
        log.outputs_measured.append(y_meas)
        log.stage_costs.append(float(du @ spec.R @ du + dy @ spec.Q @ dy))
        x = np.asarray(plant_model.step(x, u), dtype=float).reshape(-1)
        return y_meas

    for t in range(d_max):
        y_meas = record(t, hold.copy())
        hist_u[t] = hold
        hist_y[t] = y_meas

    prev_decision = None
    prev_applied = np.tile(hold, (stride, 1))
    use_direct = (
        spec.mode == "robust"
        and spec.slack_mode == "relaxed"
        and spec.c_slack * spec.slack_level > 0
    )

    for t0 in range(0, total_steps, stride):
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"plant state diverged at step {t0}")
        warm = None
        if prev_decision is not None:
            warm = builder.unpack(builder.shifted_guess(prev_decision, stride))
        decision = None
        solve_failed = False
        if use_direct:
            try:
                decision, info = solve_relaxed_direct(builder, hist_u, hist_y, warm)
            except Exception:
                decision, solve_failed = None, True
            if decision is not None and info["bound_ok"]:
                status = info["status"]
                objective = info["objective"]
                iterations = info["iterations"]
                max_violation = 0.0
            else:
                decision = None  # slack bound active: take the constrained path
        if decision is None and not solve_failed:
            z0 = None if warm is None else builder.pack(
                warm.alpha, warm.u_bar, warm.y_bar, warm.sigma_psi
            )
            try:
                problem = builder.build(hist_u, hist_y, z0=z0)
                report = _solver.solve(problem, opts)
            except Exception:
                solve_failed = True
            else:
                decision = builder.unpack(report.x)
                status = report.status
                objective = report.objective
                iterations = report.iterations
                max_violation = report.max_violation
        if solve_failed or decision is None:
            decision = prev_decision if prev_decision is not None else builder.unpack(
                np.clip(builder.initial_guess(hist_u, hist_y), -1e6, 1e6)
            )
            status, objective, iterations, max_violation = "solver-error", np.inf, 0, np.inf
        accept = status == "converged" or max_violation <= 1e-5
        if accept:
            inputs = decision.planned_inputs(d_max, stride)
            prev_decision = decision
        else:
            inputs = prev_applied.copy()
        rec = SolveRecord(
            t=t0,
            status=status,
            objective=objective,
            alpha_l1=decision.alpha_l1,
            sigma_inf=decision.sigma_inf,
            iterations=iterations,
            max_violation=max_violation,
            applied=accept,
            predicted_outputs=[y[d_max:].copy() for y in decision.y_bar],
            decision=decision if keep_decisions else None,
        )
        log.solves.append(rec)
        for j in range(stride):
            u = np.clip(inputs[j], spec.u_min, spec.u_max)
            y_meas = record(d_max + t0 + j, u)
            hist_u = np.vstack([hist_u[1:], u])
            hist_y = np.vstack([hist_y[1:], y_meas])
        prev_applied = inputs.copy()

    return log


def evaluate_runtime_bounds(
    log: ClosedLoopLog,
    eps_star: float,
    w_star: float,
    k_xi: float,
    k_w: float,
    g_norm_inf: float,
) -> list:
    """Pair each applied solve's realized prediction errors with their bound.

    Returns rows ``(solve_time, k, channel, realized, bound)`` for the steps
    each solve actually applied, using that solve's combination-vector and
    slack norms in the error budget.
    """
    rows = []
    y = np.asarray(log.outputs_clean)
    for rec in log.solves:
        if not rec.applied:
            continue
        inputs = ErrorBoundInputs(
            eps_star=eps_star,
            w_star=w_star,
            k_xi=k_xi,
            k_w=k_w,
            g_norm_inf=g_norm_inf,
            alpha_l1=rec.alpha_l1,
            sigma_inf=rec.sigma_inf,
            degrees=log.degrees,
        )
        for k in range(log.stride):
            step = log.bootstrap_steps + rec.t + k
            for i in range(len(log.degrees)):
                realized = abs(y[step, i] - rec.predicted_outputs[i][k])
                bound = prediction_error_bound(inputs, i, k)
                rows.append((rec.t, k, i, realized, bound))
    return rows

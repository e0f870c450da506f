"""Ground-truth nonlinear plants for data generation and closed-loop evaluation.

Provides the generic discrete-time plant interface, the fully actuated double
inverted pendulum (explicit Euler discretization of the rigid-body dynamics),
relative-degree probing, the window-state (Brunovsky) construction, bounded
output-noise injection and the offline data-collection routine.

Angle convention for the pendulum follows the rigid-body formulas used by the
gravity vector below: an angle of zero puts a link horizontal, ``pi/2`` points
it straight up and ``-pi/2`` straight down. Both joints are actuated and the
measured outputs are the two joint angles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, TYPE_CHECKING

import numpy as np

from .trajlib import Sequence

if TYPE_CHECKING:  # pragma: no cover
    from .basis import OperatingBox

GRAVITY = 9.81


class SingularInertiaError(RuntimeError):
    """Inertia matrix numerically singular at the current configuration."""


class NoResponseError(RuntimeError):
    """An output never responded to any input within the probe horizon."""


class BoxViolationError(RuntimeError):
    """A collected sample left the operating box in strict mode."""


class InsufficientSamplesError(ValueError):
    """Too few output samples to build the requested window states."""


# ---------------------------------------------------------------------------
# Generic plant interface
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlantModel:
    """Discrete-time plant ``x+ = f(x, u)``, ``y = h(x)``.

    ``feedthrough`` optionally adds a direct input term ``h_u(x, u)`` to the
    output; it exists so degenerate zero-delay plants can be expressed and
    detected by the relative-degree probe.

    Plants that claim an equilibrium at the origin are checked for
    ``f(0, 0) = 0`` and ``h(0) = 0`` at construction.
    """

    name: str
    n: int
    m: int
    step: Callable[[np.ndarray, np.ndarray], np.ndarray]
    output: Callable[[np.ndarray], np.ndarray]
    feedthrough: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    origin_equilibrium: bool = False

    def __post_init__(self):
        if self.origin_equilibrium:
            x0 = np.zeros(self.n)
            u0 = np.zeros(self.m)
            if not np.allclose(self.step(x0, u0), 0.0, atol=1e-12):
                raise ValueError(f"plant '{self.name}' claims f(0,0)=0 but it is not")
            if not np.allclose(self.measure(x0, u0), 0.0, atol=1e-12):
                raise ValueError(f"plant '{self.name}' claims h(0)=0 but it is not")

    def measure(self, x: np.ndarray, u: Optional[np.ndarray] = None) -> np.ndarray:
        y = np.asarray(self.output(x), dtype=float).reshape(-1)
        if self.feedthrough is not None:
            uu = np.zeros(self.m) if u is None else u
            y = y + np.asarray(self.feedthrough(x, uu), dtype=float).reshape(-1)
        return y


def simulate(plant: PlantModel, x0: np.ndarray, u_seq: np.ndarray):
    """Roll the plant forward under ``u_seq`` (shape ``(K, m)``).

    Returns states ``x_0..x_K`` (shape ``(K+1, n)``) and outputs
    ``y_0..y_K`` (shape ``(K+1, m)``), with ``y_k`` measured before ``u_k``
    is applied (feedthrough plants see ``u_k`` at step ``k``).
    """
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    K = u_seq.shape[0]
    xs = np.empty((K + 1, plant.n))
    ys = np.empty((K + 1, plant.m))
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    for k in range(K):
        xs[k] = x
        ys[k] = plant.measure(x, u_seq[k])
        x = np.asarray(plant.step(x, u_seq[k]), dtype=float).reshape(-1)
    xs[K] = x
    ys[K] = plant.measure(x, None)
    return xs, ys


# ---------------------------------------------------------------------------
# Block-Brunovsky structure and window states
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BrunovskyStructure:
    """Structure of the transformed linear system: per-channel integrator
    chains of lengths ``d_1..d_m`` with ``sum(d_i) = n``.

    ``A`` is block diagonal with shift blocks, each ``B_i`` the last unit
    vector and each ``C_i`` the first unit row. The window state at time ``k``
    stacks ``y_i[k : k+d_i]`` in channel order.
    """

    degrees: tuple[int, ...]
    A: np.ndarray = field(init=False)
    B: np.ndarray = field(init=False)
    C: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.degrees) < 1 or any(d < 1 for d in self.degrees):
            raise ValueError(f"relative degrees must be >= 1, got {self.degrees}")
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))
        n, m = self.n, self.m
        A = np.zeros((n, n))
        B = np.zeros((n, m))
        C = np.zeros((m, n))
        off = 0
        for i, d in enumerate(self.degrees):
            A[off : off + d - 1, off + 1 : off + d] += np.eye(d - 1)
            B[off + d - 1, i] = 1.0
            C[i, off] = 1.0
            off += d
        for M in (A, B, C):
            M.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
        if np.linalg.matrix_rank(ctrb) != n:
            raise ValueError("chain structure failed the controllability check")

    @property
    def m(self) -> int:
        return len(self.degrees)

    @property
    def n(self) -> int:
        return int(sum(self.degrees))

    @property
    def d_max(self) -> int:
        return int(max(self.degrees))

    def channel_offsets(self) -> list[int]:
        offs = [0]
        for d in self.degrees[:-1]:
            offs.append(offs[-1] + d)
        return offs


def window_states(outputs: list[np.ndarray], structure: BrunovskyStructure) -> Sequence:
    """Stack per-channel output windows into the window-state sequence.

    Channel ``i`` must supply at least ``N + d_i`` samples for some common
    ``N >= 0``; the result has ``N + 1`` states, state ``k`` holding
    ``y_i[k : k+d_i]`` for every channel.
    """
    if len(outputs) != structure.m:
        raise ValueError(f"expected {structure.m} output channels, got {len(outputs)}")
    ys = [np.asarray(y, dtype=float).reshape(-1) for y in outputs]
    horizons = [y.size - d for y, d in zip(ys, structure.degrees)]
    N = min(horizons)
    if N < 0:
        raise InsufficientSamplesError(
            f"channel lengths {[y.size for y in ys]} too short for degrees "
            f"{structure.degrees}"
        )
    xi = np.empty((N + 1, structure.n))
    off = 0
    for y, d in zip(ys, structure.degrees):
        for j in range(d):
            xi[:, off + j] = y[j : j + N + 1]
        off += d
    return Sequence(xi)


# ---------------------------------------------------------------------------
# Relative-degree probe
# ---------------------------------------------------------------------------


def probe_relative_degrees(
    plant: PlantModel,
    magnitude: float = 1e-3,
    horizon: int = 10,
    tolerance: float = 1e-9,
) -> tuple[int, ...]:
    """Relative degrees found by perturbing the plant from rest at the origin.

    For each output the degree is the first step at which some single input
    applied at time zero moves that output away from the unforced response.
    A degree of zero (direct feedthrough) is returned as-is; downstream
    predictive machinery rejects it.
    """
    if magnitude <= 0:
        raise ValueError("perturbation magnitude must be positive")
    x0 = np.zeros(plant.n)
    zero_u = np.zeros((horizon + 1, plant.m))
    _, y_base = simulate(plant, x0, zero_u)
    first_change = np.full(plant.m, -1, dtype=int)
    for j in range(plant.m):
        u = zero_u.copy()
        u[0, j] = magnitude
        _, y_pert = simulate(plant, x0, u)
        moved = np.abs(y_pert - y_base) > tolerance  # (horizon+1, m)
        for i in range(plant.m):
            ks = np.nonzero(moved[:, i])[0]
            if ks.size and (first_change[i] < 0 or ks[0] < first_change[i]):
                first_change[i] = ks[0]
    if np.any(first_change < 0):
        silent = [i + 1 for i in range(plant.m) if first_change[i] < 0]
        raise NoResponseError(
            f"outputs {silent} of '{plant.name}' never responded within "
            f"{horizon} steps"
        )
    return tuple(int(k) for k in first_change)


# ---------------------------------------------------------------------------
# Double inverted pendulum
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DoublePendulumParams:
    """Masses [kg], lengths [m] and sampling time [s] of the two-link arm.

    Centers of mass sit at mid-link (``lc_i = l_i / 2``) and each rod has
    inertia ``m_i * l_i^2 / 12`` about its center.
    """

    m1: float = 1.0
    m2: float = 1.0
    l1: float = 0.5
    l2: float = 0.5
    g: float = GRAVITY
    Ts: float = 0.1

    def __post_init__(self):
        if min(self.m1, self.m2, self.l1, self.l2) <= 0:
            raise ValueError("masses and lengths must be strictly positive")

    @property
    def lc1(self) -> float:
        return self.l1 / 2.0

    @property
    def lc2(self) -> float:
        return self.l2 / 2.0

    @property
    def I1(self) -> float:
        return self.m1 * self.l1**2 / 12.0

    @property
    def I2(self) -> float:
        return self.m2 * self.l2**2 / 12.0


def inertia_matrix(p: DoublePendulumParams, q2) -> np.ndarray:
    """Joint-space inertia matrix; depends only on the second joint angle.

    Vectorized over ``q2``: scalar input gives ``(2, 2)``, an array of shape
    ``(...,)`` gives ``(..., 2, 2)``.
    """
    q2 = np.asarray(q2, dtype=float)
    c2 = np.cos(q2)
    M11 = p.m1 * p.lc1**2 + p.I1 + p.m2 * (p.l1**2 + p.lc2**2 + 2 * p.l1 * p.lc2 * c2) + p.I2
    M12 = p.m2 * p.l1 * p.lc2 * c2 + p.m2 * p.lc2**2 + p.I2
    M22 = np.broadcast_to(p.m2 * p.lc2**2 + p.I2, q2.shape)
    out = np.stack(
        [np.stack([M11, M12], axis=-1), np.stack([M12, M22], axis=-1)], axis=-2
    )
    return out


def coriolis_times_velocity(p: DoublePendulumParams, q2, qd1, qd2) -> np.ndarray:
    """Product ``C(q, qd) qd`` of the velocity-dependent terms, vectorized."""
    q2, qd1, qd2 = np.broadcast_arrays(
        np.asarray(q2, dtype=float), np.asarray(qd1, dtype=float), np.asarray(qd2, dtype=float)
    )
    h = p.m2 * p.l1 * p.lc2 * np.sin(q2)
    c1 = -h * qd2 * (2.0 * qd1 + qd2)
    c2 = h * qd1**2
    return np.stack([c1, c2], axis=-1)


def gravity_vector(p: DoublePendulumParams, q1, q2) -> np.ndarray:
    """Gravity torque vector, vectorized over joint angles."""
    q1, q2 = np.broadcast_arrays(np.asarray(q1, dtype=float), np.asarray(q2, dtype=float))
    g1 = p.m1 * p.lc1 * p.g * np.cos(q1) + p.m2 * p.g * (
        p.lc2 * np.cos(q1 + q2) + p.l1 * np.cos(q1)
    )
    g2 = p.m2 * p.lc2 * p.g * np.cos(q1 + q2)
    return np.stack([g1, g2], axis=-1)


def equilibrium_torque(p: DoublePendulumParams, q: np.ndarray) -> np.ndarray:
    """Constant torque holding the arm at joint angles ``q`` with zero velocity."""
    q = np.asarray(q, dtype=float).reshape(-1)
    return gravity_vector(p, q[0], q[1])


def step_euler_pendulum(p: DoublePendulumParams, state: np.ndarray, torque: np.ndarray) -> np.ndarray:
    """One explicit-Euler step of the double pendulum.

    State is ``(q1, qd1, q2, qd2)``; accelerations come from
    ``M(q)^-1 (tau - C(q, qd) qd - G(q))`` and integrate the velocities, the
    velocities integrate the angles. Raises ``SingularInertiaError`` when the
    inertia matrix is numerically singular.
    """
    x = np.asarray(state, dtype=float).reshape(-1)
    tau = np.asarray(torque, dtype=float).reshape(-1)
    q1, qd1, q2, qd2 = x
    M = inertia_matrix(p, q2)
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    if abs(det) < 1e-12:
        raise SingularInertiaError(f"|det M| = {abs(det):.3e} at q2 = {q2!r}")
    rhs = tau - coriolis_times_velocity(p, q2, qd1, qd2) - gravity_vector(p, q1, q2)
    z = np.array(
        [M[1, 1] * rhs[0] - M[0, 1] * rhs[1], -M[1, 0] * rhs[0] + M[0, 0] * rhs[1]]
    ) / det
    return x + p.Ts * np.array([qd1, z[0], qd2, z[1]])


def pendulum_synthetic_input(p: DoublePendulumParams, u: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """True map from ``(torque, window state)`` to the transformed input.

    The window state is ``(q1_k, q1_{k+1}, q2_k, q2_{k+1})``, so velocities are
    recovered by divided differences. Vectorized: ``u`` of shape ``(..., 2)``
    with ``xi`` of shape ``(..., 4)`` gives ``(..., 2)``.
    """
    u = np.asarray(u, dtype=float)
    xi = np.asarray(xi, dtype=float)
    x1, x2, x3, x4 = xi[..., 0], xi[..., 1], xi[..., 2], xi[..., 3]
    qd1 = (x2 - x1) / p.Ts
    qd2 = (x4 - x3) / p.Ts
    M = inertia_matrix(p, x3)
    rhs = u - coriolis_times_velocity(p, x3, qd1, qd2) - gravity_vector(p, x1, x3)
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    z1 = (M[..., 1, 1] * rhs[..., 0] - M[..., 0, 1] * rhs[..., 1]) / det
    z2 = (-M[..., 1, 0] * rhs[..., 0] + M[..., 0, 0] * rhs[..., 1]) / det
    v1 = 2.0 * x2 - x1 + p.Ts**2 * z1
    v2 = 2.0 * x4 - x3 + p.Ts**2 * z2
    return np.stack([v1, v2], axis=-1)


def make_double_pendulum(params: Optional[DoublePendulumParams] = None) -> PlantModel:
    p = params or DoublePendulumParams()

    def _step(x, u):
        return step_euler_pendulum(p, x, u)

    def _out(x):
        return np.array([x[0], x[2]])

    return PlantModel(name="double_pendulum", n=4, m=2, step=_step, output=_out)


def pendulum_state_to_window(p: DoublePendulumParams, x: np.ndarray) -> np.ndarray:
    """Window state implied by a physical state: ``(q1, q1 + Ts qd1, q2, q2 + Ts qd2)``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return np.array([x[0], x[0] + p.Ts * x[1], x[2], x[2] + p.Ts * x[3]])


# ---------------------------------------------------------------------------
# Toy plants with exactly representable transformed inputs
# ---------------------------------------------------------------------------


def make_chain_lti() -> tuple[PlantModel, BrunovskyStructure, Callable]:
    """Two-input chained-integrator plant with mixed delays (2 and 1).

    The transformed input equals the raw input, so any dictionary containing
    the inputs represents this plant exactly.
    """
    structure = BrunovskyStructure(degrees=(2, 1))

    def _step(x, u):
        return np.array([x[1], u[0], u[1]])

    def _out(x):
        return np.array([x[0], x[2]])

    plant = PlantModel(
        name="lti_toy", n=3, m=2, step=_step, output=_out, origin_equilibrium=True
    )

    def phi(u, xi):
        return np.asarray(u, dtype=float).copy()

    return plant, structure, phi


def make_scalar_flat(a: float = 0.15, b: float = 0.3) -> tuple[PlantModel, BrunovskyStructure, Callable]:
    """Single-input nonlinear plant whose transformed input is a short known
    combination of ``u``, ``sin(xi_1)`` and ``xi_2^2``."""
    structure = BrunovskyStructure(degrees=(2,))

    def _step(x, u):
        return np.array([x[1], u[0] + a * x[1] ** 2 + b * math.sin(x[0])])

    def _out(x):
        return np.array([x[0]])

    plant = PlantModel(
        name="scalar_flat", n=2, m=1, step=_step, output=_out, origin_equilibrium=True
    )

    def phi(u, xi):
        u = np.asarray(u, dtype=float)
        xi = np.asarray(xi, dtype=float)
        val = u[..., 0] + a * xi[..., 1] ** 2 + b * np.sin(xi[..., 0])
        return val[..., np.newaxis]

    return plant, structure, phi


# ---------------------------------------------------------------------------
# Output noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    """Per-component bounded measurement noise, uniform on ``[-w*, w*]``."""

    w_star: float = 0.0
    seed: int = 0
    distribution: str = "uniform"

    def __post_init__(self):
        if self.w_star < 0:
            raise ValueError("noise bound must be non-negative")
        if self.distribution != "uniform":
            raise ValueError(f"unknown noise distribution '{self.distribution}'")

    def samples(self, steps: int, channels: int) -> np.ndarray:
        if self.w_star == 0.0:
            return np.zeros((steps, channels))
        rng = np.random.default_rng(self.seed)
        return rng.uniform(-self.w_star, self.w_star, size=(steps, channels))


# ---------------------------------------------------------------------------
# Offline data collection
# ---------------------------------------------------------------------------


@dataclass
class PendulumPdPolicy:
    """Pre-stabilizing controller for pendulum data collection.

    Tracks a random piecewise-constant joint-angle reference (redrawn every
    few steps) with inertia-scaled PD plus gravity and velocity compensation,
    then adds uniform torque dither. Plain per-joint PD at these gains is
    unstable under the explicit-Euler discretization (the second joint sees an
    effective inverse inertia near 55 per kg m^2), so the gains act through
    the inertia matrix instead. Torques are clipped to the input box.
    """

    params: DoublePendulumParams
    kp: float = 12.0
    kd: float = 14.0
    dither: float = (2.2, 1.4)
    redraw_every: int = 5
    dither_edge: float = 1.35
    ref_low: np.ndarray = None
    ref_high: np.ndarray = None
    ref_step: float = 0.25
    u_low: np.ndarray = None
    u_high: np.ndarray = None
    seed: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)
        self._ref = None
        self._dither_vec = None

    def __call__(self, k: int, x: np.ndarray) -> np.ndarray:
        q = x[[0, 2]]
        qd = x[[1, 3]]
        if self._ref is None or k % self.redraw_every == 0:
            # Bounded random walk keeps commanded moves local so joint speeds
            # stay inside the window-state box.
            base = q if self._ref is None else self._ref
            self._ref = np.clip(
                base + self._rng.uniform(-self.ref_step, self.ref_step, size=2),
                self.ref_low,
                self.ref_high,
            )
        accel = self.kp * (self._ref - q) - self.kd * qd
        M = inertia_matrix(self.params, q[1])
        comp = coriolis_times_velocity(self.params, q[1], qd[0], qd[1]) + gravity_vector(
            self.params, q[0], q[1]
        )
        tau = M @ accel + comp
        if np.any(tau > self.u_high) or np.any(tau < self.u_low):
            # Saturating one joint torque alone kicks the other joint through
            # the inertia coupling; scale the commanded acceleration instead.
            Ma = M @ accel
            scale = 1.0
            for i in range(2):
                if Ma[i] > 0:
                    scale = min(scale, (self.u_high[i] - comp[i]) / Ma[i])
                elif Ma[i] < 0:
                    scale = min(scale, (self.u_low[i] - comp[i]) / Ma[i])
            tau = max(scale, 0.0) * Ma + comp
        amp = np.broadcast_to(np.asarray(self.dither, dtype=float), (2,)).copy()
        # Attenuate the dither near the edge of the angle range so the torque
        # kicks cannot push the one-step-ahead angles out of the box.
        edge = np.max(np.abs(np.concatenate([q, q + self.params.Ts * qd])))
        amp = amp * np.clip((self.dither_edge - edge) / 0.5, 0.1, 1.0)
        tau = tau + self._rng.uniform(-amp, amp)
        return np.clip(tau, self.u_low, self.u_high)


@dataclass
class StateFeedbackDitherPolicy:
    """Stabilizing linear state feedback plus uniform dither, for toy plants."""

    K: np.ndarray
    dither: float = 0.5
    u_low: np.ndarray = None
    u_high: np.ndarray = None
    seed: int = 0

    def __post_init__(self):
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
        self._rng = np.random.default_rng(self.seed)

    def __call__(self, k: int, x: np.ndarray) -> np.ndarray:
        m = self.K.shape[0]
        u = -self.K @ x + self._rng.uniform(-self.dither, self.dither, size=m)
        if self.u_low is not None:
            u = np.clip(u, self.u_low, self.u_high)
        return u


@dataclass(frozen=True)
class Trajectory:
    """Offline data record: inputs, clean and noisy per-channel outputs and
    the window-state sequences built from both."""

    u: np.ndarray                       # (N, m)
    outputs: list[np.ndarray]           # channel i: (N + d_i,)
    outputs_noisy: list[np.ndarray]     # channel i: (N + d_i,)
    xi: Sequence                        # (N + 1, n)
    xi_noisy: Sequence                  # (N + 1, n)
    structure: BrunovskyStructure
    stayed_in_box: bool
    first_violation: Optional[int] = None

    @property
    def N(self) -> int:
        return self.u.shape[0]


def collect_offline_data(
    plant: PlantModel,
    policy: Callable[[int, np.ndarray], np.ndarray],
    N: int,
    structure: BrunovskyStructure,
    noise: NoiseModel,
    box: "Optional[OperatingBox]" = None,
    x0: Optional[np.ndarray] = None,
    strict: bool = False,
) -> Trajectory:
    """Run ``policy`` on the plant and package the result for identification.

    Simulates enough extra steps that every output channel ``i`` has
    ``N + d_i`` samples. Records whether every visited ``(u_k, xi_k)`` pair
    stayed inside ``box``; in strict mode the first violation raises
    ``BoxViolationError`` naming the offending step.
    """
    d_max = structure.d_max
    total_inputs = N + d_max - 1
    x = np.zeros(plant.n) if x0 is None else np.asarray(x0, dtype=float).copy()
    u_all = np.empty((total_inputs, plant.m))
    y_all = np.empty((total_inputs + 1, plant.m))
    for k in range(total_inputs):
        y_all[k] = plant.measure(x)
        u_all[k] = policy(k, x)
        x = np.asarray(plant.step(x, u_all[k]), dtype=float).reshape(-1)
    y_all[total_inputs] = plant.measure(x)

    w = noise.samples(total_inputs + 1, plant.m)
    y_noisy_all = y_all + w

    u = u_all[:N].copy()
    outputs = [y_all[: N + d, i].copy() for i, d in enumerate(structure.degrees)]
    outputs_noisy = [
        y_noisy_all[: N + d, i].copy() for i, d in enumerate(structure.degrees)
    ]
    xi = window_states(outputs, structure)
    xi_noisy = window_states(outputs_noisy, structure)

    stayed = True
    first_violation = None
    if box is not None:
        for k in range(N):
            if not box.contains(u[k], xi.data[k]):
                stayed = False
                first_violation = k
                break
        if not stayed and strict:
            raise BoxViolationError(
                f"sample {first_violation} left the operating box"
            )

    return Trajectory(
        u=u,
        outputs=outputs,
        outputs_noisy=outputs_noisy,
        xi=xi,
        xi_noisy=xi_noisy,
        structure=structure,
        stayed_in_box=stayed,
        first_violation=first_violation,
    )

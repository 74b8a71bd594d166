"""Admittance-based impedance rendering with joint-space PD tracking.

Per control tick:

1. each port's virtual dynamics ``M_d vdot + B_d v + K_d (x - x0) = F`` turns
   the measured wrench into a desired port velocity;
2. the stacked port velocities are resolved into active joint rates by
   weighted damped least squares;
3. the joint rates are integrated into a joint set-point, optionally
   superposed on a reference trajectory;
4. ``tau = g(q) + Kp (q_des - q) + Kv (qd_des - qd)`` on the active joints.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import PlantTerms
from .kinematics import (
    ACTIVE,
    N_JOINTS,
    PortId,
    damped_pinv_solve,
    rotation_exp,
    rotation_log,
)

log = logging.getLogger(__name__)

PORTS = (PortId.A, PortId.B)


class ConfigurationError(ValueError):
    pass


class TimestampError(RuntimeError):
    pass


class ImmeasurableError(ValueError):
    """Response amplitude too small to estimate an impedance from."""


def _as_matrix(value, name: str) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if a.shape == (6,):
        a = np.diag(a)
    if a.shape != (6, 6):
        raise ConfigurationError(f"{name}: expected 6 diagonal values or a 6x6 matrix")
    return a


@dataclass(frozen=True)
class PortImpedance:
    """Virtual inertia, damping and stiffness rendered at one port.

    Rows/columns are ordered ``[x, y, z, rx, ry, rz]`` in the world frame.
    ``x0`` is the stiffness equilibrium as ``[position, rotation vector]``;
    ``None`` means "the port pose when control starts".
    """

    mass: np.ndarray
    damping: np.ndarray
    stiffness: np.ndarray
    x0: np.ndarray | None = None

    def __post_init__(self):
        M = _as_matrix(self.mass, "mass")
        B = _as_matrix(self.damping, "damping")
        K = _as_matrix(self.stiffness, "stiffness")
        for name, X in (("mass", M), ("damping", B), ("stiffness", K)):
            if not np.allclose(X, X.T, rtol=0.0, atol=1e-12):
                raise ConfigurationError(f"{name} matrix must be symmetric")
        if np.linalg.eigvalsh(M).min() <= 0.0:
            raise ConfigurationError("virtual mass must be positive definite")
        for name, X in (("damping", B), ("stiffness", K)):
            if np.linalg.eigvalsh(X).min() < -1e-12:
                raise ConfigurationError(f"{name} matrix must be positive semidefinite")
        object.__setattr__(self, "mass", M)
        object.__setattr__(self, "damping", B)
        object.__setattr__(self, "stiffness", K)
        if self.x0 is not None:
            object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(6))

    @classmethod
    def diagonal(cls, mass=(2.0, 0.05), damping=(20.0, 1.0), stiffness=(0.0, 0.0), x0=None):
        """Build from ``(translational, rotational)`` pairs."""

        def expand(pair):
            lin, rot = pair
            return np.array([lin] * 3 + [rot] * 3, dtype=float)

        return cls(expand(mass), expand(damping), expand(stiffness), x0)


@dataclass(frozen=True)
class ImpedanceParams:
    A: PortImpedance = field(default_factory=PortImpedance.diagonal)
    B: PortImpedance = field(default_factory=PortImpedance.diagonal)

    def __getitem__(self, port) -> PortImpedance:
        return getattr(self, PortId(port).value)


@dataclass(frozen=True)
class PDGains:
    kp: np.ndarray = field(default_factory=lambda: np.full(6, 50.0))
    kv: np.ndarray = field(default_factory=lambda: np.full(6, 5.0))

    def __post_init__(self):
        kp = np.asarray(self.kp, dtype=float) * np.ones(6)
        kv = np.asarray(self.kv, dtype=float) * np.ones(6)
        if np.any(kp < 0):
            raise ConfigurationError("position gains must be non-negative")
        if np.any(kv <= 0):
            raise ConfigurationError("velocity gains must be positive on every active joint")
        object.__setattr__(self, "kp", kp)
        object.__setattr__(self, "kv", kv)


@dataclass(frozen=True)
class ControllerSettings:
    mode: str = "admittance"  # or "assist"
    damping: float = 1e-3
    weights_A: np.ndarray = field(default_factory=lambda: np.full(6, 0.5))
    weights_B: np.ndarray = field(default_factory=lambda: np.full(6, 1.0))
    torque_limits: np.ndarray = field(
        default_factory=lambda: np.array([40.0, 200.0, 40.0, 40.0, 40.0, 40.0])
    )
    windup_limit: float = 0.1
    # wrist rate estimate used in the solve: "held" keeps the hand's world
    # orientation, "rigid" assumes zero wrist rates, "measured" feeds back qd
    passive_model: str = "held"

    def __post_init__(self):
        if self.mode not in ("admittance", "assist"):
            raise ConfigurationError(f"unknown controller mode {self.mode!r}")
        if not self.damping > 0:
            raise ConfigurationError("damped least-squares lambda must be positive")
        if self.passive_model not in ("held", "rigid", "measured"):
            raise ConfigurationError(f"unknown passive wrist model {self.passive_model!r}")

    @property
    def row_weights(self) -> np.ndarray:
        return np.concatenate([self.weights_A, self.weights_B])


@dataclass(frozen=True)
class AdmittanceState:
    """Virtual port dynamics plus the integrated joint set-point offset.

    ``x`` holds ``[position, rotation vector]`` per port and ``v`` the
    matching spatial velocity.  ``q_hold`` is the posture when control
    started and ``q_offset`` the integral of the admittance joint rates.
    """

    x: dict
    v: dict
    t: float
    q_hold: np.ndarray
    q_offset: np.ndarray


@dataclass
class ControlOutput:
    tau: np.ndarray
    q_des: np.ndarray
    qd_des: np.ndarray
    v_des: dict
    gravity: np.ndarray
    clamped: np.ndarray  # bool per joint, torque limit hit
    events: list = field(default_factory=list)


def pose_coordinates(T: np.ndarray) -> np.ndarray:
    return np.concatenate([T[:3, 3], rotation_log(T[:3, :3])])


def init_admittance(terms: PlantTerms, q) -> AdmittanceState:
    """Start the virtual dynamics at rest at the current port poses."""
    x = {PortId.A: pose_coordinates(terms.T_A), PortId.B: pose_coordinates(terms.T_B)}
    v = {p: np.zeros(6) for p in PORTS}
    q = np.asarray(q, dtype=float)
    return AdmittanceState(x, v, -math.inf, q.copy(), np.zeros(N_JOINTS))


def _pose_error(x, x0) -> np.ndarray:
    err = np.empty(6)
    err[:3] = x[:3] - x0[:3]
    err[3:] = rotation_log(rotation_exp(x[3:]) @ rotation_exp(x0[3:]).T)
    return err


def admittance_step(state: AdmittanceState, measured, params: ImpedanceParams, dt: float, t=None):
    """Advance the virtual port dynamics one step with semi-implicit Euler.

    Returns ``(new_state, {port: v_des})``; ``v_des`` is the updated virtual
    velocity.  ``t`` defaults to ``state.t + dt`` and must increase strictly.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if t is None:
        t = (0.0 if math.isinf(state.t) else state.t) + dt
    if not t > state.t:
        raise TimestampError(f"control time {t!r} does not follow {state.t!r}")
    new_x, new_v = {}, {}
    for port in PORTS:
        imp = params[port]
        if isinstance(measured, dict):
            F = np.asarray(measured.get(port, np.zeros(6)), dtype=float)
        else:
            F = np.asarray(measured[PORTS.index(port)], dtype=float)
        x, v = state.x[port], state.v[port]
        rhs = F - imp.damping @ v
        if np.any(imp.stiffness):
            if imp.x0 is None:
                raise ConfigurationError(f"port {port.value}: stiffness set without an equilibrium pose")
            rhs = rhs - imp.stiffness @ _pose_error(x, imp.x0)
        v1 = v + dt * np.linalg.solve(imp.mass, rhs)
        x1 = np.empty(6)
        x1[:3] = x[:3] + dt * v1[:3]
        if np.any(v1[3:]):
            x1[3:] = rotation_log(rotation_exp(dt * v1[3:]) @ rotation_exp(x[3:]))
        else:
            x1[3:] = x[3:]
        new_x[port], new_v[port] = x1, v1
    new_state = replace(state, x=new_x, v=new_v, t=float(t))
    return new_state, {p: new_v[p].copy() for p in PORTS}


def resolve_equilibria(params: ImpedanceParams, adm: AdmittanceState) -> ImpedanceParams:
    """Fill unset stiffness equilibria with the virtual poses in ``adm``."""
    ports = {}
    for port in PORTS:
        imp = params[port]
        ports[port.value] = imp if imp.x0 is not None else replace(imp, x0=adm.x[port].copy())
    return ImpedanceParams(**ports)


def passive_map(terms: PlantTerms, lam: float = 1e-3) -> np.ndarray:
    """Linear estimate ``qd_passive = P qd_active`` of the wrist rates.

    The hand hangs or is held by the user, so quasi-statically it keeps its
    world orientation: the wrist rates cancel as much of the forearm's
    angular velocity as two axes can.
    """
    Jw = terms.J_B[3:]
    Jp = Jw[:, ~ACTIVE]
    A = Jp.T @ Jp + lam**2 * np.eye(Jp.shape[1])
    return -np.linalg.solve(A, Jp.T @ Jw[:, ACTIVE])


def resolve_rates(terms: PlantTerms, v, qd, settings: ControllerSettings) -> np.ndarray:
    """Joint rates realising the stacked port velocities ``v`` (cuff rows first)."""
    J = np.vstack([terms.J_A, terms.J_B])
    if settings.passive_model == "held":
        P = passive_map(terms)
        J_eff = J[:, ACTIVE] + J[:, ~ACTIVE] @ P
        qa = damped_pinv_solve(J_eff, v, settings.damping, settings.row_weights, np.ones(6, dtype=bool))
        out = np.zeros(N_JOINTS)
        out[ACTIVE] = qa
        out[~ACTIVE] = P @ qa
        return out
    passive = qd[~ACTIVE] if settings.passive_model == "measured" else None
    return damped_pinv_solve(J, v, settings.damping, settings.row_weights, ACTIVE, passive)


def control_step(
    terms: PlantTerms,
    q,
    qd,
    wrenches,
    imp: ImpedanceParams,
    gains: PDGains,
    adm: AdmittanceState,
    settings: ControllerSettings,
    dt: float,
    t: float,
    reference=None,
):
    """One tick of the control pipeline; returns ``(ControlOutput, AdmittanceState)``.

    ``terms`` are the plant terms at the current ``(q, qd)``.
    ``reference`` is an optional sample with ``q_des``/``qd_des`` used in
    assist mode.
    """
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    if not t > adm.t:
        raise TimestampError(f"control time {t!r} does not follow {adm.t!r}")
    adm, v_des = admittance_step(adm, wrenches, imp, dt, t)

    v = np.concatenate([v_des[PortId.A], v_des[PortId.B]])
    qd_adm = resolve_rates(terms, v, qd, settings)

    offset = adm.q_offset.copy()
    offset[ACTIVE] += dt * qd_adm[ACTIVE]
    adm = replace(adm, q_offset=offset)

    q_des = q.copy()
    qd_des = qd_adm.copy()
    if settings.mode == "assist" and reference is not None:
        q_des[ACTIVE] = np.asarray(reference.q_des)[ACTIVE] + offset[ACTIVE]
        qd_des[ACTIVE] += np.asarray(reference.qd_des)[ACTIVE]
    else:
        q_des[ACTIVE] = adm.q_hold[ACTIVE] + offset[ACTIVE]

    g = terms.g
    err = np.clip(q_des[ACTIVE] - q[ACTIVE], -settings.windup_limit, settings.windup_limit)
    tau = np.zeros(N_JOINTS)
    tau[ACTIVE] = g[ACTIVE] + gains.kp * err + gains.kv * (qd_des[ACTIVE] - qd[ACTIVE])
    lim = settings.torque_limits
    clamped = np.zeros(N_JOINTS, dtype=bool)
    over = np.abs(tau[ACTIVE]) > lim
    events = []
    if over.any():
        tau[ACTIVE] = np.clip(tau[ACTIVE], -lim, lim)
        clamped[:6] = over
        events.append("torque_clamp")
        log.debug("torque clamp at t=%.6f on joints %s", t, np.flatnonzero(over) + 1)
    return ControlOutput(tau, q_des, qd_des, v_des, g.copy(), clamped, events), adm


@dataclass(frozen=True)
class ImpedanceEstimate:
    magnitude: float
    phase: float
    value: complex
    kind: str


def _fit_phasor(t, y, omega) -> complex:
    A = np.column_stack([np.sin(omega * t), np.cos(omega * t), np.ones_like(t), t - t.mean()])
    a, b, _, _ = np.linalg.lstsq(A, y, rcond=None)[0]
    # a sin(wt) + b cos(wt) = Re[(b - j a) e^{jwt}]
    return complex(b, -a)


def estimate_rendered_impedance(
    t,
    force,
    response,
    frequency_hz: float,
    kind: str = "displacement",
    transient_periods: float = 2.0,
    min_periods: float = 5.0,
) -> ImpedanceEstimate:
    """Apparent impedance ``F / response`` at the probe frequency.

    Sinusoid, offset and drift are fitted by least squares to the force and
    to the response after discarding the transient.  ``kind`` is
    ``"displacement"`` (N/m, complex stiffness) or ``"velocity"`` (N s/m).
    """
    t = np.asarray(t, dtype=float)
    force = np.asarray(force, dtype=float)
    response = np.asarray(response, dtype=float)
    if kind not in ("displacement", "velocity"):
        raise ValueError(f"unknown response kind {kind!r}")
    period = 1.0 / frequency_hz
    keep = t >= t[0] + transient_periods * period - 1e-12
    step = t[1] - t[0] if t.size > 1 else 0.0
    # each sample stands for one step of the log, so n samples span n * step
    if not keep.any() or (t[-1] + step - t[keep][0]) < min_periods * period - 1e-9:
        raise ValueError(
            f"log covers {(t[-1] + step - t[0]) / period:.2f} periods; need {transient_periods + min_periods:g}"
        )
    omega = 2 * math.pi * frequency_hz
    tk = t[keep]
    Fh = _fit_phasor(tk, force[keep], omega)
    Yh = _fit_phasor(tk, response[keep], omega)
    floor = 1e-9 if kind == "displacement" else 1e-9 * omega
    if abs(Yh) < floor:
        raise ImmeasurableError(f"{kind} amplitude {abs(Yh):.3e} is below the measurement floor")
    Z = Fh / Yh
    return ImpedanceEstimate(abs(Z), math.atan2(Z.imag, Z.real), Z, kind)

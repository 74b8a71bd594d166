"""Kinematic model of the 8-DoF upper-limb exoskeleton.

World frame: origin at the mounting reference, x anterior, y lateral toward
the instrumented arm, z up.  Joint order:

    1  girdle revolute about world x         (active)
    2  girdle prismatic, radial in y-z plane (active)
    3  GH flexion/extension                  (active)
    4  GH abduction/adduction                (active)
    5  GH axial rotation                     (active)
    6  elbow flexion/extension               (active)
    7  wrist flexion/extension               (passive)
    8  wrist radial/ulnar deviation          (passive)

Axes 3-5 meet at the glenohumeral (GH) centre.  With ``q = 0`` the arm hangs
straight down with the elbow extended.  Frames follow the standard DH
convention ``T = Rz(theta) Tz(d) Tx(a) Rx(alpha)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

N_JOINTS = 8
ACTIVE = np.array([True] * 6 + [False] * 2)
REVOLUTE = np.array([True, False, True, True, True, True, True, True])
JOINT_NAMES = (
    "girdle_rot",
    "girdle_slide",
    "gh_flexion",
    "gh_abduction",
    "gh_rotation",
    "elbow",
    "wrist_flexion",
    "wrist_deviation",
)


class ParameterError(ValueError):
    """Raised for body parameters or joint limits outside their domain."""


class NumericalError(RuntimeError):
    """Raised when an internal numerical self-check fails."""


class PortId(str, Enum):
    A = "A"  # upper-arm cuff
    B = "B"  # handle


DEFAULT_LOWER = np.array([-0.5, 0.0, -1.0, -0.5, -1.5, 0.0, -1.2, -0.6])
DEFAULT_UPPER = np.array([0.8, 0.1, 2.8, 2.5, 1.5, 2.5, 1.2, 0.6])


@dataclass(frozen=True)
class JointLimits:
    lower: np.ndarray = field(default_factory=lambda: DEFAULT_LOWER.copy())
    upper: np.ndarray = field(default_factory=lambda: DEFAULT_UPPER.copy())

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (N_JOINTS,) or hi.shape != (N_JOINTS,):
            raise ParameterError("joint limits need 8 lower and 8 upper values")
        if np.any(lo > hi):
            bad = int(np.argmax(lo > hi))
            raise ParameterError(f"joint {bad + 1} ({JOINT_NAMES[bad]}): lower limit above upper limit")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def violations(self, q, tol: float = 0.0) -> list[int]:
        """Indices of joints outside ``[lower - tol, upper + tol]``."""
        q = np.asarray(q, dtype=float)
        bad = (q < self.lower - tol) | (q > self.upper + tol)
        return [int(i) for i in np.flatnonzero(bad)]

    def clamp(self, q):
        return np.clip(q, self.lower, self.upper)

    @classmethod
    def unbounded(cls) -> "JointLimits":
        return cls(np.full(N_JOINTS, -np.inf), np.full(N_JOINTS, np.inf))


@dataclass(frozen=True)
class BodyParams:
    """Physical dimensions of the device/patient pair, in metres.

    ``p1`` and ``p2`` are fixed for a device; ``p3``-``p6`` are set per
    patient.  ``side`` is informational: the world y axis always points
    toward the instrumented arm, so both sides share one chain.
    """

    p1: float = 0.30
    p2: float = 0.20
    p3: float = 0.10
    p4: float = 0.28
    p5: float = 0.25
    p6: float = 0.08
    side: str = "right"
    beta: float = 0.5

    def __post_init__(self):
        for name in ("p1", "p2", "p3", "p4", "p5", "p6"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ParameterError(f"{name} must be a positive length, got {value!r}")
        if not 0.0 < self.beta < 1.0:
            raise ParameterError(f"beta must lie in (0, 1), got {self.beta!r}")
        if self.side not in ("left", "right"):
            raise ParameterError(f"side must be 'left' or 'right', got {self.side!r}")


@dataclass(frozen=True)
class DHRow:
    kind: str  # "R" or "P"
    theta: float  # joint angle offset (R) or fixed angle (P)
    d: float  # fixed offset (R) or offset added to the joint variable (P)
    a: float
    alpha: float


@dataclass(frozen=True)
class DHChain:
    params: BodyParams
    rows: tuple[DHRow, ...]
    base: np.ndarray
    limits: JointLimits

    @property
    def kinds(self) -> list[str]:
        return [r.kind for r in self.rows]


@dataclass
class JointState:
    q: np.ndarray
    qd: np.ndarray = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(N_JOINTS)
        if self.qd is None:
            self.qd = np.zeros(N_JOINTS)
        else:
            self.qd = np.asarray(self.qd, dtype=float).reshape(N_JOINTS)

    @property
    def active(self) -> np.ndarray:
        return ACTIVE.copy()

    def copy(self) -> "JointState":
        return JointState(self.q.copy(), self.qd.copy())


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T)
        return cls(T[:3, :3].copy(), T[:3, 3].copy())

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class PortJacobian:
    port: PortId
    J: np.ndarray


def _as_q(state) -> np.ndarray:
    if isinstance(state, JointState):
        return state.q
    q = np.asarray(state, dtype=float)
    if q.shape != (N_JOINTS,):
        raise ValueError(f"expected 8 joint values, got shape {q.shape}")
    return q


def build_chain(params: BodyParams | None = None, limits: JointLimits | None = None) -> DHChain:
    """Assemble the DH table for ``params``.

    Row 2 (girdle slide) carries ``d = p2 + p3 + q2`` so the frame-2 origin
    is the GH centre; rows 3-5 have ``a = d = 0`` and therefore keep their
    axes concurrent there for every configuration.
    """
    params = params or BodyParams()
    limits = limits or JointLimits()
    h = math.pi / 2
    p = params
    rows = (
        DHRow("R", h, 0.0, 0.0, h),
        DHRow("P", 0.0, p.p2 + p.p3, 0.0, math.pi),
        DHRow("R", 0.0, 0.0, 0.0, h),
        DHRow("R", -h, 0.0, 0.0, h),
        DHRow("R", h, p.p4, 0.0, -h),
        DHRow("R", -h, 0.0, p.p5, 0.0),
        DHRow("R", 0.0, 0.0, 0.0, h),
        DHRow("R", 0.0, 0.0, p.p6, 0.0),
    )
    # base frame: z0 along world x, x0 along world y
    base = np.array(
        [
            [0.0, 0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, p.p1],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    return DHChain(params, rows, base, limits)


def dh_transform(theta: float, d: float, a: float, alpha: float) -> np.ndarray:
    ct, st = math.cos(theta), math.sin(theta)
    ca, sa = math.cos(alpha), math.sin(alpha)
    return np.array(
        [
            [ct, -st * ca, st * sa, a * ct],
            [st, ct * ca, -ct * sa, a * st],
            [0.0, sa, ca, d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def _row_transform(row: DHRow, qi: float) -> np.ndarray:
    if row.kind == "R":
        return dh_transform(row.theta + qi, row.d, row.a, row.alpha)
    return dh_transform(row.theta, row.d + qi, row.a, row.alpha)


def frames(chain: DHChain, q, upto: int = N_JOINTS) -> np.ndarray:
    """World transforms of frames ``0..upto`` as an ``(upto + 1, 4, 4)`` array."""
    q = _as_q(q)
    out = np.empty((upto + 1, 4, 4))
    T = chain.base
    out[0] = T
    for i, row in enumerate(chain.rows[:upto]):
        T = T @ _row_transform(row, q[i])
        out[i + 1] = T
    return out


def cuff_transform(chain: DHChain, q, F: np.ndarray | None = None) -> np.ndarray:
    """Cuff frame: rigidly attached to link 5, a fraction beta down the upper arm."""
    q = _as_q(q)
    if F is None:
        F = frames(chain, q)
    row = chain.rows[4]
    th = row.theta + q[4]
    ct, st = math.cos(th), math.sin(th)
    local = np.array(
        [
            [ct, -st, 0.0, 0.0],
            [st, ct, 0.0, 0.0],
            [0.0, 0.0, 1.0, chain.params.beta * chain.params.p4],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    return F[4] @ local


def forward_kinematics(chain: DHChain, state) -> tuple[Pose, Pose, list[Pose]]:
    """Return ``(cuff pose, handle pose, [frame 1 .. frame 8])``."""
    q = _as_q(state)
    F = frames(chain, q)
    pose_a = Pose.from_matrix(cuff_transform(chain, q, F))
    pose_b = Pose.from_matrix(F[-1])
    return pose_a, pose_b, [Pose.from_matrix(T) for T in F[1:]]


def gh_center(chain: DHChain, q, F: np.ndarray | None = None) -> np.ndarray:
    if F is None:
        F = frames(chain, q)
    return F[2, :3, 3].copy()


def _port_point_and_cols(chain: DHChain, q, port: PortId, F: np.ndarray):
    if PortId(port) is PortId.A:
        return cuff_transform(chain, q, F)[:3, 3], 5
    return F[-1, :3, 3], N_JOINTS


def geometric_jacobian(F: np.ndarray, point, n_cols: int) -> np.ndarray:
    """6x8 world-frame Jacobian of a point rigidly attached after joint ``n_cols``."""
    Z = F[:N_JOINTS, :3, 2]
    O = F[:N_JOINTS, :3, 3]
    J = np.zeros((6, N_JOINTS))
    lin = np.where(REVOLUTE[:, None], np.cross(Z, point - O), Z)
    J[:3, :n_cols] = lin[:n_cols].T
    J[3:, :n_cols] = (Z * REVOLUTE[:, None])[:n_cols].T
    return J


def jacobian(chain: DHChain, state, port: PortId) -> PortJacobian:
    q = _as_q(state)
    F = frames(chain, q)
    point, n = _port_point_and_cols(chain, q, port, F)
    return PortJacobian(PortId(port), geometric_jacobian(F, point, n))


def elevation_from_frames(F: np.ndarray) -> float:
    # upper arm runs along z of frame 4 from the GH centre to the elbow
    u = F[4, :3, 2]
    return math.atan2(math.hypot(u[0], u[1]), -u[2])


def gh_elevation(chain: DHChain, state) -> float:
    """Angle between the upper arm (GH centre to elbow) and the downward vertical."""
    F = frames(chain, _as_q(state))
    return elevation_from_frames(F)


def damped_pinv_solve(
    J_stack,
    v_des,
    lam: float = 1e-3,
    weights: Sequence[float] | None = None,
    active=None,
    passive_rates=None,
) -> np.ndarray:
    """Weighted damped least-squares joint rates.

    Minimises ``(J qd - v)^T W (J qd - v) + lam^2 |qd|^2`` over the active
    columns.  Passive columns are removed from the problem: their rates are
    taken from ``passive_rates`` (zero if omitted) and their contribution is
    subtracted from ``v_des`` before the solve.
    """
    J = np.asarray(J_stack, dtype=float)
    v = np.asarray(v_des, dtype=float).reshape(-1)
    m, n = J.shape
    if v.shape != (m,):
        raise ValueError(f"v_des has {v.size} rows, Jacobian has {m}")
    if not lam > 0:
        raise ValueError("damping lambda must be positive")
    if active is None:
        active = ACTIVE if n == N_JOINTS else np.ones(n, dtype=bool)
    active = np.asarray(active, dtype=bool)
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (m,) or np.any(w < 0):
        raise ValueError("weights must be one non-negative value per row")

    qd = np.zeros(n)
    passive = ~active
    if passive.any():
        if passive_rates is not None:
            qd[passive] = np.asarray(passive_rates, dtype=float)
        v = v - J[:, passive] @ qd[passive]

    Ja = J[:, active]
    sw = np.sqrt(w)
    k = Ja.shape[1]
    A = np.vstack([sw[:, None] * Ja, lam * np.eye(k)])
    b = np.concatenate([sw * v, np.zeros(k)])
    x = np.linalg.lstsq(A, b, rcond=None)[0]

    rhs = Ja.T @ (w * v)
    resid = (Ja.T @ (w[:, None] * Ja)) @ x + lam**2 * x - rhs
    scale = max(1.0, float(np.abs(rhs).max()), float(np.abs(x).max()))
    if float(np.abs(resid).max()) > 1e-9 * scale:
        raise NumericalError(f"damped least-squares residual {np.abs(resid).max():.3e} exceeds 1e-9")
    qd[active] = x
    return qd


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` (axis times angle)."""
    c = (np.trace(R) - 1.0) / 2.0
    c = min(1.0, max(-1.0, c))
    angle = math.acos(c)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-7:
        return 0.5 * w
    if math.pi - angle < 1e-6:
        # near pi the antisymmetric part vanishes; use the symmetric part
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        i = int(np.argmax(axis))
        axis = B[i] / axis[i]
        return angle * axis / np.linalg.norm(axis)
    return angle / (2.0 * math.sin(angle)) * w


def rotation_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    angle = float(np.linalg.norm(w))
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if angle < 1e-9:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + math.sin(angle) / angle * K + (1.0 - math.cos(angle)) / angle**2 * K @ K

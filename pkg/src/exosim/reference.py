"""Human-like reaching references with a linear scapulohumeral rhythm.

The hand follows a straight-line minimum-jerk profile in task space.  Joint
references come from damped least-squares IK on the GH and elbow joints
while the two girdle joints are slaved to arm elevation::

    q1 = r1 * elevation,  q2 = r2 * elevation

The linear coupling is a first-order stand-in; the coefficients are
configurable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .kinematics import (
    N_JOINTS,
    REVOLUTE,
    DHChain,
    Pose,
    elevation_from_frames,
    frames,
    geometric_jacobian,
)

_IK_JOINTS = slice(2, 6)  # GH flexion, abduction, rotation, elbow


class ReferenceError(ValueError):
    pass


class IKError(RuntimeError):
    """Target unreachable or the iteration degenerated."""

    def __init__(self, message: str, residual: float, q=None):
        super().__init__(f"{message} (best residual {residual:.3e} m)")
        self.residual = residual
        self.q = q


class TrajectoryError(RuntimeError):
    def __init__(self, tick: int, cause: Exception):
        super().__init__(f"reference generation failed at tick {tick}: {cause}")
        self.tick = tick
        self.cause = cause


@dataclass(frozen=True)
class RhythmModel:
    r1: float = 0.15  # rad girdle rotation per rad elevation
    r2: float = 0.02  # m girdle slide per rad elevation

    def __post_init__(self):
        if not (math.isfinite(self.r1) and math.isfinite(self.r2)):
            raise ReferenceError("rhythm coefficients must be finite")


@dataclass(frozen=True)
class IKSettings:
    damping: float = 1e-2
    step: float = 0.5
    tol: float = 1e-5
    max_iter: int = 200


@dataclass(frozen=True)
class ReferenceSample:
    t: float
    q_des: np.ndarray
    qd_des: np.ndarray
    x_des: Pose


def min_jerk(x_start, x_goal, T: float, t: float):
    """Position, velocity and acceleration of the quintic point-to-point profile."""
    if not T > 0:
        raise ReferenceError(f"duration must be positive, got {T!r}")
    if not 0.0 <= t <= T:
        raise ReferenceError(f"t={t!r} outside [0, {T!r}]")
    x0 = np.asarray(x_start, dtype=float)
    x1 = np.asarray(x_goal, dtype=float)
    dx = x1 - x0
    s = t / T
    pos = 10 * s**3 - 15 * s**4 + 6 * s**5
    vel = (30 * s**2 - 60 * s**3 + 30 * s**4) / T
    acc = (60 * s - 180 * s**2 + 120 * s**3) / T**2
    # blended form so both endpoints are reproduced bit for bit
    return (1.0 - pos) * x0 + pos * x1, dx * vel, dx * acc


def apply_rhythm(chain: DHChain, rhythm: RhythmModel, q, tol: float = 1e-14, max_iter: int = 50):
    """Overwrite the girdle joints with the rhythm values for the current arm pose.

    Elevation itself depends on the girdle rotation, so ``q1 = r1 * el(q1)``
    is solved by Newton iteration on the scalar ``q1``.
    """
    q = np.array(q, dtype=float)
    for _ in range(max_iter):
        F = frames(chain, q, upto=4)
        el = elevation_from_frames(F)
        resid = q[0] - rhythm.r1 * el
        q[1] = rhythm.r2 * el
        if abs(resid) <= tol:
            return q
        slope = 1.0 - rhythm.r1 * _elevation_gradient(F)[0]
        q[0] -= resid / slope
    raise IKError("rhythm projection did not settle", float("nan"), q)


def _elevation_gradient(F: np.ndarray) -> np.ndarray:
    """d(elevation)/dq; zero at the arm-down cone point where it is undefined."""
    u = F[4, :3, 2]
    rho = math.hypot(u[0], u[1])
    grad = np.zeros(N_JOINTS)
    if rho < 1e-9:
        return grad
    # elevation = atan2(rho, -u_z)
    d_dux = (-u[2]) * (u[0] / rho)
    d_duy = (-u[2]) * (u[1] / rho)
    d_duz = rho
    du_scale = 1.0 / (rho**2 + u[2] ** 2)
    for j in range(4):  # only joints before the upper-arm frame tilt it
        if REVOLUTE[j]:
            du = np.cross(F[j, :3, 2], u)
            grad[j] = du_scale * (d_dux * du[0] + d_duy * du[1] + d_duz * du[2])
    return grad


def _handle_jacobian(chain: DHChain, rhythm: RhythmModel, F: np.ndarray) -> np.ndarray:
    """Handle position Jacobian w.r.t. joints 3-6 with the girdle slaved by the rhythm."""
    J = geometric_jacobian(F, F[-1, :3, 3], N_JOINTS)[:3]
    grad = _elevation_gradient(F)
    # q1 = r1 el(q1, q_ik): implicit derivative through the girdle rotation
    denom = 1.0 - rhythm.r1 * grad[0]
    dgirdle = np.outer([rhythm.r1, rhythm.r2], grad[_IK_JOINTS]) / denom
    return J[:, _IK_JOINTS] + J[:, :2] @ dgirdle


def ik_with_rhythm(
    chain: DHChain,
    rhythm: RhythmModel,
    x_des,
    q_seed,
    settings: IKSettings = IKSettings(),
) -> np.ndarray:
    """Joint vector placing the handle at ``x_des`` under the rhythm constraint.

    Wrist joints keep their seed values.  Raises ``IKError`` when the target
    fails the reach check or the iteration does not converge.
    """
    x_des = np.asarray(x_des, dtype=float)
    p = chain.params
    gh_home = frames(chain, np.zeros(N_JOINTS))[2, :3, 3]
    reach = 0.95 * (p.p4 + p.p5 + p.p6)
    dist = float(np.linalg.norm(x_des - gh_home))
    if dist > reach:
        raise IKError(f"target {dist:.4f} m from the GH centre exceeds reach {reach:.4f} m", dist - reach)

    lo, hi = chain.limits.lower, chain.limits.upper
    q = apply_rhythm(chain, rhythm, q_seed)
    best = math.inf
    best_q = q
    for _ in range(settings.max_iter + 1):
        F = frames(chain, q)
        err = x_des - F[-1, :3, 3]
        res = float(np.linalg.norm(err))
        if res < best:
            best, best_q = res, q
        if res < settings.tol:
            return q
        J = _handle_jacobian(chain, rhythm, F)
        lam2 = settings.damping**2
        dq = np.linalg.solve(J.T @ J + lam2 * np.eye(J.shape[1]), J.T @ err)
        q = q.copy()
        q[_IK_JOINTS] = np.clip(q[_IK_JOINTS] + settings.step * dq, lo[_IK_JOINTS], hi[_IK_JOINTS])
        q = apply_rhythm(chain, rhythm, q)
    raise IKError(f"no convergence in {settings.max_iter} iterations", best, best_q)


def generate_trajectory(
    chain: DHChain,
    rhythm: RhythmModel,
    q_start,
    x_goal,
    T: float,
    dt: float,
    t0: float = 0.0,
    settings: IKSettings = IKSettings(),
) -> list[ReferenceSample]:
    """Sample a minimum-jerk reach every ``dt`` and solve IK at each tick.

    Joint velocities are central differences of the joint samples and are
    zero at both ends, where the minimum-jerk profile is at rest.
    """
    if not (T > 0 and dt > 0):
        raise ReferenceError("duration and step must be positive")
    n = round(T / dt)
    if abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ReferenceError(f"step {dt!r} does not divide duration {T!r}")
    x_start = frames(chain, q_start)[-1, :3, 3]
    q = np.asarray(q_start, dtype=float)
    qs = np.empty((n + 1, N_JOINTS))
    xs = np.empty((n + 1, 3))
    rots = []
    for k in range(n + 1):
        x, _, _ = min_jerk(x_start, x_goal, T, min(k * dt, T))
        try:
            q = ik_with_rhythm(chain, rhythm, x, q, settings)
        except (IKError, ReferenceError) as exc:
            raise TrajectoryError(k, exc) from exc
        qs[k] = q
        xs[k] = x
        rots.append(frames(chain, q)[-1, :3, :3])
    qd = np.zeros_like(qs)
    if n >= 2:
        qd[1:-1] = (qs[2:] - qs[:-2]) / (2 * dt)
    return [
        ReferenceSample(t0 + k * dt, qs[k], qd[k], Pose(rots[k], xs[k]))
        for k in range(n + 1)
    ]


def write_trajectory_csv(samples, path) -> None:
    header = (
        ["t"]
        + [f"q{i + 1}" for i in range(N_JOINTS)]
        + [f"qd{i + 1}" for i in range(N_JOINTS)]
        + ["x", "y", "z"]
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in samples:
            row = [s.t, *s.q_des, *s.qd_des, *s.x_des.translation]
            w.writerow([repr(float(v)) for v in row])

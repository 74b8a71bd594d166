"""Built-in numerical oracles.

Each oracle compares a production code path against an independent
computation and reports the worst error next to its tolerance.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import kinematics as kin
from .controller import ImpedanceParams, PortImpedance, admittance_step, init_admittance
from .dynamics import Plant, default_inertias, gravity_vector, potential_energy
from .kinematics import N_JOINTS, PortId, build_chain, damped_pinv_solve, frames, rotation_log
from .sim import free_motion_energy_audit

FD_STEP = 1e-6


@dataclass
class OracleResult:
    name: str
    error: float
    tolerance: float
    seconds: float
    detail: str = ""

    def __post_init__(self):
        self.error = float(self.error)

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)


def analytic_jacobian(chain, q, port) -> np.ndarray:
    """Jacobian under test; replaced in fault-injection tests."""
    return kin.jacobian(chain, q, port).J


def random_states(chain, n: int = 10, seed: int = 0) -> np.ndarray:
    """Joint vectors drawn uniformly inside the joint limits."""
    rng = np.random.default_rng(seed)
    lo, hi = chain.limits.lower, chain.limits.upper
    return lo + (hi - lo) * rng.uniform(0.02, 0.98, size=(n, N_JOINTS))


def _port_pose(chain, q, port):
    F = frames(chain, q)
    return kin.cuff_transform(chain, q, F) if port is PortId.A else F[-1]


def fd_jacobian(chain, q, port, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the port pose: position rows, then rotation-vector rows."""
    J = np.empty((6, N_JOINTS))
    for j in range(N_JOINTS):
        e = np.zeros(N_JOINTS)
        e[j] = h
        Tp = _port_pose(chain, q + e, port)
        Tm = _port_pose(chain, q - e, port)
        J[:3, j] = (Tp[:3, 3] - Tm[:3, 3]) / (2 * h)
        J[3:, j] = rotation_log(Tp[:3, :3] @ Tm[:3, :3].T) / (2 * h)
    return J


def jacobian_oracle(chain=None, n: int = 10, seed: int = 0) -> OracleResult:
    """Analytic vs finite-difference Jacobians, both ports, relative error."""
    t0 = time.perf_counter()
    chain = chain or build_chain()
    plant = Plant(chain, default_inertias(chain))
    worst = 0.0
    for q in random_states(chain, n, seed):
        terms = plant.terms(q)
        for port, J_kernel in ((PortId.A, terms.J_A), (PortId.B, terms.J_B)):
            J_fd = fd_jacobian(chain, q, port)
            for J in (analytic_jacobian(chain, q, port), J_kernel):
                lin = np.abs(J[:3] - J_fd[:3]).max() / max(1.0, np.abs(J_fd[:3]).max())
                ang = np.abs(J[3:] - J_fd[3:]).max()
                worst = max(worst, lin, ang)
    return OracleResult("jacobian_fd", worst, 1e-6, time.perf_counter() - t0, f"{n} states, both ports")


def fd_gravity(chain, inertias, q, h: float = 1e-5) -> np.ndarray:
    g = np.empty(N_JOINTS)
    for j in range(N_JOINTS):
        e = np.zeros(N_JOINTS)
        e[j] = h
        g[j] = (potential_energy(chain, inertias, q + e) - potential_energy(chain, inertias, q - e)) / (2 * h)
    return g


def gravity_oracle(chain=None, n: int = 10, seed: int = 1) -> OracleResult:
    """Gravity load vs central differences of the potential energy."""
    t0 = time.perf_counter()
    chain = chain or build_chain()
    inertias = default_inertias(chain)
    worst = 0.0
    for q in random_states(chain, n, seed):
        g = gravity_vector(chain, inertias, q)
        g_fd = fd_gravity(chain, inertias, q)
        worst = max(worst, np.abs(g - g_fd).max() / max(1.0, np.abs(g_fd).max()))
    return OracleResult("gravity_fd", worst, 1e-6, time.perf_counter() - t0, f"{n} states")


def energy_oracle(dt: float = 2e-5, duration: float = 1.0) -> OracleResult:
    """Free motion from a raised, moving posture; relative energy drift."""
    t0 = time.perf_counter()
    chain = build_chain()
    inertias = default_inertias(chain)
    q0 = np.array([0.2, 0.05, 0.6, 0.4, 0.2, 0.9, 0.1, -0.1])
    qd0 = np.array([0.3, 0.0, -0.5, 0.4, 0.6, -0.8, 1.0, 0.5])
    audit = free_motion_energy_audit(chain, inertias, q0, qd0, dt, duration)
    return OracleResult(
        "energy_audit", audit["energy_drift_rel"], 1e-5, time.perf_counter() - t0, f"{audit['steps']} steps of {dt:g} s"
    )


def normal_equation_solve(J, v, lam, weights) -> np.ndarray:
    """Explicit ``(J^T W J + lam^2 I) x = J^T W v``."""
    W = np.diag(weights)
    n = J.shape[1]
    return np.linalg.solve(J.T @ W @ J + lam**2 * np.eye(n), J.T @ W @ v)


def dls_oracle(n: int = 10, seed: int = 2) -> OracleResult:
    """Weighted damped least squares vs the explicit normal equations."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    ones = np.ones(6, dtype=bool)
    for _ in range(n):
        J = rng.normal(size=(12, 6))
        v = rng.normal(size=12)
        w = rng.uniform(0.1, 2.0, size=12)
        lam = 10 ** rng.uniform(-3, -1)
        x = damped_pinv_solve(J, v, lam, w, ones)
        x_ref = normal_equation_solve(J, v, lam, w)
        worst = max(worst, np.abs(x - x_ref).max() / max(1.0, np.abs(x_ref).max()))
    return OracleResult("dls_normal_equations", worst, 1e-9, time.perf_counter() - t0, f"{n} random 12x6 systems")


def admittance_oracle(dt: float = 1e-4, duration: float = 1.0) -> OracleResult:
    """Virtual mass-damper step response vs ``v(t) = F/B (1 - exp(-B t / M))``."""
    t0 = time.perf_counter()
    m, b, force = 1.0, 10.0, 1.0
    port = PortImpedance.diagonal(mass=(m, 1.0), damping=(b, 1.0))
    params = ImpedanceParams(port, port)
    state = init_admittance(_rest_terms(), np.zeros(N_JOINTS))
    F = {PortId.A: np.zeros(6), PortId.B: np.array([force, 0, 0, 0, 0, 0])}
    worst = 0.0
    for k in range(1, int(round(duration / dt)) + 1):
        state, v = admittance_step(state, F, params, dt, k * dt)
        exact = force / b * (1.0 - math.exp(-b * k * dt / m))
        worst = max(worst, abs(v[PortId.B][0] - exact))
    return OracleResult("admittance_step", worst, 1e-4, time.perf_counter() - t0, "1-DoF M=1 B=10 F=1")


def _rest_terms():
    chain = build_chain()
    return Plant(chain, default_inertias(chain)).terms(np.zeros(N_JOINTS))


ORACLES = (jacobian_oracle, gravity_oracle, energy_oracle, dls_oracle, admittance_oracle)


def run_checks() -> list[OracleResult]:
    return [oracle() for oracle in ORACLES]

"""Rigid-body plant: inertia matrix, Coriolis terms, gravity load, forward dynamics.

All quantities are in world coordinates.  Link ``k`` (0-based) is the body
moved by joint ``k`` and carries DH frame ``k + 1``.  ``gravity_vector``
returns the holding load: applying ``tau = g(q)`` keeps a resting arm at rest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._kernel import plant_kernel
from .kinematics import N_JOINTS, REVOLUTE, DHChain, PortId, _as_q, frames

GRAVITY = np.array([0.0, 0.0, -9.81])
BODY_MASS = 6.35  # kg, 14 lb device body
DEFAULT_LINK_RADIUS = 0.05
DEFAULT_DAMPING = np.array([0.05, 0.5, 0.05, 0.05, 0.05, 0.05, 0.01, 0.01])


@dataclass(frozen=True)
class LinkInertia:
    """Inertial table for the 8 links: mass (kg), COM in link frame (m), COM inertia (kg m^2)."""

    mass: np.ndarray
    com: np.ndarray
    inertia: np.ndarray

    def __post_init__(self):
        m = np.ascontiguousarray(self.mass, dtype=float)
        c = np.ascontiguousarray(self.com, dtype=float)
        I = np.ascontiguousarray(self.inertia, dtype=float)
        if m.shape != (N_JOINTS,) or c.shape != (N_JOINTS, 3) or I.shape != (N_JOINTS, 3, 3):
            raise ValueError("link inertia table needs 8 masses, 8 COMs and 8 3x3 tensors")
        if np.any(m < 0):
            raise ValueError("link masses must be non-negative")
        for k in range(N_JOINTS):
            Ik = I[k]
            if not np.allclose(Ik, Ik.T, rtol=0.0, atol=1e-12):
                raise ValueError(f"link {k + 1}: inertia tensor is not symmetric")
            a, b, cc = np.linalg.eigvalsh(Ik)
            tol = 1e-12 * max(1.0, cc)
            if a < -tol:
                raise ValueError(f"link {k + 1}: inertia tensor is not positive semidefinite")
            if a + b < cc - tol:
                raise ValueError(f"link {k + 1}: principal moments violate the triangle inequality")
        object.__setattr__(self, "mass", m)
        object.__setattr__(self, "com", c)
        object.__setattr__(self, "inertia", I)

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())


def link_segments(chain: DHChain) -> list[tuple[np.ndarray, np.ndarray]]:
    """Nominal structural segment of each link, as endpoints in the link frame."""
    p = chain.params
    z = np.zeros(3)
    return [
        (z, np.array([0.0, 0.0, p.p2])),  # girdle rail, radial
        (z, np.array([0.0, 0.0, p.p3])),  # carriage, GH centre back toward the rail
        (z, np.array([p.p3, 0.0, 0.0])),  # spherical linkage bar
        (z, np.array([p.p3, 0.0, 0.0])),  # spherical linkage bar
        (np.array([0.0, p.p4, 0.0]), z),  # upper arm, GH centre to elbow
        (np.array([-p.p5, 0.0, 0.0]), z),  # forearm, elbow to wrist
        (np.array([0.0, 0.0, -p.p6 / 4]), np.array([0.0, 0.0, p.p6 / 4])),  # wrist gimbal
        (np.array([-p.p6, 0.0, 0.0]), z),  # hand/handle
    ]


def default_inertias(
    chain: DHChain, body_mass: float = BODY_MASS, radius: float = DEFAULT_LINK_RADIUS
) -> LinkInertia:
    """Spread ``body_mass`` over the links in proportion to segment length.

    Each link is a solid cylinder of the given radius centred on its segment.
    """
    segs = link_segments(chain)
    lengths = np.array([np.linalg.norm(b - a) for a, b in segs])
    mass = body_mass * lengths / lengths.sum()
    com = np.array([(a + b) / 2 for a, b in segs])
    inertia = np.empty((N_JOINTS, 3, 3))
    for k, (a, b) in enumerate(segs):
        u = (b - a) / lengths[k]
        m, L = mass[k], lengths[k]
        axial = 0.5 * m * radius**2
        transverse = m * (3 * radius**2 + L**2) / 12.0
        uu = np.outer(u, u)
        inertia[k] = axial * uu + transverse * (np.eye(3) - uu)
    return LinkInertia(mass, com, inertia)


class PlantTerms(NamedTuple):
    F: np.ndarray  # world transforms of frames 0..8
    M: np.ndarray
    bias: np.ndarray  # C(q, qd) qd
    g: np.ndarray
    T_A: np.ndarray  # cuff transform
    J_A: np.ndarray
    J_B: np.ndarray
    U: float = 0.0  # gravitational potential energy

    @property
    def T_B(self) -> np.ndarray:
        return self.F[-1]


class Plant:
    """Chain and inertia table bound for repeated evaluation at the sim rate."""

    def __init__(self, chain: DHChain, inertias: LinkInertia, gravity=GRAVITY):
        self.chain = chain
        self.inertias = inertias
        self.gravity = np.ascontiguousarray(gravity, dtype=float)
        rows = chain.rows
        self._args = (
            REVOLUTE.copy(),
            np.array([r.theta for r in rows]),
            np.array([r.d for r in rows]),
            np.array([r.a for r in rows]),
            np.array([r.alpha for r in rows]),
            np.ascontiguousarray(chain.base, dtype=float),
            chain.params.beta * chain.params.p4,
            inertias.mass,
            inertias.com,
            inertias.inertia,
        )

    def terms(self, q, qd=None) -> PlantTerms:
        q = np.ascontiguousarray(q, dtype=float)
        qd = np.zeros(N_JOINTS) if qd is None else np.ascontiguousarray(qd, dtype=float)
        return PlantTerms(*plant_kernel(*self._args, q, qd, self.gravity))


def _qd(state) -> np.ndarray:
    qd = getattr(state, "qd", None)
    return np.zeros(N_JOINTS) if qd is None else np.asarray(qd, dtype=float)


def plant_terms(chain: DHChain, inertias: LinkInertia, q, qd=None, gravity=GRAVITY) -> PlantTerms:
    return Plant(chain, inertias, gravity).terms(q, qd)


def mass_matrix(chain: DHChain, inertias: LinkInertia, state) -> np.ndarray:
    """``M(q) = sum_k m_k Jv_k^T Jv_k + Jw_k^T I_k Jw_k`` over COM Jacobians."""
    return plant_terms(chain, inertias, _as_q(state)).M


def gravity_vector(chain: DHChain, inertias: LinkInertia, state, gravity=GRAVITY) -> np.ndarray:
    """Joint load needed to hold the pose against ``gravity`` (N m or N)."""
    return plant_terms(chain, inertias, _as_q(state), gravity=gravity).g


def coriolis_vector(chain: DHChain, inertias: LinkInertia, state) -> np.ndarray:
    """``C(q, qd) qd`` from the velocity-product accelerations of every link."""
    return plant_terms(chain, inertias, _as_q(state), _qd(state)).bias


def coriolis_matrix(chain: DHChain, inertias: LinkInertia, state, h: float = 1e-6) -> np.ndarray:
    """Coriolis matrix from Christoffel symbols of central-difference ``dM/dq``."""
    q = _as_q(state)
    qd = _qd(state)
    plant = Plant(chain, inertias)
    dM = np.empty((N_JOINTS, N_JOINTS, N_JOINTS))  # dM[i] = dM/dq_i
    for i in range(N_JOINTS):
        e = np.zeros(N_JOINTS)
        e[i] = h
        dM[i] = (plant.terms(q + e).M - plant.terms(q - e).M) / (2 * h)
    # c_kj = sum_i 1/2 (dM_kj/dq_i + dM_ki/dq_j - dM_ij/dq_k) qd_i
    gamma = 0.5 * (dM.transpose(1, 2, 0) + dM.transpose(1, 0, 2) - dM)  # [k, j, i]
    return np.einsum("kji,i->kj", gamma, qd)


def link_com_positions(chain: DHChain, inertias: LinkInertia, q) -> np.ndarray:
    F = frames(chain, q)
    return np.einsum("kij,kj->ki", F[1:, :3, :3], inertias.com) + F[1:, :3, 3]


def potential_energy(chain: DHChain, inertias: LinkInertia, state, gravity=GRAVITY) -> float:
    com = link_com_positions(chain, inertias, _as_q(state))
    return float(-inertias.mass @ (com @ np.asarray(gravity, dtype=float)))


def kinetic_energy(chain: DHChain, inertias: LinkInertia, state) -> float:
    qd = _qd(state)
    return 0.5 * float(qd @ mass_matrix(chain, inertias, state) @ qd)


def generalized_force(terms: PlantTerms, wrenches) -> np.ndarray:
    """Joint-space image ``J_A^T F_A + J_B^T F_B`` of world-frame port wrenches."""
    out = np.zeros(N_JOINTS)
    if wrenches is None:
        return out
    for port, J in ((PortId.A, terms.J_A), (PortId.B, terms.J_B)):
        if isinstance(wrenches, dict):
            w = wrenches.get(port)
        else:
            w = wrenches[0 if port is PortId.A else 1]
        if w is not None:
            out += J.T @ np.asarray(w, dtype=float)
    return out


def solve_qdd(terms: PlantTerms, qd, tau, wrenches=None, damping=None) -> np.ndarray:
    rhs = np.asarray(tau, dtype=float) - terms.bias - terms.g
    if wrenches is not None:
        rhs = rhs + generalized_force(terms, wrenches)
    if damping is not None:
        rhs = rhs - np.asarray(damping, dtype=float) * qd
    return np.linalg.solve(terms.M, rhs)


def forward_dynamics(
    chain: DHChain,
    inertias: LinkInertia,
    state,
    tau,
    wrenches=None,
    damping=DEFAULT_DAMPING,
    gravity=GRAVITY,
) -> np.ndarray:
    """Joint accelerations from ``M qdd = tau + J^T F - C qd - g - D qd``.

    ``wrenches`` is ``{PortId.A: w_A, PortId.B: w_B}`` or an ``(w_A, w_B)``
    pair, each a world-frame ``[force, torque]`` applied to the device at the
    port.  Passive wrist joints must receive zero torque.
    """
    q = _as_q(state)
    qd = _qd(state)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau[6:] != 0.0):
        raise ValueError("passive wrist joints cannot receive actuator torque")
    terms = plant_terms(chain, inertias, q, qd, gravity)
    return solve_qdd(terms, qd, tau, wrenches, damping)

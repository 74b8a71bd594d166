"""Compiled evaluation of the rigid-body terms.

One pass over the chain produces frames, inertia matrix, velocity-product
load, gravity load, potential energy and both port Jacobians.  Everything is written as scalar
loops into preallocated buffers; small-array numpy calls dominate runtime
otherwise.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _cross(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@njit(cache=True, inline="always")
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True, inline="always")
def _matvec(A, x, out):
    for r in range(3):
        out[r] = A[r, 0] * x[0] + A[r, 1] * x[1] + A[r, 2] * x[2]


@njit(cache=True)
def _matmul4(A, B, out):
    for r in range(4):
        for c in range(4):
            out[r, c] = A[r, 0] * B[0, c] + A[r, 1] * B[1, c] + A[r, 2] * B[2, c] + A[r, 3] * B[3, c]


@njit(cache=True)
def plant_kernel(rev, theta0, d0, a, alpha, base, cuff_len, mass, com_local, inertia_local, q, qd, gravity):
    n = q.shape[0]
    F = np.empty((n + 1, 4, 4))
    A = np.zeros((4, 4))
    A[3, 3] = 1.0
    F[0] = base
    for i in range(n):
        if rev[i]:
            th = theta0[i] + q[i]
            d = d0[i]
        else:
            th = theta0[i]
            d = d0[i] + q[i]
        ct, st = math.cos(th), math.sin(th)
        ca, sa = math.cos(alpha[i]), math.sin(alpha[i])
        A[0, 0] = ct
        A[0, 1] = -st * ca
        A[0, 2] = st * sa
        A[0, 3] = a[i] * ct
        A[1, 0] = st
        A[1, 1] = ct * ca
        A[1, 2] = -ct * sa
        A[1, 3] = a[i] * st
        A[2, 1] = sa
        A[2, 2] = ca
        A[2, 3] = d
        _matmul4(F[i], A, F[i + 1])

    Z = np.empty((n, 3))
    O = np.empty((n, 3))
    for j in range(n):
        for c in range(3):
            Z[j, c] = F[j, c, 2]
            O[j, c] = F[j, c, 3]

    com = np.empty((n, 3))
    Iw = np.empty((n, 3, 3))
    tmp = np.empty((3, 3))
    for k in range(n):
        R = F[k + 1]
        for r in range(3):
            com[k, r] = R[r, 0] * com_local[k, 0] + R[r, 1] * com_local[k, 1] + R[r, 2] * com_local[k, 2] + R[r, 3]
        Ik = inertia_local[k]
        for r in range(3):
            for c in range(3):
                tmp[r, c] = R[r, 0] * Ik[0, c] + R[r, 1] * Ik[1, c] + R[r, 2] * Ik[2, c]
        for r in range(3):
            for c in range(3):
                Iw[k, r, c] = tmp[r, 0] * R[c, 0] + tmp[r, 1] * R[c, 1] + tmp[r, 2] * R[c, 2]

    Jv = np.zeros((n, n, 3))
    Jw = np.zeros((n, n, 3))
    r3 = np.empty(3)
    for k in range(n):
        for j in range(k + 1):
            if rev[j]:
                for c in range(3):
                    r3[c] = com[k, c] - O[j, c]
                _cross(Z[j], r3, Jv[k, j])
                for c in range(3):
                    Jw[k, j, c] = Z[j, c]
            else:
                for c in range(3):
                    Jv[k, j, c] = Z[j, c]

    M = np.zeros((n, n))
    g = np.zeros(n)
    U = 0.0
    for k in range(n):
        U -= mass[k] * _dot(com[k], gravity)
    IJ = np.empty((n, 3))
    for k in range(n):
        for j in range(k + 1):
            _matvec(Iw[k], Jw[k, j], IJ[j])
        for i in range(k + 1):
            g[i] -= mass[k] * _dot(Jv[k, i], gravity)
            for j in range(i, k + 1):
                M[i, j] += mass[k] * _dot(Jv[k, i], Jv[k, j]) + _dot(Jw[k, i], IJ[j])
    for i in range(n):
        for j in range(i):
            M[i, j] = M[j, i]

    # velocity-product (Coriolis/centrifugal) load C(q, qd) qd
    w_link = np.zeros((n, 3))
    alpha_link = np.zeros((n, 3))
    zdot = np.zeros((n, 3))
    w = np.zeros(3)
    al = np.zeros(3)
    for j in range(n):
        _cross(w, Z[j], zdot[j])
        if rev[j]:
            for c in range(3):
                w[c] += Z[j, c] * qd[j]
                al[c] += zdot[j, c] * qd[j]
        for c in range(3):
            w_link[j, c] = w[c]
            alpha_link[j, c] = al[c]
    odot = np.zeros((n, 3))
    col = np.empty(3)
    for j in range(1, n):
        for i in range(j):
            if rev[i]:
                for c in range(3):
                    r3[c] = O[j, c] - O[i, c]
                _cross(Z[i], r3, col)
                for c in range(3):
                    odot[j, c] += col[c] * qd[i]
            else:
                for c in range(3):
                    odot[j, c] += Z[i, c] * qd[i]
    bias = np.zeros(n)
    v_com = np.empty(3)
    a_com = np.empty(3)
    col2 = np.empty(3)
    mom = np.empty(3)
    Iww = np.empty(3)
    for k in range(n):
        for c in range(3):
            v_com[c] = 0.0
            a_com[c] = 0.0
        for j in range(k + 1):
            for c in range(3):
                v_com[c] += Jv[k, j, c] * qd[j]
        for j in range(k + 1):
            if rev[j]:
                for c in range(3):
                    r3[c] = com[k, c] - O[j, c]
                _cross(zdot[j], r3, col)
                for c in range(3):
                    r3[c] = v_com[c] - odot[j, c]
                _cross(Z[j], r3, col2)
                for c in range(3):
                    a_com[c] += (col[c] + col2[c]) * qd[j]
            else:
                for c in range(3):
                    a_com[c] += zdot[j, c] * qd[j]
        _matvec(Iw[k], alpha_link[k], mom)
        _matvec(Iw[k], w_link[k], Iww)
        _cross(w_link[k], Iww, col)
        for c in range(3):
            mom[c] += col[c]
            a_com[c] *= mass[k]
        for i in range(k + 1):
            bias[i] += _dot(Jv[k, i], a_com) + _dot(Jw[k, i], mom)

    # cuff: link 5 rotated by its own joint angle, cuff_len down the upper arm
    th = theta0[4] + q[4]
    ct, st = math.cos(th), math.sin(th)
    L = np.zeros((4, 4))
    L[0, 0] = ct
    L[0, 1] = -st
    L[1, 0] = st
    L[1, 1] = ct
    L[2, 2] = 1.0
    L[2, 3] = cuff_len
    L[3, 3] = 1.0
    T_A = np.empty((4, 4))
    _matmul4(F[4], L, T_A)
    J_A = np.zeros((6, n))
    J_B = np.zeros((6, n))
    pa = np.empty(3)
    pb = np.empty(3)
    for c in range(3):
        pa[c] = T_A[c, 3]
        pb[c] = F[n, c, 3]
    for j in range(n):
        if rev[j]:
            for c in range(3):
                r3[c] = pb[c] - O[j, c]
            _cross(Z[j], r3, col)
            for c in range(3):
                J_B[c, j] = col[c]
                J_B[3 + c, j] = Z[j, c]
            if j < 5:
                for c in range(3):
                    r3[c] = pa[c] - O[j, c]
                _cross(Z[j], r3, col)
                for c in range(3):
                    J_A[c, j] = col[c]
                    J_A[3 + c, j] = Z[j, c]
        else:
            for c in range(3):
                J_B[c, j] = Z[j, c]
                if j < 5:
                    J_A[c, j] = Z[j, c]
    return F, M, bias, g, T_A, J_A, J_B, U


@njit(cache=True)
def advance(M, bias, g, tau, f_ext, damping, q, qd, dt):
    """Semi-implicit Euler step from ``M qdd = tau + f_ext - bias - g - D qd``.

    Returns ``(q', qd', qdd)``; the solve is a Cholesky factorisation.
    """
    n = q.shape[0]
    rhs = np.empty(n)
    for i in range(n):
        rhs[i] = tau[i] + f_ext[i] - bias[i] - g[i] - damping[i] * qd[i]
    L = np.zeros((n, n))
    for j in range(n):
        s = M[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            raise ValueError("inertia matrix is not positive definite")
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, n):
            s = M[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    y = np.empty(n)
    for i in range(n):
        s = rhs[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    qdd = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * qdd[k]
        qdd[i] = s / L[i, i]
    qd1 = np.empty(n)
    q1 = np.empty(n)
    for i in range(n):
        qd1[i] = qd[i] + dt * qdd[i]
        q1[i] = q[i] + dt * qd1[i]
    return q1, qd1, qdd


@njit(cache=True)
def rotvec(R):
    """Rotation vector (log map) of a 3x3 rotation matrix."""
    c = (R[0, 0] + R[1, 1] + R[2, 2] - 1.0) / 2.0
    c = min(1.0, max(-1.0, c))
    angle = math.acos(c)
    w = np.empty(3)
    w[0] = R[2, 1] - R[1, 2]
    w[1] = R[0, 2] - R[2, 0]
    w[2] = R[1, 0] - R[0, 1]
    if angle < 1e-7:
        for i in range(3):
            w[i] *= 0.5
        return w
    if math.pi - angle < 1e-6:
        # near a half turn the antisymmetric part vanishes; use the symmetric part
        k = 0
        for i in range(1, 3):
            if R[i, i] > R[k, k]:
                k = i
        piv = math.sqrt(max(0.0, (R[k, k] + 1.0) / 2.0))
        axis = np.empty(3)
        for i in range(3):
            axis[i] = (R[k, i] + (1.0 if i == k else 0.0)) / 2.0 / piv
        nrm = math.sqrt(axis[0] ** 2 + axis[1] ** 2 + axis[2] ** 2)
        for i in range(3):
            axis[i] = angle * axis[i] / nrm
        return axis
    s = angle / (2.0 * math.sin(angle))
    for i in range(3):
        w[i] *= s
    return w


@njit(cache=True)
def spring_damper_wrench(T, J, qd, anchor, target, target_rate, k, d, kr, dr):
    """Translational and rotational spring-damper pull of a port toward a target."""
    n = qd.shape[0]
    tw = np.zeros(6)
    for r in range(6):
        s = 0.0
        for c in range(n):
            s += J[r, c] * qd[c]
        tw[r] = s
    w = np.zeros(6)
    for i in range(3):
        w[i] = k * (target[i] - T[i, 3]) + d * (target_rate[i] - tw[i])
    if kr != 0.0:
        Rerr = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                Rerr[i, j] = anchor[i, 0] * T[j, 0] + anchor[i, 1] * T[j, 1] + anchor[i, 2] * T[j, 2]
        e = rotvec(Rerr)
        for i in range(3):
            w[3 + i] = kr * e[i]
    for i in range(3):
        w[3 + i] -= dr * tw[3 + i]
    return w

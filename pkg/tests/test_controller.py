import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from exosim.controller import (
    AdmittanceState,
    ConfigurationError,
    ControllerSettings,
    ImmeasurableError,
    ImpedanceParams,
    PDGains,
    PortImpedance,
    TimestampError,
    admittance_step,
    control_step,
    estimate_rendered_impedance,
    init_admittance,
    passive_map,
    resolve_equilibria,
    resolve_rates,
)
from exosim.dynamics import gravity_vector
from exosim.kinematics import PortId, damped_pinv_solve

A, B = PortId.A, PortId.B
POSTURE = np.array([0.05, 0.01, 0.4, 0.2, 0.1, 0.7, 0.0, 0.0])


@pytest.fixture(scope="module")
def terms(plant):
    return plant.terms(POSTURE)


def _zero_wrench():
    return {A: np.zeros(6), B: np.zeros(6)}


def _one_dof(m, b, k=0.0, x0=None):
    port = PortImpedance.diagonal(mass=(m, 1.0), damping=(b, 1.0), stiffness=(k, 0.0), x0=x0)
    return ImpedanceParams(port, port)


def _run_admittance(state, params, forces, dt):
    out = []
    for k, F in enumerate(forces, start=1):
        state, v = admittance_step(state, {A: np.zeros(6), B: F}, params, dt, k * dt)
        out.append(v[B].copy())
    return state, np.array(out)


def _rest_state(terms):
    return init_admittance(terms, POSTURE)


# -- admittance law -------------------------------------------------------

@given(
    st.floats(0.1, 10.0), st.floats(0.0, 50.0), st.floats(0.0, 500.0), st.floats(0.0, 50.0), st.floats(0.0, 5.0)
)
def test_equilibrium_is_fixed_point(m, b, k, kr, br):
    x0 = np.array([0.1, 0.2, -0.3, 0.1, -0.2, 0.3])
    port = PortImpedance(np.full(6, m), np.r_[[b] * 3, [br] * 3], np.r_[[k] * 3, [kr] * 3], x0)
    params = ImpedanceParams(port, port)
    state = AdmittanceState({A: x0.copy(), B: x0.copy()}, {A: np.zeros(6), B: np.zeros(6)}, 0.0, np.zeros(8), np.zeros(8))
    for i in range(1, 50):
        state, v = admittance_step(state, _zero_wrench(), params, 1e-4, i * 1e-4)
        assert np.all(v[A] == 0.0) and np.all(v[B] == 0.0)
        assert np.array_equal(state.x[B], x0)


def test_first_order_step_response(terms):
    dt = 1e-4
    n = 10000
    params = _one_dof(1.0, 10.0)
    F = np.array([1.0, 0, 0, 0, 0, 0])
    _, v = _run_admittance(_rest_state(terms), params, [F] * n, dt)
    t = dt * np.arange(1, n + 1)
    exact = 0.1 * (1 - np.exp(-10 * t))
    assert np.abs(v[:, 0] - exact).max() < 1e-4
    assert abs(v[-1, 0] - 0.1) < 1e-4


def test_doubling_all_parameters_keeps_velocity(terms):
    rng = np.random.default_rng(0)
    forces = [np.r_[rng.normal(size=3), np.zeros(3)] for _ in range(500)]
    x0 = np.r_[0.0, 0.3, -0.3, 0, 0, 0]
    base = _one_dof(1.5, 12.0, 80.0, x0)
    double = ImpedanceParams(*(PortImpedance(2 * p.mass, 2 * p.damping, 2 * p.stiffness, x0) for p in (base.A, base.B)))
    s = _rest_state(terms)
    _, v1 = _run_admittance(s, base, forces, 1e-3)
    _, v2 = _run_admittance(s, double, [2 * f for f in forces], 1e-3)
    assert np.abs(v1 - v2).max() < 1e-12


@given(st.floats(-5.0, 5.0).filter(lambda x: abs(x) > 1e-3))
def test_homogeneity_in_wrench(s):
    from exosim.dynamics import Plant, default_inertias
    from exosim.kinematics import build_chain

    chain = build_chain()
    terms = Plant(chain, default_inertias(chain)).terms(POSTURE)
    imp = ImpedanceParams()
    settings = ControllerSettings()
    F = {A: np.array([0.5, -1, 0.2, 0.01, 0.02, 0.0]), B: np.array([1.0, 0.3, -0.4, 0.0, 0.05, -0.02])}
    Fs = {p: s * w for p, w in F.items()}
    adm = _rest_state(terms)
    out1, _ = control_step(terms, POSTURE, np.zeros(8), F, imp, PDGains(), adm, settings, 1e-3, 1e-3)
    out2, _ = control_step(terms, POSTURE, np.zeros(8), Fs, imp, PDGains(), adm, settings, 1e-3, 1e-3)
    for p in (A, B):
        assert np.allclose(out2.v_des[p], s * out1.v_des[p], rtol=1e-9, atol=1e-15)
    scale = np.abs(out1.qd_des).max()
    assert np.abs(out2.qd_des - s * out1.qd_des).max() <= 1e-9 * abs(s) * scale


def test_admittance_passivity_under_dissipative_force(terms):
    params = _one_dof(2.0, 0.0)
    state = _rest_state(terms)
    state = AdmittanceState(state.x, {A: np.zeros(6), B: np.r_[0.5, -0.2, 0.1, 0.3, 0, -0.1]}, 0.0,
                            state.q_hold, state.q_offset)
    M = params.B.mass
    energy = 0.5 * state.v[B] @ M @ state.v[B]
    for k in range(1, 2000):
        F = -3.0 * state.v[B]  # F^T v <= 0
        state, v = admittance_step(state, {A: np.zeros(6), B: F}, params, 1e-3, k * 1e-3)
        e = 0.5 * v[B] @ M @ v[B]
        assert e <= energy
        energy = e


def test_stiffness_without_equilibrium_rejected(terms):
    params = _one_dof(1.0, 1.0, 10.0)
    with pytest.raises(ConfigurationError, match="equilibrium"):
        admittance_step(_rest_state(terms), _zero_wrench(), params, 1e-3, 1e-3)
    # resolve_equilibria fills the start pose
    filled = resolve_equilibria(params, _rest_state(terms))
    state, v = admittance_step(_rest_state(terms), _zero_wrench(), filled, 1e-3, 1e-3)
    assert np.all(v[B] == 0.0)


def test_time_must_increase(terms):
    state = _rest_state(terms)
    state, _ = admittance_step(state, _zero_wrench(), ImpedanceParams(), 1e-3, 0.5)
    with pytest.raises(TimestampError):
        admittance_step(state, _zero_wrench(), ImpedanceParams(), 1e-3, 0.5)


@pytest.mark.parametrize(
    "kwargs, match",
    [
        (dict(mass=np.zeros(6)), "positive definite"),
        (dict(damping=-np.ones(6)), "semidefinite"),
        (dict(stiffness=np.diag([1, 2, 3, 4, 5, 6.0]) + np.triu(np.ones((6, 6)), 1)), "symmetric"),
    ],
)
def test_impedance_validation(kwargs, match):
    base = dict(mass=np.ones(6), damping=np.ones(6), stiffness=np.zeros(6))
    base.update(kwargs)
    with pytest.raises(ConfigurationError, match=match):
        PortImpedance(**base)


def test_gain_and_setting_validation():
    with pytest.raises(ConfigurationError):
        PDGains(kp=-1.0)
    with pytest.raises(ConfigurationError):
        PDGains(kv=0.0)
    with pytest.raises(ConfigurationError):
        ControllerSettings(mode="teleop")
    with pytest.raises(ConfigurationError):
        ControllerSettings(damping=0.0)
    with pytest.raises(ConfigurationError):
        ControllerSettings(passive_model="guess")


# -- control step ---------------------------------------------------------

def test_gravity_feedforward_is_exact(terms, chain, inertias):
    out, _ = control_step(
        terms, POSTURE, np.zeros(8), _zero_wrench(), ImpedanceParams(), PDGains(), _rest_state(terms),
        ControllerSettings(), 1e-3, 1e-3,
    )
    g = gravity_vector(chain, inertias, POSTURE)
    assert np.array_equal(out.tau[:6], g[:6])
    assert np.all(out.tau[6:] == 0.0)
    assert np.all(out.qd_des == 0.0)


def test_equal_and_opposite_wrenches_cancel():
    # identical 1-DoF port frames, equal weights and damping: v_A = -v_B
    j = np.array([[0.3, -0.1, 0.7]])
    J = np.vstack([j, j])
    b = 10.0
    v = np.array([2.0 / b, -2.0 / b])
    assert np.abs(damped_pinv_solve(J, v, 1e-3, np.ones(2), np.ones(3, dtype=bool))).max() < 1e-10


def test_torque_clamp(terms):
    settings = ControllerSettings(torque_limits=np.full(6, 1.0))
    out, _ = control_step(
        terms, POSTURE, np.zeros(8), _zero_wrench(), ImpedanceParams(), PDGains(), _rest_state(terms),
        settings, 1e-3, 1e-3,
    )
    assert np.all(np.abs(out.tau[:6]) <= 1.0)
    assert "torque_clamp" in out.events
    assert out.clamped[:6].any()


def test_anti_windup_limits_position_error(terms):
    adm = _rest_state(terms)
    gains = PDGains(kp=100.0, kv=1.0)
    far = POSTURE.copy()
    far[2] += 1.0  # measured posture far from the hold set-point
    out, _ = control_step(
        terms, far, np.zeros(8), _zero_wrench(), ImpedanceParams(), gains, adm,
        ControllerSettings(windup_limit=0.1, torque_limits=np.full(6, 1e6)), 1e-3, 1e-3,
    )
    assert out.tau[2] - terms.g[2] == pytest.approx(-100.0 * 0.1)


def test_control_timestamp_regression(terms):
    adm = _rest_state(terms)
    args = (terms, POSTURE, np.zeros(8), _zero_wrench(), ImpedanceParams(), PDGains())
    _, adm = control_step(*args, adm, ControllerSettings(), 1e-3, 0.01)
    with pytest.raises(TimestampError):
        control_step(*args, adm, ControllerSettings(), 1e-3, 0.005)


def test_assist_mode_tracks_reference(terms):
    class Ref:
        q_des = POSTURE + 0.01
        qd_des = np.full(8, 0.2)

    settings = ControllerSettings(mode="assist")
    out, _ = control_step(
        terms, POSTURE, np.zeros(8), _zero_wrench(), ImpedanceParams(), PDGains(), _rest_state(terms),
        settings, 1e-3, 1e-3, reference=Ref,
    )
    assert np.allclose(out.q_des[:6], Ref.q_des[:6])
    assert np.allclose(out.qd_des[:6], 0.2)


def test_held_wrist_keeps_hand_orientation(terms):
    P = passive_map(terms)
    Jw = terms.J_B[3:]
    rng = np.random.default_rng(1)
    for _ in range(5):
        qa = rng.normal(size=6)
        w_rigid = Jw[:, :6] @ qa
        w_held = w_rigid + Jw[:, 6:] @ (P @ qa)
        assert np.linalg.norm(w_held) <= np.linalg.norm(w_rigid)
        # least-squares optimality: residual orthogonal to the wrist columns
        assert np.abs(Jw[:, 6:].T @ w_held).max() < 1e-5 * np.linalg.norm(qa)


@pytest.mark.parametrize("model", ["held", "rigid", "measured"])
def test_resolve_rates_realises_cuff_velocity(terms, model):
    v = np.r_[0.02, -0.01, 0.03, 0.0, 0.0, 0.0, np.zeros(6)]
    settings = ControllerSettings(weights_A=np.r_[1.0, 1, 1, 0, 0, 0], weights_B=np.zeros(6), passive_model=model)
    qd = resolve_rates(terms, v, np.zeros(8), settings)
    assert np.allclose(terms.J_A[:3] @ qd, v[:3], atol=1e-4)


# -- impedance estimation -------------------------------------------------

def _msd_log(m, b, k, f_hz=1.0, amp=2.0, dt=1e-3, periods=8):
    w = 2 * math.pi * f_hz
    t = np.arange(0, periods / f_hz, dt)
    Z = (k - m * w**2) + 1j * b * w
    x_amp = amp / Z
    force = amp * np.sin(w * t)
    x = np.imag(x_amp * np.exp(1j * w * t))
    v = np.imag(1j * w * x_amp * np.exp(1j * w * t))
    return t, force, x, v, abs(Z), w


@pytest.mark.parametrize("m, b, k", [(1.0, 10.0, 100.0), (2.0, 3.0, 0.0), (0.5, 20.0, 400.0)])
def test_estimator_recovers_analytic_impedance(m, b, k):
    t, force, x, v, zmag, w = _msd_log(m, b, k)
    est = estimate_rendered_impedance(t, force, x, 1.0)
    assert abs(est.magnitude - zmag) / zmag < 1e-3
    assert abs(est.magnitude - math.sqrt((k - m * w**2) ** 2 + (b * w) ** 2)) / zmag < 1e-3
    est_v = estimate_rendered_impedance(t, force, v, 1.0, kind="velocity")
    assert abs(est_v.magnitude - zmag / w) / (zmag / w) < 1e-3


def test_pure_stiffness_has_zero_phase():
    t, force, x, _, _, _ = _msd_log(0.0, 0.0, 200.0, f_hz=0.01, dt=0.1)
    est = estimate_rendered_impedance(t, force, x, 0.01)
    assert abs(est.phase) < 1e-9
    assert est.magnitude == pytest.approx(200.0, rel=1e-9)


def test_estimates_follow_commanded_order():
    soft = estimate_rendered_impedance(*_msd_log(1.0, 5.0, 50.0)[:3], 1.0).magnitude
    stiff = estimate_rendered_impedance(*_msd_log(1.0, 5.0, 500.0)[:3], 1.0).magnitude
    assert soft < stiff


def test_immeasurable_response():
    t, force, _, _, _, _ = _msd_log(1.0, 10.0, 100.0)
    with pytest.raises(ImmeasurableError):
        estimate_rendered_impedance(t, force, np.zeros_like(t), 1.0)


def test_estimator_needs_enough_periods():
    t, force, x, _, _, _ = _msd_log(1.0, 10.0, 100.0, periods=4)
    with pytest.raises(ValueError, match="periods"):
        estimate_rendered_impedance(t, force, x, 1.0)

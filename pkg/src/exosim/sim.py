"""Fixed-step closed-loop simulation with sensor and control rate groups.

The executive is single-threaded and deterministic.  Every sensor tick
senses the port wrenches and advances the plant by one semi-implicit Euler
step; every ``ratio``-th sensor tick the controller runs first on the wrench
snapshot of that same tick, so the snapshot is never stale.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .controller import (
    PORTS,
    ControllerSettings,
    ImpedanceParams,
    PDGains,
    control_step,
    estimate_rendered_impedance,
    init_admittance,
    resolve_equilibria,
)
from .dynamics import (
    DEFAULT_DAMPING,
    GRAVITY,
    LinkInertia,
    Plant,
    PlantTerms,
    default_inertias,
    generalized_force,
    potential_energy,
)
from ._kernel import advance, spring_damper_wrench
from .kinematics import ACTIVE, N_JOINTS, DHChain, JointLimits, PortId, build_chain
from .reference import IKSettings, RhythmModel, generate_trajectory

log = logging.getLogger(__name__)


class SimulationDiverged(RuntimeError):
    def __init__(self, tick: int, reason: str):
        super().__init__(f"simulation diverged at sensor tick {tick}: {reason}")
        self.tick = tick


@dataclass(frozen=True)
class RateConfig:
    """Sensor and control rates.  ``scale`` divides both for desk-scale runs."""

    sensor_rate: float = 50_000.0
    control_rate: float = 10_000.0
    scale: float = 10.0

    def __post_init__(self):
        if not (self.sensor_rate > 0 and self.control_rate > 0 and self.scale > 0):
            raise ValueError("rates and scale must be positive")
        r = self.sensor_rate / self.control_rate
        if abs(r - round(r)) > 1e-9 or round(r) < 1:
            raise ValueError(
                f"sensor rate {self.sensor_rate:g} Hz is not an integer multiple of control rate {self.control_rate:g} Hz"
            )

    @property
    def ratio(self) -> int:
        return int(round(self.sensor_rate / self.control_rate))

    @property
    def sensor_hz(self) -> float:
        return self.sensor_rate / self.scale

    @property
    def control_hz(self) -> float:
        return self.control_rate / self.scale

    @property
    def dt_sensor(self) -> float:
        return self.scale / self.sensor_rate

    @property
    def dt_control(self) -> float:
        return self.dt_sensor * self.ratio


@dataclass(frozen=True)
class Probe:
    """Sinusoidal (or constant, when ``frequency_hz == 0``) wrench injection at one port."""

    port: PortId = PortId.B
    axis: int = 0  # 0..5 over [fx, fy, fz, tx, ty, tz]
    amplitude: float = 2.0
    frequency_hz: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "port", PortId(self.port))
        if not 0 <= self.axis < 6:
            raise ValueError(f"probe axis must be 0..5, got {self.axis}")
        if self.frequency_hz < 0:
            raise ValueError("probe frequency must be non-negative")

    def wrench(self, t: float) -> np.ndarray:
        w = np.zeros(6)
        s = 1.0 if self.frequency_hz == 0 else math.sin(2 * math.pi * self.frequency_hz * t)
        w[self.axis] = self.amplitude * s
        return w


@dataclass(frozen=True)
class PortHuman:
    """Spring-damper coupling of the human limb to one port.

    The intent is the port pose at start plus a piecewise-linear position
    offset given as ``(t, dx, dy, dz)`` knots; orientation intent is the
    starting orientation.
    """

    stiffness: float = 0.0
    damping: float = 0.0
    rot_stiffness: float = 0.0
    rot_damping: float = 0.0
    intent: tuple = ()

    def __post_init__(self):
        for name in ("stiffness", "damping", "rot_stiffness", "rot_damping"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"human {name} must be non-negative")
        knots = tuple(tuple(float(v) for v in k) for k in self.intent)
        if any(len(k) != 4 for k in knots):
            raise ValueError("intent knots are (t, dx, dy, dz)")
        if any(b[0] <= a[0] for a, b in zip(knots, knots[1:])):
            raise ValueError("intent knot times must increase")
        object.__setattr__(self, "intent", knots)

    def offset(self, t: float):
        """Intent position offset and its rate at time ``t``."""
        if not self.intent:
            return np.zeros(3), np.zeros(3)
        k = np.array(self.intent)
        if t <= k[0, 0]:
            return k[0, 1:].copy(), np.zeros(3)
        if t >= k[-1, 0]:
            return k[-1, 1:].copy(), np.zeros(3)
        i = int(np.searchsorted(k[:, 0], t, side="right")) - 1
        t0, t1 = k[i, 0], k[i + 1, 0]
        rate = (k[i + 1, 1:] - k[i, 1:]) / (t1 - t0)
        return k[i, 1:] + (t - t0) * rate, rate

    @property
    def passive(self) -> bool:
        return not (self.stiffness or self.damping or self.rot_stiffness or self.rot_damping)


@dataclass(frozen=True)
class HumanArmModel:
    A: PortHuman = field(default_factory=PortHuman)
    B: PortHuman = field(default_factory=PortHuman)
    probe: Probe | None = None
    noise_std: tuple = (0.0, 0.0)  # force N, torque N m
    quantization: tuple = (0.0, 0.0)  # sensor resolution, 0 = off

    def __getitem__(self, port) -> PortHuman:
        return getattr(self, PortId(port).value)


def sense_wrench(terms: PlantTerms, qd, human: HumanArmModel, anchors: dict, t: float, rng=None) -> dict:
    """Wrench the human applies at each port, as the F/T sensors read it.

    ``anchors`` maps each port to its 4x4 pose at start; the spring term
    pulls toward ``anchor + intent offset``.  Noise needs ``rng``.
    """
    qd = np.asarray(qd, dtype=float)
    out = {}
    for port, T, J in ((PortId.A, terms.T_A, terms.J_A), (PortId.B, terms.T_B, terms.J_B)):
        h = human[port]
        w = np.zeros(6)
        if not h.passive:
            off, rate = h.offset(t)
            target = anchors[port][:3, 3] + off
            w = spring_damper_wrench(
                T, J, qd, anchors[port], target, rate, h.stiffness, h.damping, h.rot_stiffness, h.rot_damping
            )
        if human.probe is not None and human.probe.port is port:
            w += human.probe.wrench(t)
        fs, ts = human.noise_std
        if (fs or ts) and rng is not None:
            w[:3] += rng.normal(0.0, fs, 3) if fs else 0.0
            w[3:] += rng.normal(0.0, ts, 3) if ts else 0.0
        fq, tq = human.quantization
        if fq:
            w[:3] = np.round(w[:3] / fq) * fq
        if tq:
            w[3:] = np.round(w[3:] / tq) * tq
        out[port] = w
    return out


def settle_passive(chain: DHChain, inertias: LinkInertia, q, gravity=GRAVITY, tol: float = 1e-12) -> np.ndarray:
    """``q`` with the passive wrist moved to its gravity rest pose within limits.

    The rest pose minimises potential energy over the passive joints; the
    gradient is the passive part of the gravity load.
    """
    q = np.array(q, dtype=float)
    plant = Plant(chain, inertias, gravity)
    lo, hi = chain.limits.lower[~ACTIVE], chain.limits.upper[~ACTIVE]

    def energy(x):
        qq = q.copy()
        qq[~ACTIVE] = x
        t = plant.terms(qq)
        return t.U, t.g[~ACTIVE]

    res = minimize(
        energy,
        np.clip(q[~ACTIVE], lo, hi),
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(lo, hi)),
        options={"ftol": 0.0, "gtol": tol, "maxiter": 500},
    )
    q[~ACTIVE] = res.x
    return q


@dataclass
class PlantState:
    q: np.ndarray
    qd: np.ndarray
    tick: int = 0


def step_plant(
    plant: Plant,
    state: PlantState,
    tau,
    wrenches,
    dt: float,
    damping=DEFAULT_DAMPING,
    limits: JointLimits | None = None,
    terms: PlantTerms | None = None,
    bound: float = 1e3,
    free=None,
):
    """One semi-implicit Euler step.  Returns ``(state', qdd, limit_mask)``.

    Joints pushed past a limit are clamped onto it and their outward
    velocity is zeroed; the bitmask marks them (bit ``i`` = joint ``i + 1``).
    ``free`` optionally locks every joint outside the mask (reduced dynamics).
    """
    if terms is None:
        terms = plant.terms(state.q, state.qd)
    f_ext = generalized_force(terms, wrenches)
    d = np.zeros(N_JOINTS) if damping is None else np.asarray(damping, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if free is None:
        q, qd, qdd = advance(terms.M, terms.bias, terms.g, tau, f_ext, d, state.q, state.qd, dt)
    else:
        free = np.asarray(free, dtype=bool)
        rhs = tau + f_ext - terms.bias - terms.g - d * state.qd
        qdd = np.zeros(N_JOINTS)
        qdd[free] = np.linalg.solve(terms.M[np.ix_(free, free)], rhs[free])
        qd = np.where(free, state.qd + dt * qdd, 0.0)
        q = state.q + dt * qd
    mask = 0
    if limits is not None:
        lo = q < limits.lower
        hi = q > limits.upper
        if lo.any() or hi.any():
            q = np.clip(q, limits.lower, limits.upper)
            qd = np.where((lo & (qd < 0)) | (hi & (qd > 0)), 0.0, qd)
            for i in np.flatnonzero(lo | hi):
                mask |= 1 << int(i)
    # NaN fails the comparison as well
    if not max(np.abs(q).max(), np.abs(qd).max()) <= bound:
        reason = "non-finite state" if not np.all(np.isfinite(np.r_[q, qd])) else f"state magnitude beyond {bound:g}"
        raise SimulationDiverged(state.tick, reason)
    return PlantState(q, qd, state.tick + 1), qdd, mask


def free_motion_energy_audit(chain: DHChain, inertias: LinkInertia, q0, qd0, dt: float = 2e-5, duration: float = 1.0,
                             gravity=GRAVITY) -> dict:
    """Integrate unforced, undamped motion and report the worst energy error.

    Energy is evaluated with the velocity centred on the step,
    ``qd + dt/2 qdd``, which removes the half-step phase lag of the
    semi-implicit scheme; the error is normalised by the peak kinetic
    energy along the run.
    """
    chain = replace(chain, limits=JointLimits.unbounded())
    plant = Plant(chain, inertias, gravity)
    state = PlantState(np.array(q0, dtype=float), np.array(qd0, dtype=float))
    zero = np.zeros(N_JOINTS)
    n = int(round(duration / dt))
    energies = np.empty(n + 1)
    kinetic = np.empty(n + 1)
    for k in range(n + 1):
        terms = plant.terms(state.q, state.qd)
        new_state, qdd, _ = step_plant(plant, state, zero, None, dt, None, None, terms)
        vc = state.qd + 0.5 * dt * qdd
        kinetic[k] = 0.5 * vc @ terms.M @ vc
        energies[k] = kinetic[k] + potential_energy(chain, inertias, state.q, gravity)
        state = new_state
    scale = max(kinetic.max(), 1e-12)
    return {
        "steps": n,
        "energy_drift_rel": float(np.abs(energies - energies[0]).max() / scale),
        "peak_kinetic": float(kinetic.max()),
    }


@dataclass
class Scenario:
    """Everything a closed-loop run needs, already validated."""

    chain: DHChain = field(default_factory=build_chain)
    inertias: LinkInertia | None = None
    joint_damping: np.ndarray = field(default_factory=lambda: DEFAULT_DAMPING.copy())
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    rates: RateConfig = field(default_factory=RateConfig)
    impedance: ImpedanceParams = field(default_factory=ImpedanceParams)
    gains: PDGains = field(default_factory=PDGains)
    controller: ControllerSettings = field(default_factory=ControllerSettings)
    human: HumanArmModel = field(default_factory=HumanArmModel)
    q0: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    qd0: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    duration: float = 1.0
    segments: tuple = ()  # ((x_goal, T), ...)
    rhythm: RhythmModel = field(default_factory=RhythmModel)
    ik: IKSettings = field(default_factory=IKSettings)
    snapshot: str = "latest"  # or "mean" over the control period
    seed: int = 0
    state_bound: float = 1e3

    def __post_init__(self):
        if self.inertias is None:
            self.inertias = default_inertias(self.chain)
        if self.snapshot not in ("latest", "mean"):
            raise ValueError(f"unknown wrench snapshot policy {self.snapshot!r}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")


LOG_COLUMNS = (
    ["t"]
    + [f"q{i + 1}" for i in range(N_JOINTS)]
    + [f"qd{i + 1}" for i in range(N_JOINTS)]
    + [f"tau{i + 1}" for i in range(N_JOINTS)]
    + [f"w{p}_{c}" for p in "AB" for c in ("fx", "fy", "fz", "tx", "ty", "tz")]
    + [f"vdes{p}_{c}" for p in "AB" for c in ("vx", "vy", "vz", "wx", "wy", "wz")]
    + [f"qdes{i + 1}" for i in range(N_JOINTS)]
    + ["clamp_mask", "limit_mask"]
)


@dataclass(frozen=True)
class LogRecord:
    t: float
    q: np.ndarray
    qd: np.ndarray
    tau: np.ndarray
    wrench_A: np.ndarray
    wrench_B: np.ndarray
    v_des_A: np.ndarray
    v_des_B: np.ndarray
    q_des: np.ndarray
    clamp_mask: int
    limit_mask: int

    def row(self) -> list[str]:
        floats = np.concatenate(
            [[self.t], self.q, self.qd, self.tau, self.wrench_A, self.wrench_B, self.v_des_A, self.v_des_B, self.q_des]
        )
        return [repr(float(v)) for v in floats] + [str(self.clamp_mask), str(self.limit_mask)]


def write_log_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(log_csv_text(records))


def log_csv_text(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


@dataclass
class ScenarioResult:
    records: list
    metrics: dict
    port_twist: dict  # per control tick, for impedance estimation
    error: Exception | None = None


def build_reference(sc: Scenario, dt: float):
    """Chain the configured reach segments into one sample list (``None`` if none)."""
    if not sc.segments:
        return None
    samples = []
    q = sc.q0
    t0 = 0.0
    for x_goal, T in sc.segments:
        seg = generate_trajectory(sc.chain, sc.rhythm, q, x_goal, T, dt, t0, sc.ik)
        samples.extend(seg if not samples else seg[1:])
        q = seg[-1].q_des
        t0 += T
    return samples


def commanded_magnitude(imp: ImpedanceParams, probe: Probe) -> float:
    """|B + K/(jw) + jwM| on the probed axis, in N s/m (or N m s/rad)."""
    p = imp[probe.port]
    a = probe.axis
    w = 2 * math.pi * probe.frequency_hz
    if w == 0:
        return float("inf") if p.stiffness[a, a] else float(p.damping[a, a])
    return abs(complex(p.damping[a, a], w * p.mass[a, a] - p.stiffness[a, a] / w))


def run_scenario(scenario) -> ScenarioResult:
    """Execute the closed loop.  Errors are attached to the result, not raised,
    so the partial log survives; callers decide the exit status.
    """
    sc = scenario.build() if hasattr(scenario, "build") else scenario
    rates = sc.rates
    dt_s, dt_c, ratio = rates.dt_sensor, rates.dt_control, rates.ratio
    n_control = int(round(sc.duration / dt_c))
    n_sensor = n_control * ratio
    plant = Plant(sc.chain, sc.inertias, sc.gravity)
    rng = np.random.default_rng(sc.seed)

    state = PlantState(np.array(sc.q0, dtype=float), np.array(sc.qd0, dtype=float))
    terms = plant.terms(state.q, state.qd)
    anchors = {PortId.A: terms.T_A.copy(), PortId.B: terms.T_B.copy()}
    adm = init_admittance(terms, state.q)
    imp = resolve_equilibria(sc.impedance, adm)

    records = []
    twist = {p: [] for p in PORTS}
    err_sq = 0.0
    clamp_count = 0
    limit_events = 0
    control_ticks = 0
    tau = np.zeros(N_JOINTS)
    window = []
    limit_mask = 0
    work = 0.0
    vc_prev = f_prev = None
    energy0 = None
    energy_err = 0.0
    energy_scale = 1e-6  # J; floor so a resting run does not divide by ~0
    error = None
    reference = None

    try:
        reference = build_reference(sc, dt_c)
        for k in range(n_sensor):
            t = k * dt_s
            if k:
                terms = plant.terms(state.q, state.qd)
            wrench = sense_wrench(terms, state.qd, sc.human, anchors, t, rng)
            if sc.snapshot == "mean":
                window.append(wrench)
                window = window[-ratio:]
            if k % ratio == 0:
                if sc.snapshot == "mean":
                    snap = {p: np.mean([w[p] for w in window], axis=0) for p in PORTS}
                else:
                    snap = wrench
                ref = None
                if reference is not None:
                    ref = reference[min(control_ticks, len(reference) - 1)]
                out, adm = control_step(
                    terms, state.q, state.qd, snap, imp, sc.gains, adm, sc.controller, dt_c, t, ref
                )
                tau = out.tau
                cmask = int(sum(1 << i for i in np.flatnonzero(out.clamped)))
                clamp_count += bool(cmask)
                e = out.q_des[:6] - state.q[:6]
                err_sq += float(e @ e)
                records.append(
                    LogRecord(
                        t, state.q.copy(), state.qd.copy(), tau.copy(), snap[PortId.A].copy(), snap[PortId.B].copy(),
                        out.v_des[PortId.A], out.v_des[PortId.B], out.q_des.copy(), cmask, limit_mask,
                    )
                )
                limit_mask = 0
                twist[PortId.A].append(terms.J_A @ state.qd)
                twist[PortId.B].append(terms.J_B @ state.qd)
                control_ticks += 1
            f_ext = generalized_force(terms, wrench)
            new_state, qdd, mask = step_plant(
                plant, state, tau + f_ext, None, dt_s, sc.joint_damping, sc.chain.limits, terms, sc.state_bound
            )
            # work-energy bookkeeping: trapezoid over step-centred velocities,
            # which matches the semi-implicit scheme to second order
            vc = state.qd + 0.5 * dt_s * qdd
            f_nc = tau + f_ext - sc.joint_damping * state.qd
            if vc_prev is not None:
                work += 0.25 * dt_s * float((vc_prev + vc) @ (f_prev + f_nc))
            vc_prev, f_prev = vc, f_nc
            if k % ratio == 0:
                kin = 0.5 * vc @ terms.M @ vc
                energy = kin + terms.U
                if energy0 is None:
                    energy0, u0 = energy, terms.U
                energy_err = max(energy_err, abs(energy - energy0 - work))
                energy_scale = max(energy_scale, kin, abs(work), abs(terms.U - u0))
            if mask:
                limit_mask |= mask
                limit_events += 1
                log.debug("joint limit at t=%.6f mask=%d", t, mask)
            state = new_state
    except Exception as exc:  # partial log is kept; status decided by the caller
        error = exc
        log.error("%s", exc)

    metrics = {
        "ticks": {"sensor": state.tick, "control": control_ticks, "ratio": ratio},
        "rmse_rad": math.sqrt(err_sq / max(1, 6 * control_ticks)),
        "energy_drift_rel": float(energy_err / energy_scale) if energy0 is not None else 0.0,
        "clamp_count": clamp_count,
        "limit_events": limit_events,
        "max_drift_rad": float(np.abs(state.q - np.asarray(sc.q0)).max()),
        "impedance_estimates": [],
    }
    probe = sc.human.probe
    if probe is not None and error is None:
        t_log = np.array([r.t for r in records])
        port = probe.port
        force = np.array([(r.wrench_A if port is PortId.A else r.wrench_B)[probe.axis] for r in records])
        vel = np.array(twist[port])[:, probe.axis]
        try:
            est = estimate_rendered_impedance(t_log, force, vel, probe.frequency_hz, kind="velocity")
            metrics["impedance_estimates"].append(
                {
                    "port": port.value,
                    "axis": probe.axis,
                    "frequency_hz": probe.frequency_hz,
                    "magnitude": est.magnitude,
                    "phase": est.phase,
                    "commanded_magnitude": commanded_magnitude(imp, probe),
                }
            )
        except ValueError as exc:
            error = exc
    return ScenarioResult(records, metrics, {p: np.array(v) for p, v in twist.items()}, error)


def render_impedance(base: Scenario, settings: dict) -> list[dict]:
    """Run the probe scenario once per commanded impedance setting.

    ``settings`` maps a series name to an ``ImpedanceParams``.  Raises the
    first run error (an immeasurable response included).
    """
    if base.human.probe is None:
        raise ValueError("impedance rendering needs a probe")
    report = []
    for name, imp in settings.items():
        res = run_scenario(replace(base, impedance=imp))
        if res.error is not None:
            raise res.error
        est = res.metrics["impedance_estimates"][0]
        report.append({"name": name, **est})
    return report

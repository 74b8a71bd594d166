"""Scenario files: strict JSON schema, defaults and conversion to runtime objects.

Unknown keys are rejected everywhere.  Validation errors carry the dotted
key path of the offending entry (``impedance.B.mass``).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import controller as ctl
from .dynamics import BODY_MASS, DEFAULT_DAMPING, DEFAULT_LINK_RADIUS, GRAVITY, LinkInertia, default_inertias
from .kinematics import DEFAULT_LOWER, DEFAULT_UPPER, JOINT_NAMES, BodyParams, JointLimits, ParameterError, build_chain
from .reference import IKSettings, RhythmModel, apply_rhythm
from .sim import HumanArmModel, PortHuman, Probe, RateConfig, Scenario, settle_passive

DEFAULT_POSTURE = [0.0, 0.0, 0.3, 0.1, 0.0, 0.55, 0.0, 0.0]
AXES = {"fx": 0, "fy": 1, "fz": 2, "tx": 3, "ty": 4, "tz": 5, "x": 0, "y": 1, "z": 2}


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


def _vec(n: int):
    def check(v):
        if v is None:
            return v
        if len(v) != n:
            raise ValueError(f"expected {n} values, got {len(v)}")
        return v

    return check


class BodyConfig(_Strict):
    p1: float = 0.30
    p2: float = 0.20
    p3: float = 0.10
    p4: float = 0.28
    p5: float = 0.25
    p6: float = 0.08
    side: Literal["left", "right"] = "right"
    beta: float = 0.5

    @model_validator(mode="after")
    def _check(self):
        BodyParams(**self.model_dump())
        return self


class InertiaConfig(_Strict):
    """Either a body mass spread over the links, or a full table."""

    body_mass: float = BODY_MASS
    link_radius: float = DEFAULT_LINK_RADIUS
    mass: Optional[list[float]] = None
    com: Optional[list[list[float]]] = None
    inertia: Optional[list[list[list[float]]]] = None

    @field_validator("body_mass", "link_radius")
    @classmethod
    def _positive(cls, v):
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @model_validator(mode="after")
    def _table(self):
        given = [x is not None for x in (self.mass, self.com, self.inertia)]
        if any(given) and not all(given):
            raise ValueError("mass, com and inertia must be given together")
        if all(given):
            LinkInertia(np.array(self.mass), np.array(self.com), np.array(self.inertia))
        return self


class LimitsConfig(_Strict):
    lower: list[float] = Field(default_factory=lambda: DEFAULT_LOWER.tolist())
    upper: list[float] = Field(default_factory=lambda: DEFAULT_UPPER.tolist())

    _n = field_validator("lower", "upper")(_vec(8))

    @model_validator(mode="after")
    def _order(self):
        JointLimits(np.array(self.lower), np.array(self.upper))
        return self


class RatesConfig(_Strict):
    sensor_rate: float = 50_000.0
    control_rate: float = 10_000.0
    scale: float = 10.0

    @model_validator(mode="after")
    def _check(self):
        RateConfig(**self.model_dump())
        return self


Matrixish = Union[list[float], list[list[float]]]


def _expand(v, name):
    a = np.asarray(v, dtype=float)
    if a.shape == (2,):
        return np.array([a[0]] * 3 + [a[1]] * 3)
    if a.shape in ((6,), (6, 6)):
        return a
    raise ValueError(f"{name}: give [translational, rotational], 6 diagonal values or a 6x6 matrix")


class PortImpedanceConfig(_Strict):
    mass: Matrixish = [2.0, 0.05]
    damping: Matrixish = [20.0, 1.0]
    stiffness: Matrixish = [0.0, 0.0]
    x0: Optional[list[float]] = None

    _x0 = field_validator("x0")(_vec(6))

    @field_validator("mass", "damping", "stiffness")
    @classmethod
    def _shape(cls, v, info):
        _expand(v, info.field_name)
        return v

    @model_validator(mode="after")
    def _invariants(self):
        self.build()
        return self

    def build(self) -> ctl.PortImpedance:
        return ctl.PortImpedance(
            _expand(self.mass, "mass"),
            _expand(self.damping, "damping"),
            _expand(self.stiffness, "stiffness"),
            None if self.x0 is None else np.array(self.x0),
        )


class ImpedanceConfig(_Strict):
    A: PortImpedanceConfig = Field(default_factory=PortImpedanceConfig)
    B: PortImpedanceConfig = Field(default_factory=PortImpedanceConfig)

    def build(self) -> ctl.ImpedanceParams:
        return ctl.ImpedanceParams(self.A.build(), self.B.build())


class GainsConfig(_Strict):
    kp: Union[float, list[float]] = 50.0
    kv: Union[float, list[float]] = 5.0

    @field_validator("kp", "kv")
    @classmethod
    def _six(cls, v):
        if isinstance(v, list) and len(v) != 6:
            raise ValueError(f"expected one gain or 6 per-joint gains, got {len(v)}")
        return v

    @model_validator(mode="after")
    def _check(self):
        self.build()
        return self

    def build(self) -> ctl.PDGains:
        return ctl.PDGains(np.asarray(self.kp, dtype=float), np.asarray(self.kv, dtype=float))


class ControllerConfig(_Strict):
    mode: Literal["admittance", "assist"] = "admittance"
    damping: float = 1e-3
    weights_A: Union[float, list[float]] = 0.5
    weights_B: Union[float, list[float]] = 1.0
    torque_limits: list[float] = [40.0, 200.0, 40.0, 40.0, 40.0, 40.0]
    windup_limit: float = 0.1
    passive_model: Literal["held", "rigid", "measured"] = "held"

    _tl = field_validator("torque_limits")(_vec(6))

    @field_validator("weights_A", "weights_B")
    @classmethod
    def _weights(cls, v):
        arr = np.asarray(v, dtype=float) * np.ones(6)
        if isinstance(v, list) and len(v) != 6:
            raise ValueError(f"expected one weight or 6 row weights, got {len(v)}")
        if np.any(arr < 0):
            raise ValueError("row weights must be non-negative")
        return v

    @field_validator("torque_limits")
    @classmethod
    def _limits(cls, v):
        if any(not x > 0 for x in v):
            raise ValueError("torque limits must be positive")
        return v

    @model_validator(mode="after")
    def _check(self):
        self.build()
        return self

    def build(self) -> ctl.ControllerSettings:
        return ctl.ControllerSettings(
            mode=self.mode,
            damping=self.damping,
            weights_A=np.asarray(self.weights_A, dtype=float) * np.ones(6),
            weights_B=np.asarray(self.weights_B, dtype=float) * np.ones(6),
            torque_limits=np.array(self.torque_limits),
            windup_limit=self.windup_limit,
            passive_model=self.passive_model,
        )


class PortHumanConfig(_Strict):
    stiffness: float = 0.0
    damping: float = 0.0
    rot_stiffness: float = 0.0
    rot_damping: float = 0.0
    intent: list[list[float]] = []

    @model_validator(mode="after")
    def _check(self):
        self.build()
        return self

    def build(self) -> PortHuman:
        return PortHuman(self.stiffness, self.damping, self.rot_stiffness, self.rot_damping, tuple(map(tuple, self.intent)))


class HumanConfig(_Strict):
    A: PortHumanConfig = Field(default_factory=PortHumanConfig)
    B: PortHumanConfig = Field(default_factory=PortHumanConfig)
    noise_std: list[float] = [0.0, 0.0]
    quantization: list[float] = [0.0, 0.0]

    _n = field_validator("noise_std", "quantization")(_vec(2))

    @field_validator("noise_std", "quantization")
    @classmethod
    def _nonneg(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("must be non-negative")
        return v


class ProbeConfig(_Strict):
    port: Literal["A", "B"] = "B"
    axis: Union[Literal["x", "y", "z", "fx", "fy", "fz", "tx", "ty", "tz"], int] = "x"
    amplitude: float = 2.0
    frequency_hz: float = 0.5

    @field_validator("axis")
    @classmethod
    def _axis(cls, v):
        if isinstance(v, int) and not 0 <= v < 6:
            raise ValueError("axis index must be 0..5")
        return v

    @field_validator("frequency_hz")
    @classmethod
    def _freq(cls, v):
        if v < 0:
            raise ValueError("must be non-negative")
        return v

    def build(self) -> Probe:
        axis = self.axis if isinstance(self.axis, int) else AXES[self.axis]
        return Probe(self.port, axis, self.amplitude, self.frequency_hz)


class InitialConfig(_Strict):
    q: list[float] = Field(default_factory=lambda: list(DEFAULT_POSTURE))
    qd: list[float] = Field(default_factory=lambda: [0.0] * 8)
    apply_rhythm: bool = True  # overwrite the girdle joints from the rhythm
    settle_wrist: bool = True  # start the passive wrist at its gravity rest pose

    _n = field_validator("q", "qd")(_vec(8))


class SegmentConfig(_Strict):
    x_goal: list[float]
    T: float

    _n = field_validator("x_goal")(_vec(3))

    @field_validator("T")
    @classmethod
    def _pos(cls, v):
        if not v > 0:
            raise ValueError("must be positive")
        return v


class RhythmConfig(_Strict):
    r1: float = 0.15
    r2: float = 0.02


class IKConfig(_Strict):
    damping: float = 1e-2
    step: float = 0.5
    tol: float = 1e-5
    max_iter: int = 200


class ReferenceConfig(_Strict):
    segments: list[SegmentConfig] = []
    rhythm: RhythmConfig = Field(default_factory=RhythmConfig)
    ik: IKConfig = Field(default_factory=IKConfig)


class RenderSetting(_Strict):
    name: str
    B: PortImpedanceConfig


class RenderConfig(_Strict):
    settings: list[RenderSetting] = []
    frequencies_hz: list[float] = []  # empty: the probe frequency only

    @field_validator("frequencies_hz")
    @classmethod
    def _pos(cls, v):
        if any(not f > 0 for f in v):
            raise ValueError("sweep frequencies must be positive")
        return v


class OutputConfig(_Strict):
    log: Optional[str] = None
    metrics: Optional[str] = None
    reference: Optional[str] = None
    render_csv: Optional[str] = None
    render_report: Optional[str] = None


class ScenarioConfig(_Strict):
    body: BodyConfig = Field(default_factory=BodyConfig)
    inertias: InertiaConfig = Field(default_factory=InertiaConfig)
    joint_damping: list[float] = Field(default_factory=lambda: DEFAULT_DAMPING.tolist())
    gravity: list[float] = Field(default_factory=lambda: GRAVITY.tolist())
    limits: LimitsConfig = Field(default_factory=LimitsConfig)
    rates: RatesConfig = Field(default_factory=RatesConfig)
    impedance: ImpedanceConfig = Field(default_factory=ImpedanceConfig)
    gains: GainsConfig = Field(default_factory=GainsConfig)
    controller: ControllerConfig = Field(default_factory=ControllerConfig)
    human: HumanConfig = Field(default_factory=HumanConfig)
    probe: Optional[ProbeConfig] = None
    initial: InitialConfig = Field(default_factory=InitialConfig)
    duration: float = 1.0
    reference: ReferenceConfig = Field(default_factory=ReferenceConfig)
    snapshot: Literal["latest", "mean"] = "latest"
    seed: int = 0
    render: RenderConfig = Field(default_factory=RenderConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    _jd = field_validator("joint_damping")(_vec(8))
    _g = field_validator("gravity")(_vec(3))

    @field_validator("joint_damping")
    @classmethod
    def _nonneg(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("joint friction must be non-negative")
        return v

    @field_validator("duration")
    @classmethod
    def _dur(cls, v):
        if not v > 0:
            raise ValueError("must be positive")
        return v

    def chain(self):
        return build_chain(BodyParams(**self.body.model_dump()), JointLimits(np.array(self.limits.lower), np.array(self.limits.upper)))

    def link_inertias(self, chain=None) -> LinkInertia:
        chain = chain or self.chain()
        c = self.inertias
        if c.mass is not None:
            return LinkInertia(np.array(c.mass), np.array(c.com), np.array(c.inertia))
        return default_inertias(chain, c.body_mass, c.link_radius)

    def rhythm(self) -> RhythmModel:
        return RhythmModel(self.reference.rhythm.r1, self.reference.rhythm.r2)

    def initial_state(self, chain=None, inertias=None):
        chain = chain or self.chain()
        inertias = inertias or self.link_inertias(chain)
        q = np.array(self.initial.q)
        if self.initial.apply_rhythm:
            q = apply_rhythm(chain, self.rhythm(), q)
        if self.initial.settle_wrist:
            q = settle_passive(chain, inertias, q, np.array(self.gravity))
        bad = chain.limits.violations(q, 1e-12)
        if bad:
            i = bad[0]
            raise ConfigError(f"joint {i + 1} ({JOINT_NAMES[i]}) starts outside its limits", "initial.q")
        return q, np.array(self.initial.qd)

    def build(self) -> Scenario:
        """Runtime scenario; raises ``ConfigError`` for cross-field problems."""
        chain = self.chain()
        inertias = self.link_inertias(chain)
        q0, qd0 = self.initial_state(chain, inertias)
        human = HumanArmModel(
            self.human.A.build(),
            self.human.B.build(),
            self.probe.build() if self.probe else None,
            tuple(self.human.noise_std),
            tuple(self.human.quantization),
        )
        if self.controller.mode == "assist" and not self.reference.segments:
            raise ConfigError("assist mode needs at least one reference segment", "reference.segments")
        ik = self.reference.ik
        return Scenario(
            chain=chain,
            inertias=inertias,
            joint_damping=np.array(self.joint_damping),
            gravity=np.array(self.gravity),
            rates=RateConfig(**self.rates.model_dump()),
            impedance=self.impedance.build(),
            gains=self.gains.build(),
            controller=self.controller.build(),
            human=human,
            q0=q0,
            qd0=qd0,
            duration=self.duration,
            segments=tuple((np.array(s.x_goal), s.T) for s in self.reference.segments),
            rhythm=self.rhythm(),
            ik=IKSettings(ik.damping, ik.step, ik.tol, ik.max_iter),
            snapshot=self.snapshot,
            seed=self.seed,
        )

    def dump(self) -> dict:
        return self.model_dump(mode="json")


def _loc(loc) -> str:
    return ".".join(str(p) for p in loc)


def parse_config(data) -> ScenarioConfig:
    """Validate a decoded JSON object."""
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object")
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        raise ConfigError(msg.removeprefix("Value error, "), _loc(err["loc"])) from None
    except (ParameterError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", str(path)) from None
    return parse_config(data)

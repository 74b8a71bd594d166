"""Command-line entry point.

stdout carries only the JSON payload of each command; notices and tables go
to stderr.  Exit status: 0 success, 1 failed check, 2 divergence /
immeasurable response / unreachable target, 3 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np
from scipy.spatial.transform import Rotation

from . import checks
from .config import ConfigError, ScenarioConfig, load_config, parse_config
from .controller import ImmeasurableError
from .kinematics import JOINT_NAMES, N_JOINTS, PortId, forward_kinematics, jacobian
from .reference import IKError, TrajectoryError, write_trajectory_csv
from .sim import SimulationDiverged, build_reference, render_impedance, run_scenario, write_log_csv

EXIT_OK, EXIT_CHECK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(ConfigError):
    pass


def _emit(payload) -> None:
    json.dump(payload, sys.stdout, indent=2, sort_keys=False)
    sys.stdout.write("\n")


def _config(path) -> ScenarioConfig:
    return load_config(path) if path else parse_config({})


def _joint_values(values, chain) -> np.ndarray:
    if len(values) != N_JOINTS:
        raise UsageError(f"expected {N_JOINTS} joint values, got {len(values)}", "q")
    try:
        q = np.array([float(v) for v in values])
    except ValueError as exc:
        raise UsageError(str(exc), "q") from None
    for i in chain.limits.violations(q):
        lo, hi = chain.limits.lower[i], chain.limits.upper[i]
        raise UsageError(f"joint {i + 1} ({JOINT_NAMES[i]}) value {q[i]:g} outside [{lo:g}, {hi:g}]", "q")
    return q


def _pose_json(pose) -> dict:
    return {
        "translation": pose.translation.tolist(),
        "quaternion_xyzw": Rotation.from_matrix(pose.rotation).as_quat(canonical=True).tolist(),
    }


def cmd_fk(args) -> int:
    cfg = _config(args.config)
    chain = cfg.chain()
    q = _joint_values(args.q, chain)
    pose_a, pose_b, _ = forward_kinematics(chain, q)
    _emit({"q": q.tolist(), "A": _pose_json(pose_a), "B": _pose_json(pose_b)})
    return EXIT_OK


def cmd_jacobian(args) -> int:
    cfg = _config(args.config)
    chain = cfg.chain()
    q = _joint_values(args.q, chain)
    ports = [PortId.A, PortId.B] if args.port == "both" else [PortId(args.port)]
    _emit({"q": q.tolist(), **{p.value: jacobian(chain, q, p).J.tolist() for p in ports}})
    return EXIT_OK


def _with_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    data = cfg.dump()
    if args.duration is not None:
        data["duration"] = args.duration
    if args.seed is not None:
        data["seed"] = args.seed
    if args.full_rate:
        data["rates"]["scale"] = 1.0
    return parse_config(data)


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def cmd_simulate(args) -> int:
    cfg = _with_overrides(load_config(args.config), args)
    scenario = cfg.build()
    result = run_scenario(scenario)
    log_path = args.log or cfg.output.log
    metrics_path = args.metrics or cfg.output.metrics
    if log_path:
        write_log_csv(result.records, log_path)
        print(f"log: {len(result.records)} rows -> {log_path}", file=sys.stderr)
    metrics = dict(result.metrics)
    status = EXIT_OK
    if result.error is not None:
        metrics["error"] = str(result.error)
        status = EXIT_RUN if isinstance(result.error, (SimulationDiverged, TrajectoryError, IKError, ImmeasurableError)) else EXIT_CONFIG
        print(f"error: {result.error}", file=sys.stderr)
    if metrics_path:
        _write_json(metrics_path, metrics)
    _emit(metrics)
    return status


def cmd_gen_reference(args) -> int:
    cfg = load_config(args.config)
    if not cfg.reference.segments:
        raise ConfigError("no reference segments to generate", "reference.segments")
    sc = cfg.build()
    dt = sc.rates.dt_control
    samples = build_reference(sc, dt)
    t0 = sum(T for _, T in sc.segments)
    out = args.out or cfg.output.reference
    if out:
        write_trajectory_csv(samples, out)
        print(f"reference: {len(samples)} samples -> {out}", file=sys.stderr)
    _emit({"samples": len(samples), "dt": dt, "duration": t0, "q_final": samples[-1].q_des.tolist(), "path": out})
    return EXIT_OK


def cmd_render_impedance(args) -> int:
    cfg = load_config(args.config)
    if cfg.probe is None:
        raise ConfigError("impedance rendering needs a probe definition", "probe")
    if not cfg.render.settings:
        raise ConfigError("impedance rendering needs at least one commanded setting", "render.settings")
    base = cfg.build()
    freqs = cfg.render.frequencies_hz or [cfg.probe.frequency_hz]
    series = []
    for setting in cfg.render.settings:
        imp = replace(base.impedance, B=setting.B.build())
        points = []
        for f in freqs:
            probe = replace(base.human.probe, frequency_hz=f)
            # two transient periods plus five measured ones
            duration = max(base.duration, 7.0 / f)
            sc = replace(base, human=replace(base.human, probe=probe), duration=duration)
            (est,) = render_impedance(sc, {setting.name: imp})
            est["relative_error"] = abs(est["magnitude"] - est["commanded_magnitude"]) / est["commanded_magnitude"]
            points.append(est)
            print(
                f"{setting.name}: {f:g} Hz |Z| = {est['magnitude']:.4g} (commanded {est['commanded_magnitude']:.4g})",
                file=sys.stderr,
            )
        series.append({"name": setting.name, "points": points})
    report = {"port": cfg.probe.port, "series": series}
    csv_path = args.csv or cfg.output.render_csv
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series", "frequency_hz", "magnitude", "phase", "commanded_magnitude"])
            for s in series:
                for p in s["points"]:
                    w.writerow([s["name"], repr(p["frequency_hz"]), repr(p["magnitude"]), repr(p["phase"]),
                                repr(p["commanded_magnitude"])])
    report_path = args.report or cfg.output.render_report
    if report_path:
        _write_json(report_path, report)
    _emit(report)
    return EXIT_OK


def cmd_check(args) -> int:
    results = checks.run_checks()
    width = max(len(r.name) for r in results)
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        print(f"{mark}  {r.name:<{width}}  error {r.error:.3e}  tol {r.tolerance:.0e}  {r.seconds:6.2f} s  {r.detail}",
              file=sys.stderr)
    ok = all(r.passed for r in results)
    _emit(
        {
            "passed": ok,
            "oracles": [
                {"name": r.name, "passed": r.passed, "error": float(r.error), "tolerance": r.tolerance,
                 "seconds": r.seconds}
                for r in results
            ],
        }
    )
    if not ok:
        failed = ", ".join(r.name for r in results if not r.passed)
        print(f"failed oracles: {failed}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_CHECK


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 3), not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="exosim", description="8-DoF upper-limb exoskeleton simulator")
    parser.add_argument("--dump-config", nargs="?", const="", metavar="CONFIG",
                        help="print the validated config (defaults filled in) and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("fk", help="port poses for a joint vector")
    p.add_argument("--config")
    p.add_argument("q", nargs="*", help="8 joint values")
    p.set_defaults(func=cmd_fk)

    p = sub.add_parser("jacobian", help="port Jacobians for a joint vector")
    p.add_argument("--config")
    p.add_argument("--port", choices=["A", "B", "both"], default="both")
    p.add_argument("q", nargs="*", help="8 joint values")
    p.set_defaults(func=cmd_jacobian)

    p = sub.add_parser("simulate", help="run a scenario, write log CSV and metrics JSON")
    p.add_argument("config")
    p.add_argument("--log")
    p.add_argument("--metrics")
    p.add_argument("--duration", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--full-rate", action="store_true", help="run at the undivided sensor/control rates")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-reference", help="export the reaching reference as CSV")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_reference)

    p = sub.add_parser("render-impedance", help="probe experiment over the commanded impedance settings")
    p.add_argument("config")
    p.add_argument("--csv")
    p.add_argument("--report")
    p.set_defaults(func=cmd_render_impedance)

    p = sub.add_parser("check", help="run the built-in numerical oracles")
    p.set_defaults(func=cmd_check)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("EXOSIM_LOG_LEVEL", "warn").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"must be one of {', '.join(LOG_LEVELS)}, got {level!r}", "EXOSIM_LOG_LEVEL")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported
        return exc.code
    try:
        _setup_logging()
        if args.dump_config is not None:
            _emit(_config(args.dump_config or None).dump())
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_CONFIG
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationDiverged, TrajectoryError, IKError, ImmeasurableError) as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())

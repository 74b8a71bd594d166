"""Simulation of an 8-DoF upper-limb exoskeleton: kinematics, dynamics,
admittance control, reaching references and a deterministic closed loop."""

__version__ = "0.1.0"

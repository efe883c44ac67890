"""Deterministic simulator for self-adaptive microservice control.

The package models a small declarative cluster (pods, deployments,
services, autoscalers) driven by a logical clock, and runs adaptation
controllers against it: a generic level-based reconcile engine, two
concrete operators (low-power fleet enforcement and blue-green model
switching), an architectural rule engine with an explicit planning step,
and per-request context layers with header propagation.

Everything is seeded and single-threaded: the same (scenario, seed, mode)
always produces the same trace, byte for byte.
"""

__version__ = "0.1.0"

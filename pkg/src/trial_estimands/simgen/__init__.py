"""Simulation: data-generating processes, population limits and replication studies."""

from .dgp import DgpFamily, DgpSpec, SimulatedData, generate

__all__ = ["DgpFamily", "DgpSpec", "SimulatedData", "generate"]

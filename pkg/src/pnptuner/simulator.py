"""Analytic stand-in for hardware measurement.

Time and energy come from a small closed-form model over region structure
and the runtime configuration: a power cap throttles per-core speed with a
cube-law coupling, the parallel fraction follows from the compute/memory
mix, scheduling overhead depends on imbalance and chunking, and memory
bandwidth stops scaling past a machine-specific thread count. Deterministic
with noise off, so sweep labels are exact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .dataset import (Config, MachineProfile, Measurement, enumerate_search_space)
from .errors import DataError
from .graph import ProgramGraph
from . import mir

DEFAULT_CHUNK_EFFECTIVE = 64   # what a compiler-default chunk simulates as


@dataclass(frozen=True)
class RegionStats:
    """Structure summary driving the analytic model."""
    compute: int      # add, sub, mul, div, fma, cmp, index, phi
    memory: int       # load, store, alloca
    branch: int       # br, condbr
    variables: int    # variable nodes in the graph

    @property
    def parallel_fraction(self) -> float:
        p = (self.compute + self.memory) / (self.compute + self.memory + 4 * self.branch + 2)
        return min(0.99, p)

    @property
    def imbalance(self) -> float:
        return self.branch / (self.branch + self.compute + 1)


@dataclass(frozen=True)
class SimParams:
    tau_c: float = 1e-9       # seconds per compute instruction
    tau_m: float = 4e-9       # seconds per memory instruction
    n_iter: float = 1e4       # modeled iteration count of the region
    kappa_d: float = 0.02     # dynamic-scheduling dispatch overhead
    phi_min: float = 0.3      # lowest per-core speed under throttling
    noise_sigma: float = 0.0  # lognormal sigma on time and energy

    def __post_init__(self):
        if min(self.tau_c, self.tau_m, self.n_iter, self.kappa_d, self.phi_min) <= 0:
            raise DataError("simulator constants must be positive")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")


def graph_stats(graph: ProgramGraph) -> RegionStats:
    compute = memory = branch = variables = 0
    for node in graph.nodes:
        if node.kind == "variable":
            variables += 1
        elif node.kind == "instruction":
            if node.token in mir.COMPUTE_OPS:
                compute += 1
            elif node.token in mir.MEMORY_OPS:
                memory += 1
            elif node.token in mir.BRANCH_OPS:
                branch += 1
    return RegionStats(compute, memory, branch, variables)


def _schedule_factor(stats: RegionStats, config: Config, params: SimParams) -> float:
    t = config.threads
    chunk = DEFAULT_CHUNK_EFFECTIVE if config.chunk is None else config.chunk
    i = stats.imbalance
    if config.schedule == "STATIC":
        return 1.0 + i * (1.0 - 1.0 / t)
    if config.schedule == "DYNAMIC":
        return 1.0 + params.kappa_d * t / (chunk + 1)
    if config.schedule == "GUIDED":
        return 1.0 + 0.5 * i * (1.0 - 1.0 / t) + 0.5 * params.kappa_d * t / (chunk + 1)
    raise DataError(f"unknown schedule {config.schedule!r}")


def _noise_rng(seed: int, region_id: str, config_index: int) -> np.random.Generator:
    digest = hashlib.sha256(region_id.encode()).digest()
    region_key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng([seed, region_key, config_index])


def simulate(stats: RegionStats, config: Config, machine: MachineProfile,
             params: SimParams, region_id: str = "region",
             seed: int = 0, config_index: int = 0) -> Measurement:
    """One measurement of (region, config).

    phi is the per-core speed allowed by the power budget (cube-law
    power/frequency coupling); energy is exactly P_used * T with noise off.
    """
    if config.power_cap not in machine.power_caps \
            or config.threads not in machine.thread_counts:
        raise DataError(f"config {config.label()} outside {machine.name} search space")
    if not config.is_default and (config.schedule not in ("STATIC", "DYNAMIC", "GUIDED")
                                  or config.chunk is None):
        raise DataError(f"config {config.label()} outside {machine.name} search space")

    t = config.threads
    p_core = (machine.tdp - machine.p_idle) / machine.t_max
    budget = (config.power_cap - machine.p_idle) / (t * p_core)
    phi = min(1.0, max(params.phi_min, budget ** (1.0 / 3.0))) if budget > 0 \
        else params.phi_min

    compute_time = params.n_iter * stats.compute * params.tau_c
    memory_time = params.n_iter * stats.memory * params.tau_m
    serial_time = compute_time + memory_time

    p = stats.parallel_fraction
    beta = _schedule_factor(stats, config, params)
    time_s = (1.0 - p) * serial_time / phi + p * (
        compute_time * beta / (phi * t)
        + memory_time / min(t, machine.mem_scal_limit))

    p_used = machine.p_idle + t * p_core * phi ** 3
    energy_j = p_used * time_s

    n = params.n_iter
    l1 = n * stats.memory * 0.1
    l2 = l1 * 0.5
    l3 = l2 * min(1.0, stats.variables / 32.0)
    instructions = n * (stats.compute + stats.memory + stats.branch)
    branch_miss = n * stats.branch * stats.imbalance
    counters = (l1, l2, l3, instructions, branch_miss)

    if params.noise_sigma > 0:
        rng = _noise_rng(seed, region_id, config_index)
        time_s *= float(np.exp(params.noise_sigma * rng.standard_normal()))
        energy_j *= float(np.exp(params.noise_sigma * rng.standard_normal()))

    return Measurement(region_id, config, time_s, energy_j, counters)


def sweep(region_id: str, graph: ProgramGraph, machine: MachineProfile,
          params: SimParams, seed: int = 0) -> list[Measurement]:
    """Measure every configuration of the machine's search space, in
    canonical enumeration order."""
    stats = graph_stats(graph)
    return [
        simulate(stats, config, machine, params,
                 region_id=region_id, seed=seed, config_index=ix)
        for ix, config in enumerate(enumerate_search_space(machine))
    ]


class RegionSimulator:
    """Measurement handle used by search-based tuners: measure one config of
    one known region on demand, counting calls."""

    def __init__(self, stats_by_region: dict[str, RegionStats],
                 machine: MachineProfile, params: SimParams, seed: int = 0):
        self.stats_by_region = stats_by_region
        self.machine = machine
        self.params = params
        self.seed = seed
        self.calls = 0

    def measure(self, region_id: str, config: Config) -> Measurement:
        self.calls += 1
        stats = self.stats_by_region[region_id]
        ix = enumerate_search_space(self.machine).index(config) \
            if self.params.noise_sigma > 0 else 0
        return simulate(stats, config, self.machine, self.params,
                        region_id=region_id, seed=self.seed, config_index=ix)

    @staticmethod
    def from_graphs(graphs: dict[str, ProgramGraph], machine: MachineProfile,
                    params: SimParams, seed: int = 0) -> "RegionSimulator":
        stats = {rid: graph_stats(g) for rid, g in graphs.items()}
        return RegionSimulator(stats, machine, params, seed)

"""Reference tuners: exhaustive oracle, budgeted random sampling, greedy
hill climbing, and the default configuration."""

from __future__ import annotations

import numpy as np

from .dataset import (CHUNK_SIZES, Config, FastestAtCap, MachineProfile,
                      Measurement, MeasurementDB, MinEDP, Task, best_class,
                      class_list, default_config)
from .errors import DataError
from .simulator import DEFAULT_CHUNK_EFFECTIVE, RegionSimulator

TUNER_ORACLE = "oracle"
TUNER_DEFAULT = "default"
TUNER_RANDOM = "random20"
TUNER_HILLCLIMB = "hillclimb20"
TUNER_MODEL_STATIC = "pnp-static"
TUNER_MODEL_COUNTERS = "pnp-counters"


def _metric_key(m: Measurement, task: Task, order: int) -> tuple:
    if isinstance(task, FastestAtCap):
        return (m.time_s, m.energy_j, order)
    return (m.edp(), m.energy_j, order)


def oracle_best(db: MeasurementDB, region: str, task: Task,
                machine: MachineProfile) -> Config:
    """Exhaustive argmin over the task's class list; identical tie rules to
    label derivation, so it always returns the labeled config."""
    classes = class_list(machine, task)
    rows = [db.lookup(region, cfg) for cfg in classes]
    return classes[best_class(rows, task)]


def random_k(sim: RegionSimulator, region: str, task: Task,
             k: int = 20, seed: int = 0) -> Config:
    """Evaluate k distinct uniformly sampled configurations and keep the
    best observed (the sampling budget of execution-based tuners)."""
    classes = class_list(sim.machine, task)
    if not 1 <= k <= len(classes):
        raise DataError(f"sample count k={k} outside 1..{len(classes)}")
    rng = np.random.default_rng([seed, _region_key(region)])
    picks = rng.choice(len(classes), size=k, replace=False)
    best_cfg, best_key = None, None
    for order, ix in enumerate(picks):
        cfg = classes[int(ix)]
        key = _metric_key(sim.measure(region, cfg), task, order)
        if best_key is None or key < best_key:
            best_cfg, best_key = cfg, key
    return best_cfg


def _region_key(region: str) -> int:
    import hashlib
    return int.from_bytes(hashlib.sha256(region.encode()).digest()[:8], "little")


def _neighbors(cfg: Config, task: Task, machine: MachineProfile) -> list[Config]:
    """Single-dimension moves in the concrete space. A compiler-default
    chunk behaves as its simulated size for adjacency."""
    chunk = DEFAULT_CHUNK_EFFECTIVE if cfg.chunk is None else cfg.chunk
    t_ix = machine.thread_counts.index(cfg.threads)
    c_ix = CHUNK_SIZES.index(chunk)
    out = []
    for d in (-1, 1):
        if 0 <= t_ix + d < len(machine.thread_counts):
            out.append(Config(cfg.power_cap, machine.thread_counts[t_ix + d],
                              cfg.schedule, chunk))
    for sched in ("STATIC", "DYNAMIC", "GUIDED"):
        if sched != cfg.schedule:
            out.append(Config(cfg.power_cap, cfg.threads, sched, chunk))
    for d in (-1, 1):
        if 0 <= c_ix + d < len(CHUNK_SIZES):
            out.append(Config(cfg.power_cap, cfg.threads, cfg.schedule,
                              CHUNK_SIZES[c_ix + d]))
    if isinstance(task, MinEDP):
        p_ix = machine.power_caps.index(cfg.power_cap)
        for d in (-1, 1):
            if 0 <= p_ix + d < len(machine.power_caps):
                out.append(Config(machine.power_caps[p_ix + d], cfg.threads,
                                  cfg.schedule, chunk))
    return out


def hill_climb(sim: RegionSimulator, region: str, task: Task,
               budget: int = 20, seed: int = 0) -> Config:
    """Steepest-descent walk from the default configuration, moving along
    one dimension at a time; stops at a local optimum or when the
    evaluation budget is spent. Returns the best configuration evaluated."""
    if budget < 1:
        raise DataError("hill climb budget must be >= 1")
    start_cap = task.cap if isinstance(task, FastestAtCap) else sim.machine.tdp
    current = default_config(sim.machine, start_cap)

    evaluated: dict[tuple, tuple] = {}

    def evaluate(cfg: Config) -> tuple | None:
        key = cfg.key()
        if key in evaluated:
            return evaluated[key]
        if len(evaluated) >= budget:
            return None
        metric = _metric_key(sim.measure(region, cfg), task, len(evaluated))
        evaluated[key] = metric
        return metric

    best_cfg = current
    best_key = evaluate(current)
    current_key = best_key
    while True:
        move_cfg, move_key = None, None
        for nb in _neighbors(current, task, sim.machine):
            key = evaluate(nb)
            if key is None:
                break   # budget spent mid-neighborhood
            if key < current_key and (move_key is None or key < move_key):
                move_cfg, move_key = nb, key
            if key < best_key:
                best_cfg, best_key = nb, key
        if move_cfg is None or len(evaluated) >= budget:
            break
        current, current_key = move_cfg, move_key
    return best_cfg

"""Search space, measurement database, labels, and evaluation splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import ProgramGraph

SCHEDULES = ("STATIC", "DYNAMIC", "GUIDED")
CHUNK_SIZES = (1, 8, 32, 64, 128, 256, 512)


# ---------------------------------------------------------------------------
# Machines and configurations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MachineProfile:
    name: str
    power_caps: tuple[float, ...]     # ascending, watts
    thread_counts: tuple[int, ...]    # ascending
    tdp: float
    min_power: float
    p_idle: float
    t_max: int
    mem_scal_limit: int
    alpha: float

    def __post_init__(self):
        if self.tdp != max(self.power_caps):
            raise DataError(f"{self.name}: tdp must equal max power cap")
        if self.min_power != min(self.power_caps):
            raise DataError(f"{self.name}: min_power must equal min power cap")
        if list(self.thread_counts) != sorted(self.thread_counts):
            raise DataError(f"{self.name}: thread_counts must ascend")
        if self.t_max != max(self.thread_counts):
            raise DataError(f"{self.name}: t_max must equal max thread count")


def load_machine(path_or_name: str | Path) -> MachineProfile:
    """Load a machine profile from a JSON file; bare names ("skylake",
    "haswell") resolve to the profiles shipped with the package."""
    p = Path(path_or_name)
    if p.exists():
        raw = json.loads(p.read_text())
    else:
        name = str(path_or_name).removesuffix(".json")
        res = resources.files("pnptuner").joinpath(f"profiles/{name}.json")
        try:
            raw = json.loads(res.read_text())
        except FileNotFoundError:
            raise DataError(f"no machine profile at {path_or_name!r}") from None
    return MachineProfile(
        name=raw["name"],
        power_caps=tuple(float(c) for c in raw["power_caps"]),
        thread_counts=tuple(int(t) for t in raw["thread_counts"]),
        tdp=float(raw["tdp"]),
        min_power=float(raw["min_power"]),
        p_idle=float(raw["p_idle"]),
        t_max=int(raw["t_max"]),
        mem_scal_limit=int(raw["mem_scal_limit"]),
        alpha=float(raw["alpha"]),
    )


@dataclass(frozen=True)
class Config:
    """One tuning point. chunk=None means the compiler-default chunk size
    (only the default configuration uses it)."""
    power_cap: float
    threads: int
    schedule: str
    chunk: int | None
    is_default: bool = False

    def key(self) -> tuple:
        return (self.power_cap, self.threads, self.schedule,
                self.chunk if self.chunk is not None else "DEFAULT", self.is_default)

    def label(self) -> str:
        chunk = "DEFAULT" if self.chunk is None else str(self.chunk)
        tag = "/default" if self.is_default else ""
        return f"{self.power_cap:g}W/t{self.threads}/{self.schedule}/c{chunk}{tag}"

    def to_json(self) -> dict:
        return {
            "power_cap": self.power_cap,
            "threads": self.threads,
            "schedule": self.schedule,
            "chunk": "DEFAULT" if self.chunk is None else self.chunk,
            "is_default": self.is_default,
        }

    @staticmethod
    def from_json(d: dict) -> "Config":
        chunk = d["chunk"]
        return Config(
            power_cap=float(d["power_cap"]),
            threads=int(d["threads"]),
            schedule=str(d["schedule"]),
            chunk=None if chunk == "DEFAULT" else int(chunk),
            is_default=bool(d["is_default"]),
        )


def default_config(machine: MachineProfile, cap: float) -> Config:
    """All hardware threads, static scheduling, compiler-default chunk."""
    if cap not in machine.power_caps:
        raise DataError(f"cap {cap:g}W not in {machine.name} power caps")
    return Config(cap, machine.t_max, "STATIC", None, is_default=True)


def enumerate_search_space(machine: MachineProfile) -> list[Config]:
    """All cap x threads x schedule x chunk combinations in lexicographic
    order, then one default configuration per cap."""
    space = [
        Config(cap, t, sched, chunk)
        for cap in machine.power_caps
        for t in machine.thread_counts
        for sched in SCHEDULES
        for chunk in CHUNK_SIZES
    ]
    space.extend(default_config(machine, cap) for cap in machine.power_caps)
    return space


# ---------------------------------------------------------------------------
# Tuning tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FastestAtCap:
    cap: float

    def name(self) -> str:
        return f"fastest@{self.cap:g}"


@dataclass(frozen=True)
class MinEDP:
    def name(self) -> str:
        return "minedp"


Task = FastestAtCap | MinEDP


def parse_task(text: str) -> Task:
    if text == "minedp":
        return MinEDP()
    if text.startswith("fastest@"):
        try:
            return FastestAtCap(float(text.removeprefix("fastest@")))
        except ValueError:
            pass
    raise DataError(f"bad task {text!r}: expected fastest@CAP or minedp")


def class_list(machine: MachineProfile, task: Task) -> list[Config]:
    """The label space: per-cap configs (126 + default = 127) for
    FastestAtCap, the whole 508-point space for MinEDP. Class index i holds
    the same (threads, schedule, chunk) tuple across every cap."""
    space = enumerate_search_space(machine)
    if isinstance(task, MinEDP):
        return space
    if task.cap not in machine.power_caps:
        raise DataError(f"cap {task.cap:g}W not in {machine.name} power caps")
    return [c for c in space if c.power_cap == task.cap]


def config_at_cap(machine: MachineProfile, index: int, cap: float) -> Config:
    """Reinstantiate class `index` of a FastestAtCap class list at another
    cap (used when predicting for caps unseen in training)."""
    base = class_list(machine, FastestAtCap(cap))
    return base[index]


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Measurement:
    region_id: str
    config: Config
    time_s: float
    energy_j: float
    counters: tuple[float, float, float, float, float] | None = None
    # counter order: L1 misses, L2 misses, L3 misses, instructions,
    # mispredicted branches

    def __post_init__(self):
        if self.time_s <= 0 or self.energy_j <= 0:
            raise DataError(f"{self.region_id}: non-positive time/energy")
        if self.counters is not None and any(c < 0 for c in self.counters):
            raise DataError(f"{self.region_id}: negative counter")

    def edp(self) -> float:
        return self.energy_j * self.time_s

    def to_json_line(self) -> str:
        d = {"region_id": self.region_id, **self.config.to_json(),
             "time_s": self.time_s, "energy_j": self.energy_j}
        if self.counters is not None:
            d["counters"] = list(self.counters)
        return json.dumps(d, separators=(",", ":"))

    @staticmethod
    def from_json_line(line: str) -> "Measurement":
        d = json.loads(line)
        counters = d.get("counters")
        return Measurement(
            region_id=d["region_id"],
            config=Config.from_json(d),
            time_s=float(d["time_s"]),
            energy_j=float(d["energy_j"]),
            counters=tuple(float(c) for c in counters) if counters is not None else None,
        )


class MeasurementDB:
    """Immutable table of (region, config) -> Measurement."""

    def __init__(self, rows: list[Measurement]):
        self.rows = list(rows)
        self._index: dict[tuple, Measurement] = {}
        for m in self.rows:
            key = (m.region_id, m.config.key())
            if key in self._index:
                raise DataError(f"duplicate measurement for {m.region_id} "
                                f"{m.config.label()}")
            self._index[key] = m

    def __len__(self):
        return len(self.rows)

    def regions(self) -> list[str]:
        seen = dict.fromkeys(m.region_id for m in self.rows)
        return list(seen)

    def lookup(self, region_id: str, config: Config) -> Measurement:
        try:
            return self._index[(region_id, config.key())]
        except KeyError:
            raise DataError(f"incomplete sweep: no measurement for {region_id} "
                            f"at {config.label()}") from None

    def has(self, region_id: str, config: Config) -> bool:
        return (region_id, config.key()) in self._index

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="\n") as fh:
            for m in self.rows:
                fh.write(m.to_json_line() + "\n")

    @staticmethod
    def load(path: str | Path) -> "MeasurementDB":
        rows = []
        with open(path) as fh:
            for ln, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rows.append(Measurement.from_json_line(line))
                except (json.JSONDecodeError, KeyError, ValueError) as e:
                    raise DataError(f"{path}:{ln}: bad measurement line ({e})") from None
        return MeasurementDB(rows)


def exclude_power_cap(db: MeasurementDB, cap: float) -> MeasurementDB:
    """Drop every measurement at the given cap (unseen-cap training)."""
    kept = [m for m in db.rows if m.config.power_cap != cap]
    if len(kept) == len(db.rows):
        raise DataError(f"no measurements at cap {cap:g}W to exclude")
    return MeasurementDB(kept)


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------

@dataclass
class LabeledExample:
    region_id: str
    task: Task
    label: int
    graph: ProgramGraph | None = None
    extras: np.ndarray | None = None   # normalized features, len 0/5/6

    def application(self) -> str:
        return application_of(self.region_id)


def application_of(region_id: str) -> str:
    """Synthetic region ids are <family>_<size>_<seed>; the family plays the
    role of the benchmark application."""
    return region_id.split("_", 1)[0]


def best_class(rows: list[Measurement], task: Task) -> int:
    """Argmin of the task metric over class-ordered rows. Ties break toward
    lower energy, then lower class index."""
    if isinstance(task, FastestAtCap):
        key = lambda i: (rows[i].time_s, rows[i].energy_j, i)
    else:
        key = lambda i: (rows[i].edp(), rows[i].energy_j, i)
    return min(range(len(rows)), key=key)


def derive_labels(db: MeasurementDB, machine: MachineProfile, task: Task,
                  graphs: dict[str, ProgramGraph] | None = None) -> list[LabeledExample]:
    """One example per region: the class index of the best configuration
    under the task metric. Requires a complete sweep over the task's class
    list for every region."""
    classes = class_list(machine, task)
    examples = []
    for region in db.regions():
        rows = [db.lookup(region, cfg) for cfg in classes]
        label = best_class(rows, task)
        graph = graphs.get(region) if graphs else None
        if graphs is not None and graph is None:
            raise DataError(f"no graph provided for region {region}")
        examples.append(LabeledExample(region, task, label, graph=graph))
    return examples


def loocv_splits(groups: dict[str, list]) -> list[tuple[list, list]]:
    """Leave-one-application-out folds: one fold per application, its items
    as validation and everything else as training."""
    if len(groups) < 2:
        raise DataError("leave-one-out needs at least 2 application groups")
    folds = []
    for app in groups:
        val = list(groups[app])
        train = [x for other, xs in groups.items() if other != app for x in xs]
        folds.append((train, val))
    return folds


def group_by_application(examples: list[LabeledExample]) -> dict[str, list[LabeledExample]]:
    groups: dict[str, list[LabeledExample]] = {}
    for ex in examples:
        groups.setdefault(ex.application(), []).append(ex)
    return groups


# ---------------------------------------------------------------------------
# Counter features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtrasStats:
    """z-score statistics of log10 counters, fit on training folds only."""
    mean: tuple[float, float, float, float, float]
    std: tuple[float, float, float, float, float]

    @staticmethod
    def fit(counter_sets: list[tuple[float, ...]]) -> "ExtrasStats":
        if not counter_sets:
            raise DataError("cannot fit counter statistics on an empty set")
        logs = np.log10(np.asarray(counter_sets, dtype=np.float64))
        mean = logs.mean(axis=0)
        std = logs.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return ExtrasStats(tuple(mean.tolist()), tuple(std.tolist()))


def normalize_counters(counters: tuple[float, ...], stats: ExtrasStats) -> np.ndarray:
    if any(c <= 0 for c in counters):
        raise DataError(f"counters must be positive to normalize, got {counters}")
    logs = np.log10(np.asarray(counters, dtype=np.float64))
    return (logs - np.asarray(stats.mean)) / np.asarray(stats.std)


def normalize_extras(counters: tuple[float, ...], cap: float,
                     machine: MachineProfile, stats: ExtrasStats) -> np.ndarray:
    """5 z-scored log10 counters plus the power cap normalized by TDP."""
    z = normalize_counters(counters, stats)
    return np.concatenate([z, [cap / machine.tdp]])

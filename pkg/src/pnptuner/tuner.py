"""Training and evaluation orchestration for both tuning scenarios."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines as bl
from . import metrics, nn
from .dataset import (Config, ExtrasStats, FastestAtCap, LabeledExample,
                      MachineProfile, MeasurementDB, MinEDP, Task,
                      application_of, class_list, config_at_cap, default_config,
                      derive_labels, exclude_power_cap, group_by_application,
                      loocv_splits, normalize_counters, normalize_extras)
from .errors import DataError
from .graph import ProgramGraph
from .simulator import RegionSimulator, SimParams


@dataclass
class Corpus:
    """Everything evaluation needs: region graphs plus their full sweeps."""
    graphs: dict[str, ProgramGraph]
    db: MeasurementDB


@dataclass
class TrainConfig:
    task: Task
    epochs: int = 300
    batch_size: int = 16
    lr: float = 0.001
    optimizer: str | None = None     # default: adamw-amsgrad for FastestAtCap,
                                     # adam for MinEDP
    seed: int = 0
    patience: int | None = None      # early stop on stagnant training loss
    use_extras: bool = False
    cap_feature: bool = False        # append cap/tdp to the counter features
    freeze_gnn: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")

    def optimizer_variant(self) -> str:
        if self.optimizer is not None:
            return self.optimizer
        return "adam" if isinstance(self.task, MinEDP) else "adamw-amsgrad"

    def extras_dim(self) -> int:
        if not self.use_extras:
            return 0
        return 6 if self.cap_feature else 5

    def extras_mode(self) -> str:
        if not self.use_extras:
            return "none"
        return "counters+cap" if self.cap_feature else "counters"


@dataclass
class TunedModel:
    params: nn.ModelParams
    machine: MachineProfile
    task: Task
    extras_mode: str

    def tuner_name(self) -> str:
        return bl.TUNER_MODEL_STATIC if self.extras_mode == "none" \
            else bl.TUNER_MODEL_COUNTERS


# ---------------------------------------------------------------------------
# Counter features
# ---------------------------------------------------------------------------

def example_cap(ex: LabeledExample, machine: MachineProfile) -> float:
    """The power-cap context of an example: the task's cap, or TDP for the
    cap-free EDP task (counters come from the default run at that cap)."""
    return ex.task.cap if isinstance(ex.task, FastestAtCap) else machine.tdp


def region_counters(db: MeasurementDB, machine: MachineProfile,
                    region: str, cap: float) -> tuple[float, ...]:
    m = db.lookup(region, default_config(machine, cap))
    if m.counters is None:
        raise DataError(f"no counters recorded for {region} at {cap:g}W")
    return m.counters


def fit_extras_stats(examples: list[LabeledExample], db: MeasurementDB,
                     machine: MachineProfile) -> ExtrasStats:
    sets = [region_counters(db, machine, ex.region_id, example_cap(ex, machine))
            for ex in examples]
    return ExtrasStats.fit(sets)


def attach_extras(examples: list[LabeledExample], db: MeasurementDB,
                  machine: MachineProfile, stats: ExtrasStats,
                  include_cap: bool) -> None:
    for ex in examples:
        cap = example_cap(ex, machine)
        counters = region_counters(db, machine, ex.region_id, cap)
        if include_cap:
            ex.extras = normalize_extras(counters, cap, machine, stats)
        else:
            ex.extras = normalize_counters(counters, stats)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _check_examples(examples: list[LabeledExample], cfg: TrainConfig,
                    machine: MachineProfile) -> int:
    if not examples:
        raise DataError("no training examples")
    kinds = {type(ex.task) for ex in examples}
    if len(kinds) > 1:
        raise DataError("mixed tasks in one training set")
    if type(cfg.task) not in kinds:
        raise DataError("training-set task does not match TrainConfig task")
    n_classes = len(class_list(machine, examples[0].task))
    for ex in examples:
        if ex.label >= n_classes:
            raise DataError(f"label {ex.label} outside class list of {ex.region_id}")
        if cfg.use_extras and ex.extras is None:
            raise DataError(f"use_extras set but {ex.region_id} has no extras")
    return n_classes


def train(examples: list[LabeledExample], cfg: TrainConfig,
          machine: MachineProfile, init: nn.ModelParams | None = None,
          extras_stats: ExtrasStats | None = None,
          timing_out: list | None = None):
    """Shuffled minibatch cross-entropy training.

    Returns (TunedModel, history); history = {"epochs": [...], "events":
    [...]} with per-epoch loss and full-set training accuracy (wall times go
    to timing_out so history stays seed-deterministic). With freeze_gnn the
    graph encoder runs once and only the dense head trains.
    """
    n_classes = _check_examples(examples, cfg, machine)
    events: list[str] = []
    if init is None:
        spec = nn.ModelSpec(n_classes=n_classes, extras_dim=cfg.extras_dim())
        params = nn.init_model(spec, cfg.seed)
    else:
        params = init.copy()
        if params.spec.extras_dim != cfg.extras_dim():
            raise DataError("checkpoint extras width does not match TrainConfig")
        if params.spec.n_classes != n_classes:
            # Transfer retraining tolerates a different class list by
            # re-initializing the output layer; ordinary training does not.
            if not cfg.freeze_gnn:
                raise DataError(f"model has {params.spec.n_classes} classes, "
                                f"task needs {n_classes}")
            params = _reinit_output_layer(params, n_classes, cfg.seed)
            events.append(f"output layer re-initialized for {n_classes} classes")
    if extras_stats is not None:
        params.extras_stats = extras_stats

    tensors = [nn.graph_tensors(ex.graph) for ex in examples]
    extras = [ex.extras for ex in examples] if cfg.use_extras else None
    labels = [ex.label for ex in examples]
    full = nn.make_batch(tensors, extras, labels, params.spec.extras_dim)

    opt = nn.OptState.create(cfg.optimizer_variant(), params.spec, lr=cfg.lr)
    mask = nn.freeze_gnn(params) if cfg.freeze_gnn else None
    pooled_all = None
    if cfg.freeze_gnn:
        pooled_all, _ = nn._encode(params, full, keep_cache=False)

    rng = np.random.default_rng(cfg.seed)
    n = len(examples)
    history: list[dict] = []
    best_loss, stale = np.inf, 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            ix = order[lo:lo + cfg.batch_size]
            sub = nn.make_batch([tensors[i] for i in ix],
                                [extras[i] for i in ix] if extras else None,
                                [labels[i] for i in ix], params.spec.extras_dim)
            if cfg.freeze_gnn:
                loss, grads = nn.batch_loss_and_grad(
                    params, sub, head_only=True, pooled=pooled_all[ix])
            else:
                loss, grads = nn.batch_loss_and_grad(params, sub)
            nn.optimizer_step(params, grads, opt, mask=mask)
            losses.append(loss)
        if cfg.freeze_gnn:
            logits, _ = nn._head(params, pooled_all, full.extras, keep_cache=False)
        else:
            logits = nn.batch_forward(params, full)
        accuracy = float((logits.argmax(axis=1) == full.labels).mean())
        epoch_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "loss": epoch_loss, "accuracy": accuracy})
        if timing_out is not None:
            timing_out.append(time.perf_counter() - t0)
        if cfg.patience is not None:
            if epoch_loss < best_loss - 1e-9:
                best_loss, stale = epoch_loss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    events.append(f"early stop at epoch {epoch}")
                    break

    model = TunedModel(params, machine, cfg.task, cfg.extras_mode())
    return model, {"epochs": history, "events": events}


def _reinit_output_layer(params: nn.ModelParams, n_classes: int,
                         seed: int) -> nn.ModelParams:
    spec = replace(params.spec, n_classes=n_classes)
    fresh = nn.init_model(spec, seed)
    arrays = {name: params.arrays[name].copy() for name in params.names()}
    last = spec.dense_layers - 1
    arrays[f"dense{last}.weight"] = fresh.arrays[f"dense{last}.weight"]
    arrays[f"dense{last}.bias"] = fresh.arrays[f"dense{last}.bias"]
    return nn.ModelParams(spec, arrays, params.extras_stats)


def predict(model: TunedModel, graph: ProgramGraph,
            extras: np.ndarray | None = None,
            at_cap: float | None = None) -> Config:
    """Argmax over logits mapped through the task's class list; ties go to
    the lowest class index. at_cap reinstantiates the class at another
    power cap (unseen-cap predictions)."""
    logits = nn.forward(model.params, graph, extras)
    ix = int(np.argmax(logits))
    if at_cap is not None:
        if not isinstance(model.task, FastestAtCap):
            raise DataError("at_cap only applies to fastest-at-cap models")
        return config_at_cap(model.machine, ix, at_cap)
    return class_list(model.machine, model.task)[ix]


# ---------------------------------------------------------------------------
# Evaluation reports
# ---------------------------------------------------------------------------

@dataclass
class RegionResult:
    tuner: str
    application: str
    region: str
    task_name: str
    power_cap: float
    predicted: Config
    oracle: Config
    default: Config
    time_default: float
    time_predicted: float
    time_oracle: float
    energy_default: float
    energy_predicted: float
    energy_oracle: float
    speedup: float
    greenup: float
    edp_improvement: float
    normalized: float


CSV_COLUMNS = [
    "tuner", "application", "region", "task", "power_cap",
    "predicted_config", "oracle_config", "default_config",
    "time_default", "time_predicted", "time_oracle",
    "energy_default", "energy_predicted", "energy_oracle",
    "speedup", "greenup", "edp_improvement", "normalized",
]


@dataclass
class EvalReport:
    task_name: str
    machine_name: str
    rows: list[RegionResult] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def tuners(self) -> list[str]:
        return list(dict.fromkeys(r.tuner for r in self.rows))

    def rows_for(self, tuner: str) -> list[RegionResult]:
        return [r for r in self.rows if r.tuner == tuner]

    def compute_aggregates(self) -> None:
        self.aggregates = {}
        for tuner in self.tuners():
            rows = self.rows_for(tuner)
            norm = [r.normalized for r in rows]
            self.aggregates[tuner] = {
                "n": len(rows),
                "geomean_speedup": metrics.geomean([r.speedup for r in rows]),
                "geomean_greenup": metrics.geomean([r.greenup for r in rows]),
                "geomean_edp_improvement": metrics.geomean(
                    [r.edp_improvement for r in rows]),
                "geomean_normalized": metrics.geomean(norm),
                "frac_within_095": metrics.frac_within(norm, 0.95),
                "frac_within_080": metrics.frac_within(norm, 0.80),
            }


def score_prediction(db: MeasurementDB, machine: MachineProfile, task: Task,
                     region: str, predicted: Config, tuner: str) -> RegionResult:
    """All report metrics for one (region, predicted config), looked up in
    the measurement database (never re-simulated)."""
    context_cap = task.cap if isinstance(task, FastestAtCap) else machine.tdp
    oracle_cfg = bl.oracle_best(db, region, task, machine)
    default_cfg = default_config(machine, context_cap)
    m_pred = db.lookup(region, predicted)
    m_orc = db.lookup(region, oracle_cfg)
    m_def = db.lookup(region, default_cfg)

    spd = metrics.speedup(m_def.time_s, m_pred.time_s)
    grn = metrics.greenup(m_def.energy_j, m_pred.energy_j)
    edp_impr = metrics.edp_improvement((m_def.energy_j, m_def.time_s),
                                       (m_pred.energy_j, m_pred.time_s))
    if isinstance(task, FastestAtCap):
        oracle_metric = metrics.speedup(m_def.time_s, m_orc.time_s)
        norm = metrics.normalized(spd, oracle_metric)
    else:
        oracle_metric = metrics.edp_improvement((m_def.energy_j, m_def.time_s),
                                                (m_orc.energy_j, m_orc.time_s))
        norm = metrics.normalized(edp_impr, oracle_metric)
    return RegionResult(
        tuner=tuner, application=application_of(region), region=region,
        task_name=task.name(), power_cap=context_cap,
        predicted=predicted, oracle=oracle_cfg, default=default_cfg,
        time_default=m_def.time_s, time_predicted=m_pred.time_s,
        time_oracle=m_orc.time_s,
        energy_default=m_def.energy_j, energy_predicted=m_pred.energy_j,
        energy_oracle=m_orc.energy_j,
        speedup=spd, greenup=grn, edp_improvement=edp_impr, normalized=norm)


# ---------------------------------------------------------------------------
# LOOCV evaluation
# ---------------------------------------------------------------------------

def evaluate_loocv(corpus: Corpus, machine: MachineProfile, task: Task,
                   cfg: TrainConfig, sim_params: SimParams | None = None,
                   with_baselines: tuple[str, ...] = (),
                   baseline_seed: int = 0,
                   predictor=None) -> EvalReport:
    """Leave-one-application-out evaluation of the model plus any requested
    baseline tuners. `predictor` overrides the trained model with a
    callable (example) -> Config for harness self-tests."""
    examples = derive_labels(corpus.db, machine, task, corpus.graphs)
    folds = loocv_splits(group_by_application(examples))
    report = EvalReport(task.name(), machine.name)

    for train_set, val_set in folds:
        if predictor is not None:
            for ex in val_set:
                pred = predictor(ex)
                report.rows.append(score_prediction(
                    corpus.db, machine, task, ex.region_id, pred, "predictor"))
            continue
        stats = None
        if cfg.use_extras:
            stats = fit_extras_stats(train_set, corpus.db, machine)
            attach_extras(train_set, corpus.db, machine, stats, cfg.cap_feature)
            attach_extras(val_set, corpus.db, machine, stats, cfg.cap_feature)
        model, _ = train(train_set, cfg, machine, extras_stats=stats)
        for ex in val_set:
            pred = predict(model, ex.graph, ex.extras if cfg.use_extras else None)
            report.rows.append(score_prediction(
                corpus.db, machine, task, ex.region_id, pred, model.tuner_name()))

    if with_baselines:
        sim = RegionSimulator.from_graphs(corpus.graphs, machine,
                                          sim_params or SimParams())
        for tuner in with_baselines:
            for ex in examples:
                pred = _baseline_config(tuner, sim, corpus.db, machine, task,
                                        ex.region_id, baseline_seed)
                report.rows.append(score_prediction(
                    corpus.db, machine, task, ex.region_id, pred, tuner))

    report.compute_aggregates()
    return report


def _baseline_config(tuner: str, sim: RegionSimulator, db: MeasurementDB,
                     machine: MachineProfile, task: Task, region: str,
                     seed: int) -> Config:
    context_cap = task.cap if isinstance(task, FastestAtCap) else machine.tdp
    if tuner == bl.TUNER_ORACLE:
        return bl.oracle_best(db, region, task, machine)
    if tuner == bl.TUNER_DEFAULT:
        return default_config(machine, context_cap)
    if tuner == bl.TUNER_RANDOM:
        return bl.random_k(sim, region, task, k=20, seed=seed)
    if tuner == bl.TUNER_HILLCLIMB:
        return bl.hill_climb(sim, region, task, budget=20, seed=seed)
    raise DataError(f"unknown baseline tuner {tuner!r}")


# ---------------------------------------------------------------------------
# Unseen-power-cap evaluation
# ---------------------------------------------------------------------------

def evaluate_unseen_cap(corpus: Corpus, machine: MachineProfile,
                        held_out_cap: float, cfg: TrainConfig) -> EvalReport:
    """Train on every cap except held_out_cap (counters + normalized cap as
    features), validate at held_out_cap with LOOCV over applications."""
    if not cfg.use_extras:
        raise DataError("unseen-cap evaluation requires counter features")
    if held_out_cap not in machine.power_caps:
        raise DataError(f"cap {held_out_cap:g}W not in {machine.name} power caps")
    cfg = replace(cfg, cap_feature=True, task=FastestAtCap(held_out_cap))

    train_db = exclude_power_cap(corpus.db, held_out_cap)
    train_caps = [c for c in machine.power_caps if c != held_out_cap]
    train_examples: list[LabeledExample] = []
    for cap in train_caps:
        train_examples.extend(
            derive_labels(train_db, machine, FastestAtCap(cap), corpus.graphs))
    val_examples = derive_labels(corpus.db, machine, FastestAtCap(held_out_cap),
                                 corpus.graphs)

    report = EvalReport(f"fastest@{held_out_cap:g}(held-out)", machine.name)
    val_by_app = group_by_application(val_examples)
    for app, val_set in val_by_app.items():
        train_set = [ex for ex in train_examples if ex.application() != app]
        fold_cfg = replace(cfg, task=train_set[0].task)
        stats = fit_extras_stats(train_set, train_db, machine)
        attach_extras(train_set, train_db, machine, stats, include_cap=True)
        # Validation counters come from the region's default run at the new
        # cap: an inference-time input, not training data.
        attach_extras(val_set, corpus.db, machine, stats, include_cap=True)
        model, _ = train(train_set, fold_cfg, machine, extras_stats=stats)
        for ex in val_set:
            pred = predict(model, ex.graph, ex.extras, at_cap=held_out_cap)
            report.rows.append(score_prediction(
                corpus.db, machine, FastestAtCap(held_out_cap),
                ex.region_id, pred, model.tuner_name()))
    report.compute_aggregates()
    return report


# ---------------------------------------------------------------------------
# Transfer retraining
# ---------------------------------------------------------------------------

def transfer_retrain(checkpoint: bytes, corpus: Corpus,
                     machine: MachineProfile, cfg: TrainConfig):
    """Retrain only the dense head of a model trained on another machine.
    Graph-encoder parameters stay bit-identical; returns (model, history,
    timing) where timing carries per-epoch wall time and parameter counts."""
    params, _, _ = nn.load_checkpoint(checkpoint)
    cfg = replace(cfg, freeze_gnn=True)
    examples = derive_labels(corpus.db, machine, cfg.task, corpus.graphs)
    stats = None
    if cfg.use_extras:
        stats = fit_extras_stats(examples, corpus.db, machine)
        attach_extras(examples, corpus.db, machine, stats, cfg.cap_feature)
    seconds: list[float] = []
    model, history = train(examples, cfg, machine, init=params,
                           extras_stats=stats, timing_out=seconds)
    mask = nn.freeze_gnn(model.params)
    trainable = sum(model.params.arrays[n].size for n, keep in mask.items() if keep)
    timing = {
        "seconds_per_epoch": float(np.mean(seconds)) if seconds else 0.0,
        "epochs": len(seconds),
        "trainable_parameters": trainable,
        "total_parameters": model.params.parameter_count(),
    }
    return model, history, timing


# ---------------------------------------------------------------------------
# Model persistence
# ---------------------------------------------------------------------------

def save_model(model: TunedModel, opt: nn.OptState | None = None) -> bytes:
    meta = {"task": model.task.name(), "machine": model.machine.name,
            "extras_mode": model.extras_mode}
    return nn.save_checkpoint(model.params, opt, meta)


def load_model(data: bytes, machine: MachineProfile) -> TunedModel:
    from .dataset import parse_task
    params, _, meta = nn.load_checkpoint(data)
    task = parse_task(meta["task"])
    return TunedModel(params, machine, task, meta.get("extras_mode", "none"))

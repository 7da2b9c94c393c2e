"""Command-line pipeline: generate regions, build graphs, sweep the search
space, label, train, evaluate, and render reports.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import baselines as bl
from . import mir, nn, report, tuner
from .dataset import MeasurementDB, derive_labels, load_machine, parse_task
from .errors import DataError, PnpError
from .graph import build_graph, export_graph
from .simulator import SimParams, sweep
from .tuner import Corpus, TrainConfig

DEFAULT_FAMILIES = ",".join(mir.FAMILIES)
DEFAULT_SIZES = "1,2,3,4,5"
KNOWN_BASELINES = (bl.TUNER_ORACLE, bl.TUNER_DEFAULT, bl.TUNER_RANDOM,
                   bl.TUNER_HILLCLIMB)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits 2 by default; usage errors are exit 1 here.
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_corpus_graphs(corpus_dir: str) -> dict:
    graphs = {}
    paths = sorted(Path(corpus_dir).glob("*.mir"))
    if not paths:
        raise DataError(f"no .mir files under {corpus_dir}")
    for path in paths:
        module = mir.parse_mir(path.read_text(), source_name=str(path))
        graphs[path.stem] = build_graph(module)
    return graphs


def _load_corpus(corpus_dir: str, db_path: str) -> Corpus:
    return Corpus(_load_corpus_graphs(corpus_dir), MeasurementDB.load(db_path))


def _train_config(args, task) -> TrainConfig:
    return TrainConfig(
        task=task, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, seed=args.seed, patience=args.patience,
        use_extras=args.use_counters, freeze_gnn=getattr(args, "freeze_gnn", False))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    families = args.families.split(",")
    sizes = [int(s) for s in args.sizes.split(",")]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for fam in families:
        for size in sizes:
            region = mir.RegionFamily(fam, size, args.seed)
            module = mir.generate_region(region)
            path = out / f"{region.region_id()}.mir"
            path.write_text(mir.print_mir(module), newline="\n")
            count += 1
    print(f"wrote {count} regions to {out}")
    return 0


def cmd_graph(args) -> int:
    module = mir.parse_mir(Path(args.input).read_text(), source_name=args.input)
    data = export_graph(build_graph(module))
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".graph.json")
    out.write_bytes(data)
    print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    machine = load_machine(args.machine)
    params = SimParams(noise_sigma=args.noise_sigma)
    graphs = _load_corpus_graphs(args.corpus)
    rows = []
    for region_id in sorted(graphs):
        rows.extend(sweep(region_id, graphs[region_id], machine, params,
                          seed=args.seed))
    MeasurementDB(rows).save(args.out)
    print(f"wrote {len(rows)} measurements to {args.out}")
    return 0


def cmd_label(args) -> int:
    machine = load_machine(args.machine)
    task = parse_task(args.task)
    db = MeasurementDB.load(args.db)
    examples = derive_labels(db, machine, task)
    with open(args.out, "w", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps({"region_id": ex.region_id, "task": task.name(),
                                 "label": ex.label}, separators=(",", ":")) + "\n")
    print(f"wrote {len(examples)} labels to {args.out}")
    return 0


def _load_labeled(args, machine, task):
    graphs = _load_corpus_graphs(args.corpus)
    db = MeasurementDB.load(args.db)
    examples = derive_labels(db, machine, task, graphs)
    if args.labels:
        stated = {}
        with open(args.labels) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    stated[rec["region_id"]] = (rec["task"], rec["label"])
        for ex in examples:
            if ex.region_id in stated:
                st_task, st_label = stated[ex.region_id]
                if st_task != task.name() or st_label != ex.label:
                    raise DataError(f"label file disagrees with db for {ex.region_id}")
    return examples, db


def cmd_train(args) -> int:
    machine = load_machine(args.machine)
    task = parse_task(args.task)
    examples, db = _load_labeled(args, machine, task)
    cfg = _train_config(args, task)
    stats = None
    if cfg.use_extras:
        stats = tuner.fit_extras_stats(examples, db, machine)
        tuner.attach_extras(examples, db, machine, stats, cfg.cap_feature)
    init = None
    if args.init_checkpoint:
        init, _, _ = nn.load_checkpoint(Path(args.init_checkpoint).read_bytes())
    model, history = tuner.train(examples, cfg, machine, init=init,
                                 extras_stats=stats)
    blob = tuner.save_model(model)
    Path(args.out).write_bytes(blob)
    Path(args.out).with_suffix(".json").write_text(nn.checkpoint_sidecar(blob))
    last = history["epochs"][-1]
    print(f"trained {len(examples)} examples, {last['epoch'] + 1} epochs, "
          f"final loss {last['loss']:.4f}, accuracy {last['accuracy']:.3f}")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    machine = load_machine(args.machine)
    task = parse_task(args.task)
    corpus = _load_corpus(args.corpus, args.db)
    requested = tuple(t for t in args.baselines.split(",") if t) if args.baselines else ()
    for t in requested:
        if t not in KNOWN_BASELINES:
            raise DataError(f"unknown baseline {t!r}; known: {KNOWN_BASELINES}")
    cfg = _train_config(args, task)
    rep = tuner.evaluate_loocv(corpus, machine, task, cfg,
                               with_baselines=requested,
                               baseline_seed=args.seed)
    report.write_csv(rep, args.out_prefix + ".csv")
    report.write_summary_json(rep, args.out_prefix + ".json")
    for name, agg in rep.aggregates.items():
        print(f"{name}: geomean speedup {agg['geomean_speedup']:.3f}, "
              f"normalized {agg['geomean_normalized']:.3f}, "
              f">=0.95x oracle in {agg['frac_within_095']:.0%}")
    print(f"wrote {args.out_prefix}.csv and {args.out_prefix}.json")
    return 0


def cmd_eval_unseen_cap(args) -> int:
    machine = load_machine(args.machine)
    corpus = _load_corpus(args.corpus, args.db)
    cfg = TrainConfig(task=parse_task(f"fastest@{args.hold_out:g}"),
                      epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      seed=args.seed, patience=args.patience,
                      use_extras=True, cap_feature=True)
    rep = tuner.evaluate_unseen_cap(corpus, machine, args.hold_out, cfg)
    report.write_csv(rep, args.out_prefix + ".csv")
    report.write_summary_json(rep, args.out_prefix + ".json")
    agg = rep.aggregates[bl.TUNER_MODEL_COUNTERS]
    print(f"held-out {args.hold_out:g}W: geomean normalized "
          f"{agg['geomean_normalized']:.3f} over {agg['n']} regions")
    print(f"wrote {args.out_prefix}.csv and {args.out_prefix}.json")
    return 0


def cmd_predict(args) -> int:
    machine = load_machine(args.machine)
    model = tuner.load_model(Path(args.checkpoint).read_bytes(), machine)
    module = mir.parse_mir(Path(args.input).read_text(), source_name=args.input)
    graph = build_graph(module)
    extras = None
    if model.extras_mode != "none":
        if not args.db:
            raise DataError("model uses counter features: pass --db for lookups")
        db = MeasurementDB.load(args.db)
        region = Path(args.input).stem
        stats = model.params.extras_stats
        if stats is None:
            raise DataError("checkpoint carries no counter statistics")
        cap = model.task.cap if hasattr(model.task, "cap") else machine.tdp
        counters = tuner.region_counters(db, machine, region, cap)
        if model.extras_mode == "counters+cap":
            from .dataset import normalize_extras
            extras = normalize_extras(counters, cap, machine, stats)
        else:
            from .dataset import normalize_counters
            extras = normalize_counters(counters, stats)
    cfg = tuner.predict(model, graph, extras)
    print(json.dumps(cfg.to_json(), separators=(",", ":")))
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        rows.extend(report.read_csv_rows(path))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = report.summarize(rows)
    apps = report.per_application(rows)
    report.write_records_csv(summary, out / "summary.csv")
    report.write_records_csv(apps, out / "per_application.csv")
    figures = report.render_bar_figures(apps, out)
    Path(out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote {out / 'summary.csv'}, {out / 'per_application.csv'}, "
          f"{len(figures)} figure(s)")
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

def _add_train_flags(p, with_freeze=True):
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--use-counters", action="store_true")
    if with_freeze:
        p.add_argument("--freeze-gnn", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pnptuner",
                 description="Graph-model autotuner for power-constrained "
                             "parallel regions (simulated hardware)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="emit a synthetic MIR corpus")
    p.add_argument("--families", default=DEFAULT_FAMILIES)
    p.add_argument("--sizes", default=DEFAULT_SIZES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("graph", help="MIR file -> graph interchange JSON")
    p.add_argument("input")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("sweep", help="simulate every configuration of a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--machine", required=True)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("label", help="derive best-config labels from a sweep db")
    p.add_argument("--db", required=True)
    p.add_argument("--machine", required=True)
    p.add_argument("--task", required=True, help="fastest@CAP or minedp")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train a classifier checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--labels", default=None,
                   help="optional label file to cross-check against the db")
    p.add_argument("--machine", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--init-checkpoint", default=None)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="leave-one-application-out evaluation")
    p.add_argument("--corpus", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--machine", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--baselines", default="",
                   help=f"comma list from {','.join(KNOWN_BASELINES)}")
    p.add_argument("--out-prefix", required=True)
    _add_train_flags(p, with_freeze=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-unseen-cap",
                       help="hold one power cap out of training entirely")
    p.add_argument("--corpus", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--machine", required=True)
    p.add_argument("--hold-out", type=float, required=True)
    p.add_argument("--out-prefix", required=True)
    _add_train_flags(p, with_freeze=False)
    p.set_defaults(func=cmd_eval_unseen_cap)

    p = sub.add_parser("predict", help="predict the config for one MIR file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--machine", required=True)
    p.add_argument("--db", default=None)
    p.add_argument("input")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="merge eval CSVs into summary tables "
                                      "and bar figures")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"pnptuner: error: {e}", file=sys.stderr)
        return 1
    except PnpError as e:
        print(f"pnptuner: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:   # invariant violations and everything unexpected
        print(f"pnptuner: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

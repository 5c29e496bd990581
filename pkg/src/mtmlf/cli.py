"""Command-line entry point.

Artifacts under ``--out``::

    dbs/<id>/                     schema.json + one .mtdb file per table
    workloads/<id>.jsonl          multi-table queries (plus .single.jsonl)
    workloads/<id>.labeled.jsonl  the same with oracle labels
    encoders/<id>.mtck            per-table filter encoders
    model.mtck, model_seq.mtck    joint / sequence-fine-tuned models
    report.{json,txt}             evaluation on the training databases' test split
    transfer_report.{json,txt}    meta-training, zero-shot and fine-tuned results
"""

from __future__ import annotations

import os

_threads = os.environ.get("MTMLF_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from . import tensor as T  # noqa: E402
from .config import ExperimentConfig, canonical_json, config_hash, config_to_dict, load_config  # noqa: E402
from .featurize import FeatureConfig, build_records, load_encoders, save_encoders  # noqa: E402
from .meta import DBBundle, fine_tune, mla_train, train_encoders, transfer_eval  # noqa: E402
from .model import ModelConfig, MTModel, load_model  # noqa: E402
from .oracle import label_query  # noqa: E402
from .schema_gen import ConfigError, FormatError, generate_database, load_database, save_database  # noqa: E402
from .training import label_stats, seq_finetune, train_joint  # noqa: E402
from .workload import (  # noqa: E402
    ColumnStats, WorkloadItem, gen_query, gen_single_table_query, initial_plan, load_workload,
    save_workload,
)


class CLIError(RuntimeError):
    pass


class Context:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.hash = config_hash(cfg)
        self._dbs: dict = {}

    def db_dir(self, db_id: str) -> Path:
        return self.out / "dbs" / db_id

    def workload_path(self, db_id: str, kind: str = "", labeled: bool = False) -> Path:
        suffix = (".single" if kind == "single" else "") + (".labeled" if labeled else "")
        return self.out / "workloads" / f"{db_id}{suffix}.jsonl"

    def encoder_path(self, db_id: str) -> Path:
        return self.out / "encoders" / f"{db_id}.mtck"

    def db_seed(self, db_id: str) -> int:
        return self.cfg.seed * 1000 + self.cfg.db_ids.index(db_id)

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise CLIError(f"missing {path}; run `{hint}` first")
        return path

    def db(self, db_id: str):
        if db_id not in self._dbs:
            self.require(self.db_dir(db_id) / "schema.json", "gen-db")
            self._dbs[db_id] = load_database(self.db_dir(db_id))
        return self._dbs[db_id]

    def labeled(self, db_id: str, kind: str = "") -> list[WorkloadItem]:
        return load_workload(self.require(self.workload_path(db_id, kind, True), "label"))

    def encoders(self, db_id: str):
        path = self.require(self.encoder_path(db_id), "train-enc")
        encs, fcfg = load_encoders(path, {db_id: self.db(db_id)})
        if fcfg != self.cfg.features:
            raise CLIError(f"{path} was trained with a different feature configuration")
        return encs[db_id]

    def split(self, db_id: str):
        items = self.labeled(db_id)
        n = self.cfg.n_queries
        return items[:n], items[n:]

    def bundle(self, db_id: str, items) -> DBBundle:
        return DBBundle(self.db(db_id), items, self.encoders(db_id))


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    T.atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    T.atomic_write_bytes(path, text.encode())


# ---------------------------------------------------------------------------
# commands


def cmd_gen_db(ctx: Context) -> None:
    for db_id in ctx.cfg.db_ids:
        db = generate_database(ctx.db_seed(db_id), ctx.cfg.gen, name=db_id)
        save_database(db, ctx.db_dir(db_id))
        print(f"{db_id}: {len(db.schema.tables)} tables -> {ctx.db_dir(db_id)}")


def cmd_gen_workload(ctx: Context) -> None:
    cfg = ctx.cfg
    for i, db_id in enumerate(cfg.db_ids):
        db = ctx.db(db_id)
        stats = ColumnStats(db)
        total = cfg.n_queries + cfg.n_test_queries
        queries = [gen_query(db, [cfg.seed, i, 0, j], cfg.queries) for j in range(total)]
        items = [WorkloadItem(q, initial_plan(q, db, stats)) for q in queries]
        singles = [gen_single_table_query(db, t, [cfg.seed, i, 1, k, j])
                   for k, t in enumerate(db.schema.names) for j in range(cfg.n_single_queries)]
        single_items = [WorkloadItem(q, initial_plan(q, db, stats)) for q in singles]
        ctx.workload_path(db_id).parent.mkdir(parents=True, exist_ok=True)
        save_workload(ctx.workload_path(db_id), items)
        save_workload(ctx.workload_path(db_id, "single"), single_items)
        print(f"{db_id}: {len(items)} queries, {len(single_items)} single-table queries")


def cmd_label(ctx: Context) -> None:
    cfg = ctx.cfg
    for db_id in cfg.db_ids:
        db = ctx.db(db_id)
        stats = ColumnStats(db)
        for kind in ("", "single"):
            src = load_workload(ctx.require(ctx.workload_path(db_id, kind), "gen-workload"))
            items = [label_query(db, it.query, cfg.cost, stats, cfg.features.m_max, cfg.model.bushy and kind == "")
                     for it in src]
            save_workload(ctx.workload_path(db_id, kind, True), items)
        print(f"{db_id}: labeled")


def cmd_train_enc(ctx: Context) -> None:
    cfg = ctx.cfg
    for db_id in cfg.db_ids:
        encs = train_encoders(ctx.db(db_id), ctx.labeled(db_id, "single"), cfg.features, cfg.encoder)
        ctx.encoder_path(db_id).parent.mkdir(parents=True, exist_ok=True)
        save_encoders(ctx.encoder_path(db_id), {db_id: encs}, cfg.features)
        print(f"{db_id}: {len(encs)} encoders")


def _model_options(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg.model)


def _train_records(ctx: Context):
    records = []
    for db_id in ctx.cfg.train_db_ids:
        train, _ = ctx.split(db_id)
        b = ctx.bundle(db_id, train)
        records += build_records(b.db, b.items, b.encoders, ctx.cfg.features, ctx.cfg.model.bushy)
    return records


def cmd_train(ctx: Context) -> None:
    cfg = ctx.cfg
    records = _train_records(ctx)
    fc = cfg.features
    model = MTModel(ModelConfig(d_in=fc.d_in, n_max=fc.n_max, m_max=fc.m_max, seed=cfg.seed,
                                **label_stats(records), **_model_options(cfg)))
    history = train_joint(model, records, dataclasses.replace(cfg.train, seed=cfg.seed))
    model.save(ctx.out / "model.mtck", {"config_hash": ctx.hash})
    write_json(ctx.out / "train_history.json", history)
    print(f"L_QO {history[0]['qo']:.4f} -> {history[-1]['qo']:.4f} over {cfg.train.epochs} epochs")


def cmd_seq_finetune(ctx: Context) -> None:
    cfg = ctx.cfg
    model, _ = load_model(ctx.require(ctx.out / "model.mtck", "train"))
    records = _train_records(ctx)[:cfg.seq_queries]
    tcfg = dataclasses.replace(cfg.train, epochs=cfg.seq_epochs, seed=cfg.seed)
    history = seq_finetune(model, records, tcfg)
    model.save(ctx.out / "model_seq.mtck", {"config_hash": ctx.hash})
    write_json(ctx.out / "seq_history.json", history)
    print(f"sequence loss per epoch: {history}")


def _eval_rows(ctx: Context, model, bundle: DBBundle) -> dict:
    cfg = ctx.cfg
    kw = dict(k=cfg.train.beam_k, cap=cfg.train.beam_cap, params=cfg.cost,
              baseline_samples=cfg.baseline_samples, seed=cfg.seed)
    return {"model": transfer_eval(model, bundle, cfg.features, **kw),
            "oracle": transfer_eval(model, bundle, cfg.features, oracle=True, **kw)}


def cmd_eval(ctx: Context, model_path: Path | None) -> None:
    path = model_path or ctx.out / "model.mtck"
    model, _ = load_model(ctx.require(path, "train"))
    report = {"config_hash": ctx.hash, "model": path.name, "databases": {}}
    for db_id in ctx.cfg.train_db_ids:
        _, test = ctx.split(db_id)
        report["databases"][db_id] = _eval_rows(ctx, model, ctx.bundle(db_id, test))
    write_json(ctx.out / "report.json", report)
    write_text(ctx.out / "report.txt", format_report(report))
    print(format_report(report), end="")


def _ensure_upstream(ctx: Context) -> None:
    stages = [
        (lambda: all((ctx.db_dir(d) / "schema.json").exists() for d in ctx.cfg.db_ids), cmd_gen_db),
        (lambda: all(ctx.workload_path(d, "single").exists() for d in ctx.cfg.db_ids), cmd_gen_workload),
        (lambda: all(ctx.workload_path(d, "single", True).exists() for d in ctx.cfg.db_ids), cmd_label),
        (lambda: all(ctx.encoder_path(d).exists() for d in ctx.cfg.db_ids), cmd_train_enc),
    ]
    for done, run in stages:
        if not done():
            run(ctx)


def cmd_transfer(ctx: Context) -> None:
    cfg = ctx.cfg
    held = cfg.heldout_db_id
    if held is None:
        raise CLIError("transfer needs n_heldout_dbs = 1")
    if cfg.n_train_dbs < 2:
        raise CLIError("transfer needs at least two training databases")
    _ensure_upstream(ctx)
    bundles = [ctx.bundle(d, ctx.split(d)[0]) for d in cfg.train_db_ids]
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    model, history = mla_train(bundles, cfg.features, tcfg, {"seed": cfg.seed, **_model_options(cfg)})
    model.save(ctx.out / "model_meta.mtck", {"config_hash": ctx.hash})
    pool, test = ctx.split(held)
    n_ft = max(1, int(round(cfg.finetune_fraction * len(pool))))
    test_bundle = ctx.bundle(held, test)
    zero = _eval_rows(ctx, model, test_bundle)
    tuned, ft_history = fine_tune(model, ctx.bundle(held, pool[:n_ft]), cfg.features,
                                  dataclasses.replace(tcfg, epochs=cfg.finetune_epochs))
    tuned.save(ctx.out / "model_ft.mtck", {"config_hash": ctx.hash})
    ft = _eval_rows(ctx, tuned, test_bundle)
    report = {
        "config_hash": ctx.hash, "heldout": held, "train_dbs": cfg.train_db_ids,
        "finetune_queries": n_ft, "meta_history": history, "finetune_history": ft_history,
        "databases": {f"{held} zero-shot": zero, f"{held} fine-tuned": ft},
    }
    write_json(ctx.out / "transfer_report.json", report)
    write_text(ctx.out / "transfer_report.txt", format_report(report))
    print(format_report(report), end="")


# ---------------------------------------------------------------------------
# report formatting


def format_report(report: dict) -> str:
    lines = [f"config sha256 {report['config_hash']}", ""]
    lines.append(f"{'':28}{'median':>12}{'max':>12}{'mean':>12}")
    for db_id, rows in report["databases"].items():
        for name, r in rows.items():
            for metric in ("card_q_error", "cost_q_error"):
                s = r[metric]
                label = f"{db_id}/{name} {metric.split('_')[0]}"
                lines.append(f"{label:28}{s['median']:12.3f}{s['max']:12.3f}{s['mean']:12.3f}")
    lines += ["", f"{'':28}{'JOEU':>8}{'95% CI':>18}{'random':>8}{'legal':>8}"]
    for db_id, rows in report["databases"].items():
        for name, r in rows.items():
            ci = "[{:.3f}, {:.3f}]".format(*r["joeu_ci95"])
            lines.append(f"{db_id + '/' + name:28}{r['joeu_mean']:8.3f}{ci:>18}"
                         f"{r['random_joeu_mean']:8.3f}{r['legality_rate']:8.3f}")
    lines += ["", f"{'':28}{'total cost':>16}{'greedy':>16}{'improvement':>13}"]
    for db_id, rows in report["databases"].items():
        for name, r in rows.items():
            lines.append(f"{db_id + '/' + name:28}{r['total_cost']['model']:16.1f}"
                         f"{r['total_cost']['greedy']:16.1f}{r['improvement_vs_greedy']['model']:13.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# entry point

COMMANDS = ("gen-db", "gen-workload", "label", "train-enc", "train", "seq-finetune", "eval", "transfer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtmlf", description="Multi-task learned query optimizer experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="experiment config JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="artifact directory")
        if name == "eval":
            p.add_argument("--model", type=Path, help="model checkpoint (default OUT/model.mtck)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if _threads is not None and not (_threads.isdigit() and int(_threads) > 0):
            raise CLIError("MTMLF_THREADS must be a positive integer")
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2 ** 64:
                raise CLIError("--seed must be an unsigned 64-bit integer")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        cfg.validate()
        ctx = Context(cfg, args.out)
        args.out.mkdir(parents=True, exist_ok=True)
        write_text(args.out / "config.json", canonical_json(config_to_dict(cfg)) + "\n")
        run = {
            "gen-db": cmd_gen_db, "gen-workload": cmd_gen_workload, "label": cmd_label,
            "train-enc": cmd_train_enc, "train": cmd_train, "seq-finetune": cmd_seq_finetune,
            "transfer": cmd_transfer,
        }
        if args.command == "eval":
            cmd_eval(ctx, args.model)
        else:
            run[args.command](ctx)
    except (CLIError, ConfigError, FormatError, T.CheckpointError, OSError, ValueError) as exc:
        print(f"mtmlf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

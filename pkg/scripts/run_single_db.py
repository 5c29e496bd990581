"""Single-database training experiment: joint vs JoinSel-only objective.

Generates one database, labels a workload with the exact oracle, trains one
model per loss weighting and reports held-out JOEU against a random legal
order baseline.

    python3 scripts/run_single_db.py --queries 2000 --test 200 --epochs 30
"""

import argparse
import json
import time

from mtmlf.featurize import EncoderTrainConfig, FeatureConfig, build_records
from mtmlf.losses import LossWeights
from mtmlf.meta import DBBundle, train_encoders, transfer_eval
from mtmlf.model import ModelConfig, MTModel
from mtmlf.oracle import label_query
from mtmlf.schema_gen import GenConfig, generate_database
from mtmlf.training import TrainConfig, label_stats, train_joint
from mtmlf.workload import ColumnStats, QueryConfig, gen_query, gen_single_table_query


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--queries", type=int, default=2000)
    ap.add_argument("--test", type=int, default=200)
    ap.add_argument("--singles", type=int, default=300, help="single-table queries per table")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--max-tables", type=int, default=6)
    ap.add_argument("--json", help="write the results here as JSON")
    args = ap.parse_args()

    t0 = time.perf_counter()
    fcfg = FeatureConfig()
    db = generate_database(args.seed, GenConfig(n_tables=(6, 6), rows=(1500, 2500)), name="single")
    stats = ColumnStats(db)
    qcfg = QueryConfig(max_tables=args.max_tables)
    items = [label_query(db, gen_query(db, [args.seed, 0, j], qcfg), stats=stats)
             for j in range(args.queries + args.test)]
    singles = [label_query(db, gen_single_table_query(db, t, [args.seed, 1, k, j]), stats=stats)
               for k, t in enumerate(db.schema.names) for j in range(args.singles)]
    encs = train_encoders(db, singles, fcfg, EncoderTrainConfig())
    records = build_records(db, items[:args.queries], encs, fcfg)
    test = DBBundle(db, items[args.queries:], encs)
    print(f"prepared {len(items)} labeled queries in {time.perf_counter() - t0:.0f}s")

    results = {}
    for name, weights in (("joint", LossWeights(1, 1, 1)), ("joinsel-only", LossWeights(0, 0, 1))):
        model = MTModel(ModelConfig(d_in=fcfg.d_in, n_max=fcfg.n_max, m_max=fcfg.m_max, **label_stats(records)))
        hist = train_joint(model, records, TrainConfig(epochs=args.epochs, weights=weights))
        rep = transfer_eval(model, test, fcfg)
        results[name] = {"history": hist, "report": rep}
        lo, hi = rep["joeu_ci95"]
        print(f"{name:13s} L_QO {hist[0]['qo']:.3f} -> {hist[-1]['qo']:.3f}  "
              f"JOEU {rep['joeu_mean']:.3f} [{lo:.3f}, {hi:.3f}]  legal {rep['legality_rate']:.0%}  "
              f"card Q-err median {rep['card_q_error']['median']:.2f}")
    base = results["joint"]["report"]
    print(f"random legal order JOEU {base['random_joeu_mean']:.3f} "
          f"[{base['random_joeu_ci95'][0]:.3f}, {base['random_joeu_ci95'][1]:.3f}]")
    print(f"total {time.perf_counter() - t0:.0f}s")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()

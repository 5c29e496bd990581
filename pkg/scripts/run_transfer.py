"""Cross-database transfer experiment driven through the CLI pipeline.

Pre-trains on four generated databases, evaluates zero-shot on a fifth and
again after fine-tuning on a fraction of its workload.

    python3 scripts/run_transfer.py --out runs/transfer
"""

import argparse
import json
import sys
from pathlib import Path

from mtmlf.cli import main as cli_main

DEFAULT = {
    "seed": 7, "n_train_dbs": 4, "n_heldout_dbs": 1,
    "gen": {"n_tables": [6, 6], "rows": [1500, 2500]},
    "queries": {"max_tables": 6},
    "n_queries": 500, "n_test_queries": 200, "n_single_queries": 300,
    "train": {"epochs": 30}, "finetune_epochs": 10, "finetune_fraction": 0.2,
}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/transfer")
    ap.add_argument("--seed", type=int, default=DEFAULT["seed"])
    ap.add_argument("--queries", type=int, default=DEFAULT["n_queries"], help="queries per database")
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {**DEFAULT, "seed": args.seed, "n_queries": args.queries, "train": {"epochs": args.epochs}}
    path = out / "transfer_config.json"
    path.write_text(json.dumps(cfg, indent=2))
    return cli_main(["transfer", "--config", str(path), "--out", str(out)])


if __name__ == "__main__":
    sys.exit(main())

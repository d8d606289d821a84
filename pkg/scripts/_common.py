import argparse
import json
import logging
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def parse_args(description):
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--out", type=Path, help="result JSON (default: results/<name>.json)")
    ap.add_argument("--force", action="store_true", help="ignore a cached result")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--max-epochs", type=int, default=30)
    ap.add_argument("--l2-weight", type=float, default=0.01)
    ap.add_argument("--n-train", type=int)
    ap.add_argument("--n-val", type=int)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args


def overrides(args):
    o = {"seeds": tuple(args.seeds), "max_epochs": args.max_epochs, "l2_weight": args.l2_weight}
    if args.n_train:
        o["n_train"] = args.n_train
    if args.n_val:
        o["n_val"] = args.n_val
    return o


def report(result):
    print(json.dumps({m["name"]: [round(m["val_accuracy_mean"], 4), round(m["val_accuracy_std"], 4)]
                      for m in result["models"]}))

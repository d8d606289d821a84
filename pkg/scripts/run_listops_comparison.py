"""Hosvd(c=20, r=3) against Sum(c=25) on a 20k/2k ListOps corpus, three seeds."""
from _common import ROOT, overrides, parse_args, report

from treetensor.experiments import listops_comparison, run_experiment

if __name__ == "__main__":
    args = parse_args(__doc__)
    cfg = listops_comparison(**overrides(args))
    report(run_experiment(cfg, args.out or ROOT / "results" / "listops_comparison.json", args.force))

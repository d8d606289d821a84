"""Full, Hosvd(r=7) and Sum at c=10 on a 10k/2k logical-relations corpus, three seeds."""
from _common import ROOT, overrides, parse_args, report

from treetensor.experiments import lrt_comparison, run_experiment

if __name__ == "__main__":
    args = parse_args(__doc__)
    cfg = lrt_comparison(**overrides(args))
    report(run_experiment(cfg, args.out or ROOT / "results" / "lrt_comparison.json", args.force))

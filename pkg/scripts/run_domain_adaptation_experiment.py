#!/usr/bin/env python3
"""Adversarial coupling on vs off across two synthetic sensors.

For each seed the same architecture trains twice — once at the given reversal
strength and once at zero — and both models are scored on held-out target
prints at their own validation-chosen thresholds. Prints the per-run results
and the mean target F-score gap.
"""

import argparse
import json

from poredetect.experiment import DomainStudyConfig, domain_study


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--lam", type=float, default=0.005)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--out", help="write the result JSON here as well")
    args = parser.parse_args()

    study = DomainStudyConfig()
    if args.epochs is not None:
        study = DomainStudyConfig(epochs=args.epochs)

    def progress(run):
        print(f"seed={run.seed} lam={run.lam:g} th={run.threshold:.2f} "
              f"valF={run.val_f_score:.4f} testF={run.test_f_score:.4f} "
              f"R_T={run.test_true_rate:.3f} R_F={run.test_false_rate:.3f} "
              f"{run.seconds:.1f}s", flush=True)

    result = domain_study(seeds=tuple(args.seeds), lam=args.lam,
                          study=study, progress=progress)
    payload = result.to_dict()
    print(json.dumps(payload, indent=2))
    print(f"mean target F gap (lam={args.lam:g} minus lam=0): "
          f"{result.mean_gap:+.4f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

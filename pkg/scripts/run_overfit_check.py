#!/usr/bin/env python3
"""Overfit a width-reduced network on a handful of synthetic patches.

Sanity check for the training stack: the map loss must collapse and the
detection pipeline must recover the planted pores from the fitted maps.
"""

import argparse
import json

from poredetect.experiment import overfit_study


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--patches", type=int, default=10)
    parser.add_argument("--patch-size", type=int, default=40)
    parser.add_argument("--width", type=float, default=0.125)
    parser.add_argument("--lr", type=float, default=3e-3)
    parser.add_argument("--max-steps", type=int, default=400)
    args = parser.parse_args()

    result = overfit_study(seed=args.seed, n_patches=args.patches,
                           patch_size=args.patch_size, width=args.width,
                           learning_rate=args.lr, max_steps=args.max_steps)
    print(json.dumps(result.to_dict(), indent=2))
    ok = result.final_mse < 1e-3 and result.recall >= 0.95
    print(f"overfit check: {'ok' if ok else 'FAILED'} "
          f"(mse {result.final_mse:.2e}, recall {result.recall:.3f}, "
          f"{result.steps} steps, {result.seconds / 60:.1f} min)")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())

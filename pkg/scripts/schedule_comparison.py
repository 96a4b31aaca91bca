#!/usr/bin/env python3
"""Print the log and cosine corruption tables side by side.

The log schedule holds the signal-to-noise ratio low through the bulk of the
range (more training emphasis on heavily-noised inputs); near k = K the cosine
curve dives to zero faster, so the pointwise ordering inverts in the last few
steps.
"""

import argparse

from trafficdiff.diffusion import DiffusionConfig, build_cosine_schedule, build_log_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--K", type=int, default=50)
    args = ap.parse_args()
    cfg = DiffusionConfig(k_steps=args.K)
    log = build_log_schedule(cfg)
    cos = build_cosine_schedule(cfg)
    print(f"{'k':>4} {'log abar':>12} {'cos abar':>12} {'log<cos':>8}")
    for k in range(args.K + 1):
        flag = "" if k in (0, args.K) else ("yes" if log.alpha_bar[k] < cos.alpha_bar[k] else "NO")
        print(f"{k:>4} {log.alpha_bar[k]:>12.6f} {cos.alpha_bar[k]:>12.6f} {flag:>8}")


if __name__ == "__main__":
    main()

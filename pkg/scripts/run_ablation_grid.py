#!/usr/bin/env python3
"""Run the ablation grid on the synthetic scene and print the table.

Arms share the same data seed so rows are comparable. Reduced step counts
by default; --full runs the complete protocol (expect a long wait on CPU).
"""

import argparse
import os
import sys

import torch

from mvpersona import pipeline
from mvpersona.config import RunConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--case-id", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--arms", default="full,views_1,views_2,views_3,"
                    "no_attention_loss,no_masked_loss,ti_only,db_only")
    ap.add_argument("--full", action="store_true")
    args = ap.parse_args()
    torch.set_num_threads(max(1, os.cpu_count() // 2))

    cfg = RunConfig()
    cfg.case_id = args.case_id
    cfg.seed = args.seed
    if not args.full:
        cfg.phase1.steps = 100
        cfg.phase2.steps = 100
        cfg.phase2.prior_set_size = 4
        cfg.sampler.num_steps = 30

    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    report = pipeline.cmd_ablate(cfg, arms, args.out)
    with open(os.path.join(args.out, "ablation_table.txt")) as fh:
        print(fh.read())
    failed = [r["arm"] for r in report["arms"] if "error" in r]
    if failed:
        print(f"failed arms: {failed}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

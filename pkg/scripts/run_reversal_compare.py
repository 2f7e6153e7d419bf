#!/usr/bin/env python3
"""Run the three-way projection comparison on the reversal task.

Writes per-variant metrics, checkpoints, and the comparison table under
--out (default runs/reversal_compare). This is the desk-scale analogue of
the full-scale translation ablation: identical data, seeds, and
hyperparameters across variants, differing only in the QKV projection.
"""

import argparse
import json
import os
import sys

from nalab.cli import main as cli_main


def build_config(args) -> dict:
    return {
        "model": {"d_model": 64, "num_layers": 2, "num_heads": 4, "d_ff": 256,
                  "dropout_p": 0.1, "max_seq_len": 64},
        "train": {"max_steps": args.max_steps, "eval_every": 250, "log_every": 50,
                  "batch_size": 32, "seed": args.seed, "lr": 3e-4},
        "data": {"task": "reversal", "vocab_size": 20, "min_len": 4, "max_len": 12,
                 "num_train": 20000, "num_val": 1000, "seed": args.seed},
        "output_dir": args.out,
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/reversal_compare")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--max-steps", type=int, default=3000)
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    config_path = os.path.join(args.out, "base_config.json")
    with open(config_path, "w", encoding="utf-8") as fh:
        json.dump(build_config(args), fh, indent=2, sort_keys=True)

    argv = ["compare", "--config", config_path]
    if args.verbose:
        argv.append("--verbose")
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())

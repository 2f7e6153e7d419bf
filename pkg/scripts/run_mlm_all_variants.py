#!/usr/bin/env python3
"""Train the char-level masked-LM encoder once per projection variant.

Uses the packaged corpus by default. Prints held-out perplexity per variant
against the uniform baseline (= vocabulary size); metrics and checkpoints
land under --out.
"""

import argparse
import json
import os
import sys

from nalab.cli import main as cli_main


def build_config(args, variant: str) -> dict:
    return {
        "model": {"d_model": 64, "num_layers": 2, "num_heads": 4, "d_ff": 256,
                  "dropout_p": 0.1, "max_seq_len": 64, "architecture": "encoder"},
        "train": {"max_steps": args.max_steps, "eval_every": 200, "log_every": 50,
                  "batch_size": 32, "seed": args.seed, "lr": 3e-4},
        "data": {"task": "charmlm", "num_train": args.num_train,
                 "num_val": args.num_val, "seed": args.seed,
                 **({"corpus": args.corpus} if args.corpus else {})},
        "projection": variant,
        "output_dir": os.path.join(args.out, variant),
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/mlm_variants")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--max-steps", type=int, default=1200)
    parser.add_argument("--num-train", type=int, default=1300)
    parser.add_argument("--num-val", type=int, default=150)
    parser.add_argument("--corpus", help="text file (default: packaged corpus)")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args()

    rc = 0
    for variant in ("standard", "dlp", "neural"):
        out_dir = os.path.join(args.out, variant)
        os.makedirs(out_dir, exist_ok=True)
        config_path = os.path.join(out_dir, "config.json")
        with open(config_path, "w", encoding="utf-8") as fh:
            json.dump(build_config(args, variant), fh, indent=2, sort_keys=True)
        argv = ["train", "--config", config_path]
        if args.verbose:
            argv.append("--verbose")
        rc |= cli_main(argv)
        metrics = os.path.join(out_dir, "metrics.csv")
        last = open(metrics, encoding="utf-8").read().splitlines()[-1].split(",")
        print(f"[{variant}] final perplexity {last[5]} (metrics: {metrics})")
    return rc


if __name__ == "__main__":
    sys.exit(main())

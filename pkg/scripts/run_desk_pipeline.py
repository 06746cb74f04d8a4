#!/usr/bin/env python3
"""End-to-end desk-scale walkthrough: corpus -> rooms -> scenes -> train ->
eval -> report, all inside one output directory.

Takes a few minutes on a laptop CPU. Everything is reproducible from the
seed; rerunning over a finished directory is a no-op.
"""

import argparse
import json
import sys
from pathlib import Path

from classroomsep.cli import main as cli_main
from classroomsep.democorpus import make_demo_babble_corpus, make_demo_corpus


def run(args_list):
    print(f"\n$ classroomsep {' '.join(args_list)}")
    rc = cli_main(args_list)
    if rc != 0:
        sys.exit(rc)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk-demo")
    parser.add_argument("--seed", type=int, default=2024)
    parser.add_argument("--scenes", type=int, default=12, help="train scene count")
    parser.add_argument("--babble", action="store_true", help="add babble fields")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    speech = make_demo_corpus(out / "corpus" / "speech", seed=args.seed)
    babble = make_demo_babble_corpus(out / "corpus" / "babble", seed=args.seed + 1)

    config = {
        "version": 1,
        "seed": args.seed,
        "out": str(out / "run"),
        "rooms": {"count": 2, "distances": [1.0], "t60_choices": [0.2, 0.3]},
        "dataset": {
            "counts": {"train": args.scenes, "val": max(args.scenes // 4, 1),
                       "test": max(args.scenes // 3, 2)},
            "babble": args.babble,
            "speech_manifest": str(speech),
            "babble_manifest": str(babble),
        },
        "train": {
            "epochs": 4,
            "batch_size": 4,
            "model": {"basis_size": 32, "tcn_blocks": 1, "tcn_channels": 16,
                      "enhancement": False, "doa_head": True},
        },
    }
    config_path = out / "config.json"
    config_path.write_text(json.dumps(config, indent=1))
    print(f"config written to {config_path}")

    run(["rooms", "--config", str(config_path)])
    run(["synth", "--config", str(config_path)])
    run(["train", "--config", str(config_path)])
    run(["eval", "--config", str(config_path), "--estimator", "passthrough"])
    ckpt = out / "run" / "checkpoints" / "classroom.ckpt"
    run(["eval", "--config", str(config_path), "--estimator", "checkpoint",
         "--checkpoint", str(ckpt)])
    run(["report", "--config", str(config_path), "--estimator", "checkpoint"])
    print(f"\ndone; reports under {out / 'run' / 'reports'}")


if __name__ == "__main__":
    main()

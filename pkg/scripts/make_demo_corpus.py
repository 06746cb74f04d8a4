#!/usr/bin/env python3
"""Generate the synthetic demo corpora (speech + babble) with manifests."""

import argparse
from pathlib import Path

from classroomsep.democorpus import make_demo_babble_corpus, make_demo_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="corpus", help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--children", type=int, default=4, help="child speakers per split")
    parser.add_argument("--adults", type=int, default=4, help="adult speakers per split")
    parser.add_argument("--utterances", type=int, default=3, help="utterances per speaker")
    args = parser.parse_args()

    out = Path(args.out)
    speech = make_demo_corpus(
        out / "speech", seed=args.seed, n_child=args.children,
        n_adult=args.adults, utterances_per_speaker=args.utterances,
    )
    babble = make_demo_babble_corpus(out / "babble", seed=args.seed + 1)
    print(f"speech manifest: {speech}")
    print(f"babble manifest: {babble}")


if __name__ == "__main__":
    main()

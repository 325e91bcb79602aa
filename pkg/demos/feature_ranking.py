"""Rank features on a planted task with all four selectors.

Columns 2, 7 and 11 drive the target; the rest are noise.

    python demos/feature_ranking.py [--seed 0]
"""

import argparse

from flowcast.featsel import (
    AutoencoderConfig,
    autoencoder_select,
    embedded_select,
    filter_select,
    wrapper_select,
)
from flowcast.forest import ForestConfig
from flowcast.synthetic import planted_features


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--k", type=int, default=4)
    args = parser.parse_args()

    X, y = planted_features(seed=args.seed)
    reports = [
        filter_select(X, y, args.k),
        wrapper_select(X, y, args.k),
        embedded_select(X, y, args.k, ForestConfig(seed=args.seed)),
        # unsupervised: ranks columns by how much the reconstruction needs them
        autoencoder_select(X, args.k, AutoencoderConfig(seed=args.seed)),
    ]
    for report in reports:
        top = ", ".join(f"{j}({report.scores[j]:.3f})" for j in report.selected)
        print(f"{report.method:12s} {top}")


if __name__ == "__main__":
    main()

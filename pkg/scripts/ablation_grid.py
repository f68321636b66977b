#!/usr/bin/env python3
"""Loss-weight ablation grid with repetition medians.

Sweeps the (alpha, beta) weighting of the L1 and correlation terms over the
standard five-point grid, repeating each cell with shifted seeds and
reporting per-cell medians.
"""

import argparse
import tempfile
from pathlib import Path

from dcvqe import data as data_io
from dcvqe.losses import LossConfig
from dcvqe.model import DCVQEConfig
from dcvqe.training import TrainConfig, run_repetitions

GRID = [(1.0, 0.0), (0.7, 0.3), (0.5, 0.5), (0.3, 0.7), (0.0, 1.0)]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--videos", type=int, default=150)
    parser.add_argument("--epochs", type=int, default=5)
    parser.add_argument("--repetitions", type=int, default=5)
    parser.add_argument("--seed", type=int, default=5)
    args = parser.parse_args()

    out = args.out or Path(tempfile.mkdtemp(prefix="dcvqe_ablate_"))
    manifest = data_io.synth_dataset(out, n_videos=args.videos, len_range=(30, 90),
                                     dim=32, seed=args.seed)
    cfg = DCVQEConfig(input_dim=32, model_dim=16, num_heads=4, num_layers=2,
                      base_clip_len=30, temporal_range=15, max_seq_len=600)

    print(f"{'alpha':>6s} {'beta':>6s} {'srcc':>8s} {'krcc':>8s} {'plcc':>8s} {'rmse':>8s}")
    for alpha, beta in GRID:
        train_cfg = TrainConfig(max_epochs=args.epochs, batch_size=8, learning_rate=1e-3,
                                loss=LossConfig(alpha, beta), seed=args.seed,
                                repetitions=args.repetitions)
        med = run_repetitions(manifest, cfg, train_cfg).median
        print(f"{alpha:6.1f} {beta:6.1f} {med.srcc:8.4f} {med.krcc:8.4f} "
              f"{med.plcc:8.4f} {med.rmse:8.4f}")


if __name__ == "__main__":
    main()

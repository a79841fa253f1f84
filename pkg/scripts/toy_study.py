"""Small mu sweep and module ablation on synthetic shapes.

Numbers from this script only check that the harness runs end to end; at
this scale they say nothing about the full-size model.
"""
import argparse
from pathlib import Path

from slenet.datapipe import write_synthetic_dataset
from slenet.pipeline import RunConfig, ablate, mu_sweep


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/toy_study")
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--width", type=int, default=16)
    parser.add_argument("--train", type=int, default=16)
    parser.add_argument("--test", type=int, default=8)
    parser.add_argument("--skip-sweep", action="store_true")
    parser.add_argument("--skip-ablation", action="store_true")
    args = parser.parse_args()

    out = Path(args.out)
    train_man = write_synthetic_dataset(out / "data", "train", args.train, size=args.size, seed=0)
    test_man = write_synthetic_dataset(out / "data", "test", args.test, size=args.size, seed=1)
    base = RunConfig(train_size=args.size, width=args.width, epochs=args.epochs, batch_size=8,
                     lr=2e-3, save_every=args.epochs)

    if not args.skip_sweep:
        for row in mu_sweep(base.replace(output_dir=str(out / "sweep")), train_man, test_man):
            print("mu", row)
    if not args.skip_ablation:
        for row in ablate(base.replace(output_dir=str(out / "ablation")), train_man, test_man):
            print("ablation", row)


if __name__ == "__main__":
    main()

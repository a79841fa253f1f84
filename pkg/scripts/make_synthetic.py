"""Write a folder dataset of noisy geometric shapes."""
import argparse

from slenet.datapipe import write_synthetic_dataset


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root")
    parser.add_argument("--train", type=int, default=32, help="number of training pairs")
    parser.add_argument("--test", type=int, default=16, help="number of test pairs")
    parser.add_argument("--size", type=int, default=352)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    for split, n, seed in (("train", args.train, args.seed), ("test", args.test, args.seed + 1)):
        if n:
            man = write_synthetic_dataset(args.root, split, n, size=args.size, seed=seed)
            print(f"{split}: {man.count} pairs in {args.root}/{split}")


if __name__ == "__main__":
    main()

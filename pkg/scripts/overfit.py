"""Overfit a handful of synthetic samples and score the model on them.

Defaults match the acceptance check: 8 samples, one batch, 200 iterations.
"""
import argparse
import json
import tempfile
import time
from pathlib import Path

from slenet.datapipe import write_synthetic_dataset
from slenet.pipeline import RunConfig, evaluate_model, train


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=None, help="output directory (default: temporary)")
    parser.add_argument("--samples", type=int, default=8)
    parser.add_argument("--size", type=int, default=352)
    parser.add_argument("--width", type=int, default=32)
    parser.add_argument("--lr", type=float, default=2e-3)
    parser.add_argument("--iters", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out or tempfile.mkdtemp(prefix="overfit_"))
    start = time.monotonic()
    man = write_synthetic_dataset(out / "data", "train", args.samples, size=args.size, seed=args.seed)
    cfg = RunConfig(train_size=args.size, width=args.width, lr=args.lr, batch_size=args.samples,
                    epochs=args.iters, augment=False, seed=args.seed, output_dir=str(out / "run"),
                    save_every=args.iters)
    result = train(cfg, man)
    report = evaluate_model(result.model, cfg, man, out / "eval")
    summary = {"final_loss": result.history[-1]["loss"], **report.means,
               "seconds": round(time.monotonic() - start, 1), "out": str(out)}
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()

"""Train the desk preset on synthetic phantoms and print training DSC.

    python scripts/learning_curve.py --cases 20 --epochs 100 --every 5
    python scripts/learning_curve.py --no-mem --csv musnet.csv

Data are native frame stacks from ``phantom.cohort`` (contrast 1.5, noise 0.3
by default), intensity-normalised per case.
"""

import argparse
import csv
import time

import numpy as np

from medmusnet import model as M
from medmusnet import phantom as P
from medmusnet import training as T


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cases", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--every", type=int, default=5, help="evaluate training DSC every k epochs")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=1000)
    ap.add_argument("--contrast", type=float, default=1.5)
    ap.add_argument("--noise", type=float, default=0.3)
    ap.add_argument("--no-mem", action="store_true", help="train the MEM-off ablation")
    ap.add_argument("--csv", help="write epoch, loss, dsc rows here")
    args = ap.parse_args()

    data = []
    for cfg in P.cohort(args.cases, base_seed=args.data_seed, contrast=args.contrast, noise_scale=args.noise):
        img, lab, _ = P.generate(cfg)
        data.append((T.normalize_intensity(img.frames).astype(np.float32), lab.frames.astype(np.int64)))

    model = M.build(M.desk_config(mem_enabled=not args.no_mem), seed=args.seed)
    print(f"{model.num_parameters()} parameters, {len(data)} cases of shape {data[0][0].shape}")
    rows = []
    t0 = time.perf_counter()

    def report(epoch, m, hist):
        dsc = None
        if (epoch + 1) % args.every == 0 or epoch + 1 == args.epochs:
            dsc = float(np.mean([d or 0.0 for d in T.training_dice(m, data)]))
        rows.append((epoch + 1, hist[-1].loss, dsc))
        tail = f"  dsc {dsc:.3f}" if dsc is not None else ""
        print(f"epoch {epoch + 1:4d}  loss {hist[-1].loss:.4f}{tail}  {time.perf_counter() - t0:.0f} s", flush=True)

    T.train(model, data, T.desk_train_config(epochs=args.epochs), seed=args.seed, callback=report)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "dsc"])
            w.writerows((e, f"{l:.6f}", "" if d is None else f"{d:.4f}") for e, l, d in rows)


if __name__ == "__main__":
    main()

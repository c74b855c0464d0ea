"""Synthetic benchmark: plain CNN versus linear interpolation on masked test dates.

    python3 scripts/benchmark.py                 # default recipe, 3 runs
    python3 scripts/benchmark.py --epochs 110 --batch 1 --patience 110 --augment
"""
import argparse
import csv
import sys
import time
from dataclasses import replace

from cloudpatch.benchmark import BenchmarkConfig, prepare, run_benchmark


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--runs", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--batch", type=int, default=None)
    ap.add_argument("--patience", type=int, default=None)
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--augment", action="store_true")
    ap.add_argument("--scene-seed", type=int, default=None)
    ap.add_argument("--csv", help="write one row per run here")
    args = ap.parse_args()
    cfg = BenchmarkConfig()
    overrides = {"n_runs": args.runs, "max_epochs": args.epochs, "batch_size": args.batch,
                 "early_stop_patience": args.patience, "lr": args.lr, "augment": args.augment or None}
    cfg = replace(cfg, train=replace(cfg.train, **{k: v for k, v in overrides.items() if v is not None}))
    if args.scene_seed is not None:
        cfg = replace(cfg, scene=replace(cfg.scene, seed=args.scene_seed))
    print(f"train config: {cfg.train}", file=sys.stderr)
    data = prepare(cfg)
    t0 = time.perf_counter()
    rows = []
    print("run  seed  epochs  mean_R  cnn_rmse   base_rmse  ratio   seconds")
    for run in range(cfg.n_runs):
        r = run_benchmark(cfg, run, data)
        rows.append(r)
        print(f"{run:3d}  {r.seed:4d}  {r.epochs:6d}  {r.mean_r:.4f}  {r.model_rmse:.6f}  {r.baseline_rmse:.6f}  {r.ratio:.4f}  {r.seconds:7.1f}", flush=True)
    total = time.perf_counter() - t0
    ok = all(r.mean_r > 0.8 and r.ratio <= 0.9 for r in rows)
    print(f"total {total / 60:.1f} min; R > 0.8 and ratio <= 0.9 on every run: {ok}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["seed", "epochs", "mean_r", "cnn_rmse", "baseline_rmse", "ratio", "seconds"])
            for r in rows:
                w.writerow([r.seed, r.epochs, repr(r.mean_r), repr(r.model_rmse), repr(r.baseline_rmse), repr(r.ratio), repr(r.seconds)])


if __name__ == "__main__":
    main()

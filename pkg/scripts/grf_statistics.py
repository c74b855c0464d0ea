"""Empirical variance and covariance-versus-lag of the mask field sampler.

    python3 scripts/grf_statistics.py --draws 500 --size 64
"""
import argparse

import numpy as np

from cloudpatch.maskgen import GrfConfig, sample_grf_batch


def lag_cov(draws: np.ndarray, lag: int) -> float:
    if lag == 0:
        return float(np.mean(draws**2))
    return 0.5 * float(np.mean(draws[:, :, :-lag] * draws[:, :, lag:]) + np.mean(draws[:, :-lag, :] * draws[:, lag:, :]))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--draws", type=int, default=500)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--sigma2", type=float, default=0.95)
    ap.add_argument("--range", type=float, default=0.4, dest="range_d")
    args = ap.parse_args()
    cfg = GrfConfig(variance_sigma2=args.sigma2, range_d=args.range_d)
    draws = sample_grf_batch(args.size, args.size, cfg, args.draws, np.random.default_rng(args.seed))
    per_pixel = (draws**2).mean(axis=0)
    print(f"mean per-pixel variance {per_pixel.mean():.4f} (target {cfg.variance_sigma2})")
    print(f"per-pixel variance range [{per_pixel.min():.4f}, {per_pixel.max():.4f}]")
    print(f"pixels within 10%: {np.mean(np.abs(per_pixel - cfg.variance_sigma2) < 0.1 * cfg.variance_sigma2):.1%}")
    print("lag_px  lag  empirical  model")
    for lag in range(0, args.size // 2 + 1, 4):
        dist = lag / args.size
        model = cfg.variance_sigma2 * np.exp(-dist / cfg.range_d)
        print(f"{lag:6d}  {dist:.3f}  {lag_cov(draws, lag):9.4f}  {model:.4f}")


if __name__ == "__main__":
    main()

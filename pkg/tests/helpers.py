"""Shared test oracles. Nothing here calls the analytic backward passes."""
import numpy as np

FD_STEP = 1e-5
FD_TOL = 1e-4


def numerical_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation, scaled by the largest gradient magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def naive_masked_mse(y_true, y_pred, vm) -> float:
    """Explicit loop over every (n, i, j, c) position."""
    num = 0.0
    den = 0
    n, h, w, c = y_true.shape
    for a in range(n):
        for i in range(h):
            for j in range(w):
                for k in range(c):
                    if vm[a, i, j, k] == 1 and not np.isnan(y_true[a, i, j, k]):
                        num += (float(y_true[a, i, j, k]) - float(y_pred[a, i, j, k])) ** 2
                        den += 1
    if den == 0:
        return None
    return num / den


def naive_conv3x3(x, w, b):
    """Direct zero-padded 3x3 convolution by loops."""
    n, h, wd, c = x.shape
    out = np.zeros((n, h, wd, w.shape[3]))
    for a in range(n):
        for i in range(h):
            for j in range(wd):
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < wd:
                            out[a, i, j] += x[a, ii, jj] @ w[di, dj]
    return out + b

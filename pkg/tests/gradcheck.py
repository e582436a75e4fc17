"""Central finite differences, kept independent of the autodiff code paths."""
import numpy as np

EPS = 1e-5


def numeric_grad(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """d f / d x for scalar f evaluated on a perturbed copy of x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        hi = f()
        x[i] = orig - eps
        lo = f()
        x[i] = orig
        g[i] = (hi - lo) / (2 * eps)
    return g


def directional(f, x: np.ndarray, v: np.ndarray, eps: float = EPS) -> float:
    orig = x.copy()
    x += eps * v
    hi = f()
    x[...] = orig - eps * v
    lo = f()
    x[...] = orig
    return (hi - lo) / (2 * eps)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)

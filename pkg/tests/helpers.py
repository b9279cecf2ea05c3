from pathlib import Path

import numpy as np

from scopf_proxy.core.qp_solver import QuadraticProgram


def write_case(tmp_path: Path, text: str, name: str = "case_tmp.m") -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def random_qp(rng: np.random.Generator, n: int = 6, m_eq: int = 2, m_ineq: int = 8) -> QuadraticProgram:
    """Strictly convex, feasible by construction (x0 satisfies every row with slack)."""
    a = rng.normal(size=(n, n))
    Q = a @ a.T + n * np.eye(n)
    q = rng.normal(size=n)
    x0 = rng.normal(size=n)
    E = rng.normal(size=(m_eq, n))
    G = rng.normal(size=(m_ineq, n))
    h = G @ x0 + rng.uniform(0.1, 1.0, size=m_ineq)
    return QuadraticProgram.create(Q=Q, q=q, E=E, e=E @ x0, G=G, h=h)


def central_difference(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for i in range(len(x)):
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (fn(up) - fn(down)) / (2 * step)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))

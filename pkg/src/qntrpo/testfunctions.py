"""Analytic test objectives returning ``(f, grad f)``."""

import numpy as np


def quadratic(theta, A=None):
    """``0.5 theta' A theta`` (``A = I`` by default)."""
    theta = np.asarray(theta, dtype=np.float64)
    if A is None:
        return 0.5 * float(theta @ theta), theta.copy()
    Ax = A @ theta
    return 0.5 * float(theta @ Ax), Ax


def rosenbrock(theta):
    """Extended (chained) Rosenbrock function; minimum 0 at all-ones."""
    x = np.asarray(theta, dtype=np.float64)
    a = x[1:] - x[:-1] ** 2
    b = 1.0 - x[:-1]
    f = float(np.sum(100.0 * a**2 + b**2))
    g = np.zeros_like(x)
    g[:-1] = -400.0 * x[:-1] * a - 2.0 * b
    g[1:] += 200.0 * a
    return f, g


def rosenbrock_hessian(theta):
    x = np.asarray(theta, dtype=np.float64)
    n = x.shape[0]
    H = np.zeros((n, n))
    for i in range(n - 1):
        H[i, i] += 1200.0 * x[i] ** 2 - 400.0 * x[i + 1] + 2.0
        H[i, i + 1] += -400.0 * x[i]
        H[i + 1, i] += -400.0 * x[i]
        H[i + 1, i + 1] += 200.0
    return H


REGISTRY = {
    "quadratic": quadratic,
    "rosenbrock": rosenbrock,
}

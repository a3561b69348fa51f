"""Independent reference implementations used only by the tests.

None of these call into the package's solvers: the linear algebra goes
through row-by-row least squares (numpy lstsq) or a hand-written Gaussian
elimination, so agreement is a real cross-check.
"""
import numpy as np


def gauss_solve(A, b):
    """Solve A x = b by Gaussian elimination with partial pivoting."""
    A = np.array(A, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    if b.ndim == 1:
        b = b[:, None]
    n = A.shape[0]
    M = np.hstack([A, b])
    for col in range(n):
        piv = col + int(np.argmax(np.abs(M[col:, col])))
        M[[col, piv]] = M[[piv, col]]
        for r in range(col + 1, n):
            M[r] -= M[r, col] / M[col, col] * M[col]
    x = np.zeros_like(b)
    for r in range(n - 1, -1, -1):
        x[r] = (M[r, n:] - M[r, r + 1:n] @ x[r + 1:]) / M[r, r]
    return x


def rowwise_lstsq(design, targets):
    """Each output row w minimises ||design @ w - targets[:, row]||^2."""
    sol, *_ = np.linalg.lstsq(design, targets, rcond=None)
    return sol.T


def refine_oracle(W, Ef, Eg, priors, anchor=None):
    """Minimiser of sum ||W' f - W g||^2 + sum_k lam_k sum_p ||(W' - W) p||^2
    (+ anchor * ||W' - W||^2), assembled as a stacked least squares."""
    d1, d2 = W.shape
    rows, tgts = [Ef], [Eg @ W.T]
    for lam, P in priors:
        rows.append(np.sqrt(lam) * P)
        tgts.append(np.sqrt(lam) * P @ W.T)
    if anchor is not None:
        rows.append(np.sqrt(anchor) * np.eye(d2))
        tgts.append(np.sqrt(anchor) * W.T)
    return rowwise_lstsq(np.vstack(rows), np.vstack(tgts))


def fuse_oracle(W, W_ref, deltas, maps, lam, P):
    rows, tgts = [], []
    for d, E in zip(deltas, maps):
        rows.append(E)
        tgts.append(E @ (W_ref + d).T)
    if P is not None and lam > 0:
        rows.append(np.sqrt(lam) * P)
        tgts.append(np.sqrt(lam) * P @ W.T)
    return rowwise_lstsq(np.vstack(rows), np.vstack(tgts))


def rel_fro(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def central_difference(f, x, h=1e-6):
    """Gradient of scalar f at array x by central differences."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def sigmoid_pdf_oracle(T, t1, t2, gamma):
    """Difference of logistic functions evaluated with math.exp, normalised."""
    import math
    vals = []
    for t in range(1, T + 1):
        a = 1.0 / (1.0 + math.exp(-gamma * (t - t1)))
        b = 1.0 / (1.0 + math.exp(-gamma * (t - t2)))
        vals.append(a - b)
    s = math.fsum(vals)
    return np.array([v / s for v in vals])

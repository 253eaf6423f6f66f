"""Dense two-phase simplex and primal active-set QP for desk-scale problems.

Problem sizes here are tens of variables and a few hundred constraints, so
full-tableau simplex with Bland's rule (no cycling) and a dense KKT active
set are simpler and more predictable than wiring in an external solver.
"""

from __future__ import annotations

import numpy as np

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

_EPS = 1e-10


class SolverFailure(Exception):
    pass


def _pivot(tab, basis, row, col):
    tab[row] /= tab[row, col]
    for r in range(tab.shape[0]):
        if r != row and tab[r, col] != 0.0:
            tab[r] -= tab[r, col] * tab[row]
    basis[row] = col


def _run_simplex(tab, basis, n_cols, max_iter):
    """Minimize the objective in the last tableau row over columns < n_cols.
    Bland's rule on both the entering and leaving choices."""
    for _ in range(max_iter):
        obj = tab[-1, :n_cols]
        enter = -1
        for j in range(n_cols):
            if obj[j] < -_EPS:
                enter = j
                break
        if enter < 0:
            return OPTIMAL
        ratios = []
        for r in range(tab.shape[0] - 1):
            a = tab[r, enter]
            if a > _EPS:
                ratios.append(((tab[r, -1] / a), basis[r], r))
        if not ratios:
            return UNBOUNDED
        _, _, row = min(ratios, key=lambda t: (t[0], t[1]))
        _pivot(tab, basis, row, enter)
    raise SolverFailure("simplex iteration limit")


def simplex_solve(c, a_ub, b_ub, max_iter=20000):
    """min c.x subject to a_ub.x <= b_ub, x >= 0.

    Returns (x, objective, status). x is None unless status == 'optimal'.
    """
    c = np.asarray(c, dtype=float)
    a = np.atleast_2d(np.asarray(a_ub, dtype=float))
    b = np.asarray(b_ub, dtype=float).copy()
    m, n = a.shape if a.size else (0, len(c))
    if m == 0:
        # only x >= 0 constrains; bounded iff c >= 0
        if np.all(c >= -_EPS):
            return np.zeros(n), 0.0, OPTIMAL
        return None, None, UNBOUNDED

    # rows with negative b get sign-flipped surplus + artificial variables
    neg = b < 0
    a = a.copy()
    a[neg] *= -1.0
    b[neg] *= -1.0
    n_art = int(neg.sum())

    slack = np.eye(m)
    slack[neg] *= -1.0  # surplus for flipped rows
    art = np.zeros((m, n_art))
    for k, r in enumerate(np.flatnonzero(neg)):
        art[r, k] = 1.0

    n_cols = n + m + n_art
    tab = np.zeros((m + 1, n_cols + 1))
    tab[:m, :n] = a
    tab[:m, n : n + m] = slack
    tab[:m, n + m :n_cols] = art
    tab[:m, -1] = b

    basis = [0] * m
    art_cols = {}
    for r in range(m):
        if neg[r]:
            col = n + m + list(np.flatnonzero(neg)).index(r)
            basis[r] = col
            art_cols[r] = col
        else:
            basis[r] = n + r

    if n_art:
        # phase 1: minimize the artificial sum
        tab[-1, n + m : n_cols] = 1.0
        for r, col in art_cols.items():
            tab[-1] -= tab[r]
        status = _run_simplex(tab, basis, n_cols, max_iter)
        if status != OPTIMAL or tab[-1, -1] < -1e-7:
            raise SolverFailure("phase-1 simplex failed")
        if -tab[-1, -1] > 1e-7:
            return None, None, INFEASIBLE
        # drive any artificial still in the basis out of it
        for r in range(m):
            if basis[r] >= n + m:
                for j in range(n + m):
                    if abs(tab[r, j]) > _EPS:
                        _pivot(tab, basis, r, j)
                        break
        tab[:, n + m : n_cols] = 0.0
        n_cols = n + m
        tab[-1, :] = 0.0

    tab[-1, :n] = c
    for r in range(m):
        if basis[r] < n:
            tab[-1] -= c[basis[r]] * tab[r]
    status = _run_simplex(tab, basis, n_cols, max_iter)
    if status != OPTIMAL:
        return None, None, status
    x = np.zeros(n)
    for r in range(m):
        if basis[r] < n:
            x[basis[r]] = tab[r, -1]
    return x, float(c @ x), OPTIMAL


def active_set_qp(h, g, a_ub, b_ub, x0, max_iter=500, tol=1e-9):
    """min 0.5 x.H.x + g.x subject to a_ub.x <= b_ub, from feasible x0.

    H must be symmetric positive definite (callers regularize semidefinite
    blocks). Returns the optimal x.
    """
    h = np.asarray(h, dtype=float)
    g = np.asarray(g, dtype=float)
    a = np.atleast_2d(np.asarray(a_ub, dtype=float))
    b = np.asarray(b_ub, dtype=float)
    x = np.asarray(x0, dtype=float).copy()
    m = a.shape[0] if a.size else 0
    if m and np.any(a @ x - b > 1e-7):
        raise SolverFailure("active-set start point infeasible")

    work = [i for i in range(m) if a[i] @ x - b[i] > -tol]

    for _ in range(max_iter):
        nw = len(work)
        kkt = np.zeros((len(x) + nw, len(x) + nw))
        kkt[: len(x), : len(x)] = h
        rhs = np.zeros(len(x) + nw)
        rhs[: len(x)] = -(g + h @ x)
        if nw:
            aw = a[work]
            kkt[: len(x), len(x) :] = aw.T
            kkt[len(x) :, : len(x)] = aw
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            # dependent working set: fall back to least squares
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        p = sol[: len(x)]
        lam = sol[len(x) :]

        if np.max(np.abs(p)) <= tol:
            if nw == 0 or np.all(lam >= -1e-9):
                return x
            drop = work[int(np.argmin(lam))]
            work.remove(drop)
            continue

        alpha = 1.0
        blocker = -1
        for i in range(m):
            if i in work:
                continue
            ap = a[i] @ p
            if ap > tol:
                step = (b[i] - a[i] @ x) / ap
                if step < alpha - 1e-14:
                    alpha = max(step, 0.0)
                    blocker = i
        x = x + alpha * p
        if blocker >= 0:
            work.append(blocker)
    raise SolverFailure("active-set iteration limit")

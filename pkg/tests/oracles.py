"""Independent reference computations used across the test suite.

Everything here is deliberately brute force (enumeration, dense algebra,
generic NLP) and shares no search logic with the package under test.
"""

from itertools import combinations

import numpy as np
import scipy.sparse as sp

from platoonbench.mip import MixedIntegerProgram


def vertex_enumeration_lp(c, A_ub, b_ub, lb, ub, tol=1e-9):
    """Solve min c'x over {A_ub x <= b_ub, lb <= x <= ub} by enumerating all
    basis systems of n active rows. Returns (status, x, objective)."""
    c = np.asarray(c, dtype=float)
    n = c.size
    rows = [np.asarray(A_ub, dtype=float)] if len(b_ub) else []
    rhs = [np.asarray(b_ub, dtype=float)] if len(b_ub) else []
    eye = np.eye(n)
    rows += [eye, -eye]
    rhs += [np.asarray(ub, dtype=float), -np.asarray(lb, dtype=float)]
    G = np.vstack(rows)
    h = np.concatenate(rhs)
    m = G.shape[0]

    best_x, best_obj = None, np.inf
    feasible_seen = False
    for idx in combinations(range(m), n):
        sub = G[list(idx)]
        if abs(np.linalg.det(sub)) < 1e-10:
            continue
        x = np.linalg.solve(sub, h[list(idx)])
        if np.all(G @ x <= h + tol):
            feasible_seen = True
            obj = float(c @ x)
            if obj < best_obj - 1e-15:
                best_obj, best_x = obj, x
    if not feasible_seen:
        return "infeasible", None, np.inf
    return "optimal", best_x, best_obj


def reference_qp(H, c, A_ub, b_ub, A_eq, b_eq, lb, ub, x0=None):
    """Solve a convex QP with scipy's SLSQP (a different algorithm family
    from the production interior-point path)."""
    from scipy.optimize import minimize

    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    n = c.size
    cons = []
    if len(b_ub):
        A = np.asarray(A_ub, dtype=float)
        b = np.asarray(b_ub, dtype=float)
        cons.append({"type": "ineq", "fun": lambda x: b - A @ x,
                     "jac": lambda x: -A})
    if len(b_eq):
        Ae = np.asarray(A_eq, dtype=float)
        be = np.asarray(b_eq, dtype=float)
        cons.append({"type": "eq", "fun": lambda x: Ae @ x - be,
                     "jac": lambda x: Ae})
    start = np.clip(np.zeros(n) if x0 is None else x0, lb, ub)
    res = minimize(lambda x: 0.5 * x @ H @ x + c @ x,
                   start, jac=lambda x: H @ x + c,
                   bounds=list(zip(lb, ub)), constraints=cons,
                   method="SLSQP", options={"maxiter": 500, "ftol": 1e-12})
    return res.x, 0.5 * res.x @ H @ res.x + float(c @ res.x)


def random_lp(rng, n=5, m=8):
    """Feasible bounded LP with box bounds and a known interior point."""
    c = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    x0 = rng.uniform(-0.5, 0.5, size=n)
    b = A @ x0 + rng.uniform(0.1, 1.0, size=m)
    lb = np.full(n, -1.0)
    ub = np.full(n, 1.0)
    return c, A, b, lb, ub


def random_milp(rng, max_bin=8, max_cont=12):
    """Feasible MILP with a mix of binaries and bounded continuous vars."""
    nb = int(rng.integers(1, max_bin + 1))
    nc = int(rng.integers(0, max_cont + 1))
    n = nb + nc
    m = int(rng.integers(2, 12))
    c = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    x0 = np.concatenate([rng.integers(0, 2, size=nb).astype(float),
                         rng.uniform(0, 1, size=nc)])
    b = A @ x0 + rng.uniform(0.05, 1.0, size=m)
    binary = np.zeros(n, dtype=bool)
    binary[:nb] = True
    return MixedIntegerProgram(
        n=n, c=c, A_ub=sp.csr_matrix(A), b_ub=b, A_eq=None, b_eq=[],
        lb=np.zeros(n), ub=np.ones(n), binary=binary)


def random_miqp(rng, max_bin=6, max_cont=8):
    """Feasible convex MIQP (diagonal-dominant PSD quadratic)."""
    p = random_milp(rng, max_bin=max_bin, max_cont=max_cont)
    n = p.n
    L = rng.normal(size=(n, n)) * 0.4
    H = L @ L.T + np.eye(n) * rng.uniform(0.2, 1.5)
    return MixedIntegerProgram(
        n=n, c=p.c, A_ub=p.A_ub, b_ub=p.b_ub, A_eq=None, b_eq=[],
        lb=p.lb, ub=p.ub, binary=p.binary, H=sp.csr_matrix(H))

"""Gromov-Wasserstein discrepancy between two similarity matrices.

The objective, for a coupling ``pi`` with marginals ``(mu, nu)``, is::

    sum_{i,j,k,l} (Ss[i, j] - St[k, l])**2 * pi[i, k] * pi[j, l]

Minimisation runs in two phases:

1. Entropic projected gradient (mirror descent): the coupling is repeatedly
   replaced by the Sinkhorn projection of ``exp(-grad / epsilon)``.  This
   finds the basin of a good local optimum from the product coupling.
2. Conditional-gradient polishing on the *unregularised* objective: a linear
   program gives the descent vertex and an exact quadratic line search the
   step.  This removes the entropic blur, so identical graphs reach cost 0.

The reported cost is always the exact objective evaluated at the returned
plan, whatever the quality of the minimisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import ConfigError, DegenerateInputError, ShapeMismatchError

MARGINAL_TOL = 1e-8


@dataclass(frozen=True)
class GwConfig:
    epsilon: float = 0.05
    outer_iters: int = 100
    sinkhorn_iters: int = 200
    tol: float = 1e-7
    seed: int = 0
    restarts: int = 0
    polish_iters: int = 50
    # The entropic phase only has to land in the right basin; polishing
    # does the fine convergence, so its stopping rule is looser.
    entropic_tol: float = 1e-5

    def __post_init__(self):
        if not (self.epsilon > 0 and self.outer_iters > 0 and self.sinkhorn_iters > 0 and self.tol > 0):
            raise ConfigError(f"GwConfig values must be positive: {self}")
        if self.restarts < 0 or self.polish_iters < 0:
            raise ConfigError("restarts and polish_iters must be >= 0")


@dataclass(frozen=True)
class TransportPlan:
    matrix: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    converged: bool = True
    iterations: int = 0

    def marginal_residual(self) -> float:
        return float(
            max(
                np.abs(self.matrix.sum(axis=1) - self.row_marginal).max(),
                np.abs(self.matrix.sum(axis=0) - self.col_marginal).max(),
            )
        )


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def _check_marginal(w, n, name):
    w = uniform(n) if w is None else np.asarray(w, dtype=np.float64).ravel()
    if w.size != n:
        raise ShapeMismatchError(f"{name} has length {w.size}, expected {n}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError(f"{name} must be a probability vector")
    return w


def _check_square_symmetric(s, name):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeMismatchError(f"{name} must be square, got {s.shape}")
    if np.abs(s - s.T).max(initial=0.0) > 1e-9:
        raise ConfigError(f"{name} is not symmetric")
    return s


# ----------------------------------------------------------------- objective


def tensor_product(Ss: np.ndarray, St: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``(L ⊗ X)[i, k] = sum_{j,l} (Ss[i,j] - St[k,l])**2 X[j,l]`` using X's own marginals."""
    a = X.sum(axis=1)
    b = X.sum(axis=0)
    return (Ss**2 @ a)[:, None] + (St**2 @ b)[None, :] - 2.0 * Ss @ X @ St.T


def gw_objective(Ss, St, plan) -> float:
    """Exact square-loss GW objective at a fixed coupling."""
    pi = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    Ss = np.asarray(Ss, dtype=np.float64)
    St = np.asarray(St, dtype=np.float64)
    if pi.shape != (Ss.shape[0], St.shape[0]):
        raise ShapeMismatchError(f"plan shape {pi.shape} does not match graphs {Ss.shape[0]}x{St.shape[0]}")
    return float(np.sum(tensor_product(Ss, St, pi) * pi))


def gw_gradient_source(Ss, St, plan) -> np.ndarray:
    """Derivative of the objective w.r.t. every entry of ``Ss``, plan held fixed."""
    pi = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    a = pi.sum(axis=1)
    return 2.0 * (np.asarray(Ss) * np.outer(a, a) - pi @ np.asarray(St) @ pi.T)


# ------------------------------------------------------------------ sinkhorn


def sinkhorn_project(kernel, mu, nu, iters: int = 200, tol: float = 1e-9) -> TransportPlan:
    """Scale a positive kernel to the marginals (mu, nu) by alternating row/column updates.

    Convergence is declared when, after a column update, the row sums are
    within ``tol`` of ``mu`` (max-abs).  ``converged`` is False when the
    iteration cap was hit first.
    """
    K = np.asarray(kernel, dtype=np.float64)
    if not np.all(K > 0):
        raise DegenerateInputError("sinkhorn_project: kernel must be strictly positive")
    mu = _check_marginal(mu, K.shape[0], "mu")
    nu = _check_marginal(nu, K.shape[1], "nu")
    v = np.ones(K.shape[1])
    u = np.ones(K.shape[0])
    converged = False
    it = 0
    for it in range(1, iters + 1):
        u = mu / (K @ v)
        v = nu / (K.T @ u)
        err = np.abs(u * (K @ v) - mu).max()
        if err <= tol:
            converged = True
            break
    return TransportPlan(u[:, None] * K * v[None, :], mu, nu, converged, it)


def _sinkhorn_scaling(cost, mu, nu, eps, iters, tol, v=None):
    """Sinkhorn on ``exp(-cost / eps)`` with a warm-startable column scaling.

    ``cost`` must be shifted so its minimum is 0; the kernel then lies in
    ``(exp(-max / eps), 1]`` which float64 represents for the cost ranges
    seen here (similarities in [-1, 1]).  Falls back to the log domain if
    the kernel underflows.
    """
    K = np.exp(-cost / eps)
    if not np.all(K > 0):
        return _sinkhorn_log(cost, mu, nu, eps, iters, tol), None
    # (u, v) and (c u, v / c) give the same plan; pin the scale so warm
    # starts cannot drift towards overflow across outer iterations.
    v = np.ones_like(nu) if v is None else v / v.max()
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        for it in range(iters):
            u = mu / (K @ v)
            v = nu / (K.T @ u)
            if it % 5 == 4 and np.abs(u * (K @ v) - mu).max() <= tol:
                break
        plan = u[:, None] * K * v[None, :]
    if not np.all(np.isfinite(plan)):
        return _sinkhorn_log(cost, mu, nu, eps, iters, tol), None
    return plan, v


def _sinkhorn_log(cost, mu, nu, eps, iters, tol):
    log_mu, log_nu = np.log(mu), np.log(nu)
    f = np.zeros_like(mu)
    g = np.zeros_like(nu)

    def lse(a, axis):
        m = a.max(axis=axis, keepdims=True)
        return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)

    for _ in range(iters):
        f = eps * (log_mu - lse((g[None, :] - cost) / eps, axis=1))
        g = eps * (log_nu - lse((f[:, None] - cost) / eps, axis=0))
        if np.abs(np.exp((f[:, None] + g[None, :] - cost) / eps).sum(axis=1) - mu).max() <= tol:
            break
    return np.exp((f[:, None] + g[None, :] - cost) / eps)


def round_to_marginals(pi, mu, nu) -> np.ndarray:
    """Nonnegative coupling with exactly the requested marginals, close to ``pi``.

    Rows and columns that overshoot are scaled down, then the remaining
    deficit is added back as a rank-one product (Altschuler et al. rounding).
    """
    pi = np.maximum(np.asarray(pi, dtype=np.float64), 0.0)
    rows = pi.sum(axis=1)
    pi = pi * np.minimum(1.0, np.divide(mu, rows, out=np.ones_like(mu), where=rows > 0))[:, None]
    cols = pi.sum(axis=0)
    pi = pi * np.minimum(1.0, np.divide(nu, cols, out=np.ones_like(nu), where=cols > 0))[None, :]
    err_r = mu - pi.sum(axis=1)
    err_c = nu - pi.sum(axis=0)
    total = err_r.sum()
    if total > 0:
        pi = pi + np.outer(err_r, err_c) / total
    return pi


# -------------------------------------------------------------- linear oracle


def _lp_vertex(cost, mu, nu) -> np.ndarray:
    """Optimal transport vertex for a linear cost (exact up to round-off)."""
    ns, nt = cost.shape
    rows = np.kron(np.eye(ns), np.ones((1, nt)))
    cols = np.kron(np.ones((1, ns)), np.eye(nt))
    A = np.vstack([rows, cols[:-1]])
    b = np.concatenate([mu, nu[:-1]])
    res = linprog(
        cost.ravel(),
        A_eq=A,
        b_eq=b,
        bounds=(0, None),
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        return None
    x = np.maximum(res.x, 0.0)
    support = x > 1e-13
    # Re-solve the equality system on the basis support to clean solver slack.
    full = np.vstack([rows, cols])
    sol, *_ = np.linalg.lstsq(full[:, support], np.concatenate([mu, nu]), rcond=None)
    if np.all(sol >= 0):
        x = np.zeros_like(x)
        x[support] = sol
    return round_to_marginals(x.reshape(ns, nt), mu, nu)


# --------------------------------------------------------------------- solver


def _entropic_phase(Ss, St, mu, nu, pi, cfg):
    v = None
    it = 0
    for it in range(1, cfg.outer_iters + 1):
        grad = 2.0 * tensor_product(Ss, St, pi)
        new, v = _sinkhorn_scaling(grad - grad.min(), mu, nu, cfg.epsilon, cfg.sinkhorn_iters, cfg.tol, v)
        delta = np.abs(new - pi).max()
        pi = new
        if delta <= cfg.entropic_tol:
            break
    return round_to_marginals(pi, mu, nu), it


def _tangent_directions(Ss, St):
    """Rank-one zero-marginal directions ``u v^T`` ordered by decreasing ``(u'Ss u)(v'St v)``.

    Along such a direction the objective's curvature is ``-2 (u'Ss u)(v'St v)``,
    so the leading entries are the most negative-curvature moves.
    """
    def centred_eig(S):
        n = S.shape[0]
        P = np.eye(n) - 1.0 / n
        w, V = np.linalg.eigh(P @ S @ P)
        keep = np.abs(V.sum(axis=0)) < 1e-8 * np.sqrt(n)
        return w[keep], V[:, keep]

    ws, Us = centred_eig(Ss)
    wt, Vt = centred_eig(St)
    pairs = [(ws[a] * wt[b], a, b) for a in range(ws.size) for b in range(wt.size)]
    pairs.sort(key=lambda p: -p[0])
    return [(prod, np.outer(Us[:, a], Vt[:, b])) for prod, a, b in pairs if prod > 0]


def _escape_saddle(Ss, St, mu, nu, pi, f_pi, grad):
    """Step along a negative-curvature tangent direction up to the feasibility boundary."""
    for _, d in _tangent_directions(Ss, St)[:4]:
        lin = float(np.sum(grad * d))
        if lin > 0:
            d = -d
        neg = d < 0
        if not neg.any():
            continue
        alpha = float(np.min(pi[neg] / -d[neg]))
        if alpha <= 0:
            continue
        trial = round_to_marginals(pi + alpha * d, mu, nu)
        val = gw_objective(Ss, St, trial)
        if val < f_pi - 1e-12 * max(1.0, abs(f_pi)):
            return trial, val
    return None


def _polish(Ss, St, mu, nu, pi, cfg):
    f_pi = gw_objective(Ss, St, pi)
    gap = np.inf
    escapes = 0
    for _ in range(cfg.polish_iters):
        grad = 2.0 * tensor_product(Ss, St, pi)
        vertex = _lp_vertex(grad, mu, nu)
        if vertex is None:
            break
        d = vertex - pi
        gap = max(-float(np.sum(grad * d)), 0.0)
        if gap <= cfg.tol * max(1.0, abs(f_pi)):
            step = _escape_saddle(Ss, St, mu, nu, pi, f_pi, grad) if escapes < 3 else None
            if step is None:
                break
            escapes += 1
            pi, f_pi = step
            continue
        a = float(np.sum(tensor_product(Ss, St, d) * d))
        candidates = [1.0]
        if a > 0:
            candidates.append(float(np.clip(gap / (2.0 * a), 0.0, 1.0)))
        best_alpha, best_val = 0.0, f_pi
        for alpha in candidates:
            trial = vertex if alpha == 1.0 else pi + alpha * d
            val = gw_objective(Ss, St, trial)
            if val < best_val:
                best_alpha, best_val = alpha, val
        if best_alpha == 0.0:
            break
        pi = vertex if best_alpha == 1.0 else round_to_marginals(pi + best_alpha * d, mu, nu)
        f_pi = gw_objective(Ss, St, pi)
    return pi, gap


def _solve_from(Ss, St, mu, nu, pi0, cfg):
    pi, iters = _entropic_phase(Ss, St, mu, nu, pi0, cfg)
    gap = np.nan
    if cfg.polish_iters:
        pi, gap = _polish(Ss, St, mu, nu, pi, cfg)
    return pi, iters, gap


def _restart_couplings(mu, nu, cfg):
    """Seeded random starts, drawn in an orientation-independent way.

    Matrices are drawn with shape (min(n), max(n)) and symmetrised when
    square, so solving (Ss, St) or (St, Ss) uses transposes of the same starts.
    """
    rng = np.random.default_rng(cfg.seed)
    ns, nt = mu.size, nu.size
    lo, hi = sorted((ns, nt))
    starts = []
    for _ in range(cfg.restarts):
        R = rng.uniform(0.05, 1.0, size=(lo, hi))
        if lo == hi:
            R = 0.5 * (R + R.T)
        if (ns, nt) != (lo, hi):
            R = R.T
        starts.append(sinkhorn_project(R, mu, nu, iters=1000, tol=1e-12).matrix)
    return starts


def gw_discrepancy(Ss, St, mu=None, nu=None, cfg: GwConfig = GwConfig()):
    """Approximate minimiser of the GW objective; returns ``(cost, TransportPlan)``.

    The problem is non-convex: the plan is a local optimum reached from the
    product coupling (plus ``cfg.restarts`` seeded random couplings, keeping
    the best).  ``cost`` is the exact objective at the returned plan.
    """
    Ss = _check_square_symmetric(Ss, "Ss")
    St = _check_square_symmetric(St, "St")
    mu = _check_marginal(mu, Ss.shape[0], "mu")
    nu = _check_marginal(nu, St.shape[0], "nu")

    starts = [np.outer(mu, nu)] + _restart_couplings(mu, nu, cfg)

    # Solve in both orientations and keep the better plan: the objective is
    # symmetric under swapping the graphs, and so is the returned cost.
    candidates = []
    for pi0 in starts:
        pi, iters, gap = _solve_from(Ss, St, mu, nu, pi0, cfg)
        candidates.append((gw_objective(Ss, St, pi), pi, iters, gap))
        piT, iters, gap = _solve_from(St, Ss, nu, mu, pi0.T, cfg)
        candidates.append((gw_objective(Ss, St, piT.T), piT.T, iters, gap))
    cost, pi, iters, gap = min(candidates, key=lambda c: c[0])
    residual = max(np.abs(pi.sum(axis=1) - mu).max(), np.abs(pi.sum(axis=0) - nu).max())
    stationary = np.isnan(gap) or gap <= cfg.tol * max(1.0, cost)
    return cost, TransportPlan(pi, mu, nu, bool(residual <= MARGINAL_TOL and stationary), iters)

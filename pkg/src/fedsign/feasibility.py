"""Multi-client signature feasibility.

Clients' extraction matrices stack into U (columns = all extraction
directions) and a signed variant U~ whose column (k, j) carries client
k's bit j as its sign.  A common parameter vector embeds every signature
strictly iff W^T U~ > 0 has a solution, and by Gordan's alternative
exactly one of the following holds:

* some W satisfies W^T U~ > 0          (feasibility certificate W), or
* some y >= 0, y != 0 has U~ y = 0     (infeasibility certificate y).

`decide` searches for both certificates at once: a perceptron iteration
for W (its convergence is the constructive content of the feasible
branch) and projected-gradient nonnegative least squares over the
simplex for y.  Both certificates are cheap to re-verify; an exhausted
iteration budget reports Unknown.

Three sufficient conditions guarantee the feasible branch: full column
rank of U, an all-positive row of U~, or an entrywise-positive Gram
matrix of U~.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import KeyMismatchError
from .watermark import default_selector, flatten_selected

RANK_TOL = 1e-10
STRICT_FLOOR = 1e-9


@dataclass
class StackedExtractors:
    u: np.ndarray        # M x (total bits)
    u_tilde: np.ndarray  # signed columns
    n_keys: int

    @property
    def n_cols(self):
        return self.u.shape[1]


@dataclass
class FeasibilityReport:
    cond_rank: bool
    cond_positive_row: bool
    cond_gram_positive: bool
    status: str  # feasible | infeasible | unknown
    w: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    margin: Optional[float] = None         # min_j (W^T U~)_j when feasible
    nnls_residual: Optional[float] = None  # max |U~ y| when infeasible

    def summary(self):
        conds = (f"rank={'Y' if self.cond_rank else 'n'} "
                 f"positive_row={'Y' if self.cond_positive_row else 'n'} "
                 f"gram_positive={'Y' if self.cond_gram_positive else 'n'}")
        if self.status == "feasible":
            return f"{conds} status=Feasible margin={self.margin:.3e}"
        if self.status == "infeasible":
            return f"{conds} status=Infeasible residual={self.nnls_residual:.3e}"
        return f"{conds} status=Unknown"


# ---------------------------------------------------------------------------
# stacking

def stack(keys):
    """Column-stack all clients' extraction matrices (client ascending,
    bit ascending) and apply bit signs for the signed variant."""
    keys = sorted(keys, key=lambda k: k.client_id)
    if not keys:
        raise KeyMismatchError("no keys to stack")
    selector = keys[0].extractor.selector
    pool = keys[0].extractor.pool_size
    for key in keys[1:]:
        if key.extractor.selector != selector or key.extractor.pool_size != pool:
            raise KeyMismatchError("keys use different parameter selectors")
    cols = [key.extractor.dense() for key in keys]
    u = np.concatenate(cols, axis=1)
    signs = np.concatenate([key.bits.astype(np.float64) for key in keys])
    return StackedExtractors(u, u * signs, len(keys))


# ---------------------------------------------------------------------------
# rank via Householder QR with column pivoting

def pivoted_qr_rank(a, rel_tol=RANK_TOL):
    """Numerical rank from the pivoted-QR diagonal, relative to its largest
    entry.  Deterministic; no external solver."""
    r = np.array(a, dtype=np.float64, copy=True)
    m, n = r.shape
    diag = []
    for k in range(min(m, n)):
        norms = (r[k:, k:] ** 2).sum(axis=0)
        pivot = int(np.argmax(norms))
        if norms[pivot] <= 0:
            break
        if pivot != 0:
            r[:, [k, k + pivot]] = r[:, [k + pivot, k]]
        x = r[k:, k].copy()
        alpha = -np.linalg.norm(x) if x[0] >= 0 else np.linalg.norm(x)
        v = x
        v[0] -= alpha
        vnorm2 = v @ v
        if vnorm2 > 0:
            r[k:, k:] -= np.outer(v, (2.0 / vnorm2) * (v @ r[k:, k:]))
        r[k, k] = alpha
        diag.append(abs(alpha))
    if not diag:
        return 0
    top = diag[0]
    return int(sum(d > rel_tol * top for d in diag))


def check_conditions(se):
    """The three sufficient conditions, in order: rank(U) equals the column
    count, some row of U~ is strictly positive, the Gram matrix of U~ is
    strictly positive entrywise."""
    cond_rank = pivoted_qr_rank(se.u) == se.n_cols
    cond_row = bool((se.u_tilde > 0).all(axis=1).any())
    gram = se.u_tilde.T @ se.u_tilde
    cond_gram = bool((gram > 0).all())
    return cond_rank, cond_row, cond_gram


# ---------------------------------------------------------------------------
# certificates

def _project_simplex(y):
    """Euclidean projection onto {y >= 0, sum(y) = 1}."""
    s = np.sort(y)[::-1]
    css = np.cumsum(s) - 1.0
    rho = np.flatnonzero(s - css / np.arange(1, len(y) + 1) > 0)[-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(y - theta, 0.0)


def _polish_support(u_tilde, y, tol=1e-12):
    """Exact equality-constrained least squares on the current support:
    minimize |U~ z|^2 subject to sum(z) = 1, z supported on y's support."""
    support = np.flatnonzero(y > tol)
    if support.size == 0:
        return None
    g = u_tilde[:, support].T @ u_tilde[:, support]
    n = support.size
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = 2.0 * g
    kkt[:n, n] = 1.0
    kkt[n, :n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    z = sol[:n]
    if (z < -1e-9).any():
        return None
    z = np.maximum(z, 0.0)
    total = z.sum()
    if total <= 0:
        return None
    out = np.zeros_like(y)
    out[support] = z / total
    return out


def _feasible_report(se, conds, w):
    resid = w @ se.u_tilde
    scale = resid.min()
    w = w / scale  # rescale so the worst margin is exactly 1
    return FeasibilityReport(*conds, "feasible", w=w,
                             margin=float((w @ se.u_tilde).min()))


def _infeasible_report(se, conds, y):
    return FeasibilityReport(*conds, "infeasible", y=y,
                             nnls_residual=float(np.abs(se.u_tilde @ y).max()))


def decide(se, max_iters=20000):
    """Search for a Gordan certificate either way.

    One outer iteration runs a full perceptron cycle over the columns
    (W += column whenever W^T column is nonpositive) plus a batch of
    projected-gradient NNLS steps minimizing |U~ y| over the simplex.
    First verified certificate wins; `unknown` after max_iters is a
    legitimate outcome."""
    conds = check_conditions(se)
    ut = se.u_tilde
    col_norms = np.linalg.norm(ut, axis=0)
    zero_cols = np.flatnonzero(col_norms == 0)
    if zero_cols.size:  # a zero column is its own infeasibility certificate
        y = np.zeros(se.n_cols)
        y[zero_cols[0]] = 1.0
        return _infeasible_report(se, conds, y)

    unit = ut / col_norms
    scale = np.abs(ut).max()
    resid_tol = STRICT_FLOOR * min(1.0, scale)
    w = np.zeros(ut.shape[0])
    y = np.full(se.n_cols, 1.0 / se.n_cols)
    gram = ut.T @ ut
    lipschitz = 2.0 * np.linalg.norm(ut, 2) ** 2
    step = 1.0 / lipschitz

    for outer in range(max_iters):
        # perceptron cycle
        clean = True
        for j in range(se.n_cols):
            if w @ unit[:, j] <= 0.0:
                w = w + unit[:, j]
                clean = False
        if clean and (w @ ut > 0).all():
            return _feasible_report(se, conds, w)

        # nnls batch
        for _ in range(10):
            y = _project_simplex(y - step * 2.0 * (gram @ y))
        if np.abs(ut @ y).max() <= resid_tol:
            return _infeasible_report(se, conds, y)
        if outer % 50 == 49:
            polished = _polish_support(ut, y)
            if polished is not None and np.abs(ut @ polished).max() <= resid_tol:
                return _infeasible_report(se, conds, polished)
    return FeasibilityReport(*conds, "unknown")


def verify_certificate(se, report):
    """Independent re-check of whichever certificate the report carries."""
    if report.status == "feasible":
        resid = report.w @ se.u_tilde
        return bool((resid > STRICT_FLOOR).all())
    if report.status == "infeasible":
        y = report.y
        if (y < 0).any() or y.sum() <= 0:
            return False
        bound = STRICT_FLOOR * max(np.abs(se.u_tilde).max(), 1.0) * y.sum()
        return bool(np.abs(se.u_tilde @ y).max() <= bound)
    return False


# ---------------------------------------------------------------------------
# capacity

def capacity_bound(net, mode):
    """Largest total bit count with guaranteed conflict-free embedding:
    the summed channel count for scale mode (disjoint coordinates), the
    flattened pool size for kernel mode."""
    selector = default_selector(net, mode)
    return flatten_selected(net.params, selector).size

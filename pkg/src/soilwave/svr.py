"""Epsilon-insensitive support vector regression with an RBF kernel.

Training solves the dual with sequential minimal optimisation over the
stacked variables ``a = [alpha; alpha*]`` (signs ``s = [+1; -1]``)::

    min_a  0.5 * a' Q a + p' a     Q = (s s') * [[K, K], [K, K]]
    s.t.   s' a = 0,  0 <= a <= C  p = [eps - y; eps + y]

Working pairs are chosen by maximal violation for the first index and by
second-order gain for the second (Fan, Chen & Lin, JMLR 2005). The fitted
function is ``f(x) = sum_i beta_i K(x, x_i) + b`` with ``beta = alpha - alpha*``.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng as _rng
from .errors import ArgumentError, FormatError, ValidationError
from .metrics import mse

log = logging.getLogger(__name__)

MODEL_FORMAT = "soilwave.svr/1"
_TAU = 1e-12


@dataclass(frozen=True)
class SvrHyper:
    C: float = 0.1
    epsilon: float = 0.1
    gamma: float = 1.0

    def __post_init__(self):
        if not self.C > 0:
            raise ValidationError("C must be > 0")
        if not self.epsilon >= 0:
            raise ValidationError("epsilon must be >= 0")
        if not self.gamma > 0:
            raise ValidationError("gamma must be > 0")


@dataclass(frozen=True)
class SvrModel:
    support_vectors: np.ndarray  # (s, d)
    coeffs: np.ndarray  # (s,)
    bias: float
    hyper: SvrHyper
    info: dict = field(default_factory=dict, compare=False)

    @property
    def n_features(self) -> int:
        return self.support_vectors.shape[1]

    def predict(self, X) -> np.ndarray:
        return svr_predict_many(self, X)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "hyper": {"C": self.hyper.C, "epsilon": self.hyper.epsilon, "gamma": self.hyper.gamma},
            "bias": self.bias,
            "n_features": self.n_features,
            "support_vectors": self.support_vectors.tolist(),
            "coeffs": self.coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SvrModel":
        if d.get("format") != MODEL_FORMAT:
            raise FormatError(f"not an SVR model document: format={d.get('format')!r}")
        sv = np.asarray(d["support_vectors"], dtype=float).reshape(-1, int(d["n_features"]))
        return cls(sv, np.asarray(d["coeffs"], dtype=float), float(d["bias"]), SvrHyper(**d["hyper"]))


def rbf_kernel(x, y, gamma: float) -> float:
    """exp(-gamma * ||x - y||^2)."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ArgumentError(f"dimension mismatch: {x.size} vs {y.size}")
    d = x - y
    return math.exp(-gamma * float(d @ d))


def rbf_matrix(A, B, gamma: float) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ArgumentError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


def svr_predict(model: SvrModel, x) -> float:
    """sum_i coeffs[i] * K(x, sv_i) + bias."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != model.n_features:
        raise ArgumentError(f"expected {model.n_features} features, got {x.size}")
    if model.coeffs.size == 0:
        return float(model.bias)
    k = rbf_matrix(x[None, :], model.support_vectors, model.hyper.gamma)[0]
    return float(k @ model.coeffs) + model.bias


def svr_predict_many(model: SvrModel, X, chunk: int = 2048) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_features:
        raise ArgumentError(f"expected {model.n_features} features, got {X.shape[1]}")
    if model.coeffs.size == 0:
        return np.full(X.shape[0], float(model.bias))
    out = np.empty(X.shape[0])
    for start in range(0, X.shape[0], chunk):
        k = rbf_matrix(X[start:start + chunk], model.support_vectors, model.hyper.gamma)
        out[start:start + chunk] = k @ model.coeffs + model.bias
    return out


def _check_xy(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ArgumentError(f"{X.shape[0]} rows but {y.size} targets")
    if y.size < 2:
        raise ArgumentError("SVR training needs at least 2 samples")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValidationError("training data contains non-finite values")
    return X, y


def svr_train(X, y, hyper: SvrHyper = SvrHyper(), tol: float = 1e-3,
              max_passes: int = 10000, seed: int = 0) -> SvrModel:
    """Fit an epsilon-SVR by SMO.

    Stops when the maximal KKT violation ``m(a) - M(a)`` drops below ``tol``
    or after ``max_passes * n`` pair updates. ``seed`` fixes the order in
    which equally violating indices are considered. ``model.info`` records
    ``termination`` (``"converged"``/``"max_passes"``), ``iterations`` and
    ``kkt_violation``.
    """
    X, y = _check_xy(X, y)
    n = y.size
    C, eps = hyper.C, hyper.epsilon
    K = rbf_matrix(X, X, hyper.gamma)
    diag = np.diag(K).copy()

    perm = _rng.stream(seed, _rng.SVR_ORDER).permutation(n)
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    K = K[np.ix_(perm, perm)]
    diag = diag[perm]
    yp = y[perm]

    # index t < n is alpha_t (s=+1); t >= n is alpha*_{t-n} (s=-1)
    a = np.zeros(2 * n)
    s = np.concatenate([np.ones(n), -np.ones(n)])
    G = np.concatenate([eps - yp, eps + yp])
    max_iter = max(1, int(max_passes)) * n
    it = 0
    gap = math.inf
    termination = "max_passes"
    while it < max_iter:
        up = ((s > 0) & (a < C)) | ((s < 0) & (a > 0))
        low = ((s > 0) & (a > 0)) | ((s < 0) & (a < C))
        msg = -s * G
        if not up.any() or not low.any():
            gap = 0.0
            termination = "converged"
            break
        i = int(np.argmax(np.where(up, msg, -np.inf)))
        gmax = msg[i]
        gmin = float(np.min(np.where(low, msg, np.inf)))
        gap = gmax - gmin
        if gap < tol:
            termination = "converged"
            break
        ki = i % n
        b_diff = gmax - msg
        cand = low & (b_diff > 0)
        kcol = K[ki]
        kk = np.concatenate([kcol, kcol])
        dd = np.concatenate([diag, diag])
        quad = diag[ki] + dd - 2.0 * kk
        quad = np.where(quad > 0, quad, _TAU)
        gain = np.where(cand, -(b_diff * b_diff) / quad, np.inf)
        j = int(np.argmin(gain))
        _update_pair(a, G, s, K, i, j, n, C)
        it += 1

    beta_p = a[:n] - a[n:]
    b = _bias(a, G, s, C)
    beta = beta_p[inv]
    keep = beta != 0.0
    info = {"termination": termination, "iterations": it, "kkt_violation": float(gap)}
    if termination != "converged":
        log.warning("SVR stopped after %d updates with KKT violation %.3g", it, gap)
    return SvrModel(X[keep].copy(), beta[keep].copy(), float(b), hyper, info)


def _update_pair(a, G, s, K, i, j, n, C):
    ai_old, aj_old = a[i], a[j]
    ki, kj = i % n, j % n
    kij = K[ki, kj]
    if s[i] != s[j]:
        quad = K[ki, ki] + K[kj, kj] + 2.0 * (s[i] * s[j] * kij)
        quad = quad if quad > 0 else _TAU
        delta = (-G[i] - G[j]) / quad
        diff = a[i] - a[j]
        a[i] += delta
        a[j] += delta
        if diff > 0:
            if a[j] < 0:
                a[j] = 0.0
                a[i] = diff
        elif a[i] < 0:
            a[i] = 0.0
            a[j] = -diff
        if diff > 0:
            if a[i] > C:
                a[i] = C
                a[j] = C - diff
        elif a[j] > C:
            a[j] = C
            a[i] = C + diff
    else:
        quad = K[ki, ki] + K[kj, kj] - 2.0 * (s[i] * s[j] * kij)
        quad = quad if quad > 0 else _TAU
        delta = (G[i] - G[j]) / quad
        total = a[i] + a[j]
        a[i] -= delta
        a[j] += delta
        if total > C:
            if a[i] > C:
                a[i] = C
                a[j] = total - C
        elif a[j] < 0:
            a[j] = 0.0
            a[i] = total
        if total > C:
            if a[j] > C:
                a[j] = C
                a[i] = total - C
        elif a[i] < 0:
            a[i] = 0.0
            a[j] = total
    di = a[i] - ai_old
    dj = a[j] - aj_old
    u = (s[i] * di) * K[ki] + (s[j] * dj) * K[kj]
    G[:n] += u
    G[n:] -= u


def _bias(a, G, s, C) -> float:
    """b = -rho, rho averaged over free variables or the midpoint of the KKT bounds."""
    yG = s * G
    at_upper = a >= C
    at_lower = a <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        rho = float(yG[free].mean())
    else:
        ub_mask = (at_upper & (s < 0)) | (at_lower & (s > 0))
        lb_mask = (at_upper & (s > 0)) | (at_lower & (s < 0))
        ub = float(yG[ub_mask].min()) if ub_mask.any() else math.inf
        lb = float(yG[lb_mask].max()) if lb_mask.any() else -math.inf
        if math.isinf(ub):
            rho = lb
        elif math.isinf(lb):
            rho = ub
        else:
            rho = 0.5 * (ub + lb)
    return -rho


def full_duals(model: SvrModel, X) -> np.ndarray:
    """Expand the model's coefficients onto the rows of ``X`` (zeros for non-SVs).

    Rows are matched by exact equality with the stored support vectors.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    beta = np.zeros(X.shape[0])
    used = np.zeros(model.coeffs.size, dtype=bool)
    for r, row in enumerate(X):
        hit = np.flatnonzero(~used & (model.support_vectors == row).all(axis=1))
        if hit.size:
            beta[r] = model.coeffs[hit[0]]
            used[hit[0]] = True
    if not used.all():
        raise ArgumentError("support vectors are not all rows of X")
    return beta


def _residual_hinge(r, eps):
    return np.maximum(0.0, r - eps) + np.maximum(0.0, -r - eps)


def best_bias(X, y, duals, hyper: SvrHyper) -> float:
    """Bias minimising the slack penalty for fixed duals (breakpoint search)."""
    X, y = _check_xy(X, y)
    beta = np.asarray(duals, dtype=float)
    r = y - rbf_matrix(X, X, hyper.gamma) @ beta
    cands = np.concatenate([r - hyper.epsilon, r + hyper.epsilon])
    costs = [_residual_hinge(r - c, hyper.epsilon).sum() for c in cands]
    return float(cands[int(np.argmin(costs))])


def svr_objective(X, y, duals, hyper: SvrHyper, bias: Optional[float] = None) -> float:
    """Primal objective ``C * sum(xi + xi*) + 0.5 * ||w||^2`` for dual coefficients ``duals``.

    ``w`` is the kernel expansion of ``duals``; the slacks are the positive
    parts of the tube violations of ``f = K duals + bias``. Without ``bias``
    the slack-minimising bias is used.
    """
    X, y = _check_xy(X, y)
    beta = np.asarray(duals, dtype=float).ravel()
    if beta.size != y.size:
        raise ArgumentError("one dual coefficient per sample required")
    if np.any(np.abs(beta) > hyper.C + 1e-9):
        raise ValidationError("duals violate the box |beta_i| <= C")
    if abs(beta.sum()) > 1e-6:
        raise ValidationError("duals violate sum(beta) = 0")
    K = rbf_matrix(X, X, hyper.gamma)
    b = best_bias(X, y, beta, hyper) if bias is None else float(bias)
    f = K @ beta + b
    slack = _residual_hinge(y - f, hyper.epsilon)
    return float(hyper.C * slack.sum() + 0.5 * beta @ K @ beta)


def svr_dual_objective(X, y, duals, hyper: SvrHyper) -> float:
    """Dual objective in minimisation form: 0.5 b'Kb + eps*|b|_1 - y'b."""
    X, y = _check_xy(X, y)
    beta = np.asarray(duals, dtype=float)
    K = rbf_matrix(X, X, hyper.gamma)
    return float(0.5 * beta @ K @ beta + hyper.epsilon * np.abs(beta).sum() - y @ beta)


def kkt_violation(model: SvrModel, X, y) -> float:
    """Largest per-sample violation of the KKT conditions of a trained model."""
    X, y = _check_xy(X, y)
    beta = full_duals(model, X)
    r = y - svr_predict_many(model, X)
    C, eps = model.hyper.C, model.hyper.epsilon
    return float(np.max(_kkt_terms(beta, r, C, eps)))


def _kkt_terms(beta, r, C, eps, atol=1e-12):
    zero = np.abs(beta) <= atol
    pos_free = (beta > atol) & (beta < C - atol)
    neg_free = (beta < -atol) & (beta > -C + atol)
    pos_bound = beta >= C - atol
    neg_bound = beta <= -C + atol
    v = np.zeros_like(r)
    v = np.where(zero, np.maximum(0.0, np.abs(r) - eps), v)
    v = np.where(pos_free, np.abs(r - eps), v)
    v = np.where(neg_free, np.abs(r + eps), v)
    v = np.where(pos_bound, np.maximum(0.0, eps - r), v)
    v = np.where(neg_bound, np.maximum(0.0, r + eps), v)
    return v


# -- grid search -----------------------------------------------------------


@dataclass(frozen=True)
class GridRow:
    gamma: float
    C: float
    epsilon: float
    mse: float


def chronological_folds(n: int, folds: int) -> list[np.ndarray]:
    return np.array_split(np.arange(n), folds)


def grid_search_svr(X, y, gamma_grid: Sequence[float], c_grid: Sequence[float],
                    eps_grid: Sequence[float], folds: int = 3, tol: float = 1e-3,
                    max_passes: int = 10000, seed: int = 0) -> tuple[SvrHyper, list[GridRow]]:
    """Score every (gamma, C, epsilon) by mean validation MSE over contiguous folds.

    The table follows ``itertools.product(gamma_grid, c_grid, eps_grid)``
    order. Ties on MSE go to smaller C, then smaller gamma, then larger
    epsilon.
    """
    if not gamma_grid or not c_grid or not eps_grid:
        raise ArgumentError("every hyperparameter grid must be nonempty")
    if folds < 2:
        raise ArgumentError("folds must be >= 2")
    X, y = _check_xy(X, y)
    if y.size < folds:
        raise ArgumentError("fewer samples than folds")
    parts = chronological_folds(y.size, folds)
    table = []
    for gamma, C, eps in itertools.product(gamma_grid, c_grid, eps_grid):
        hyper = SvrHyper(C=float(C), epsilon=float(eps), gamma=float(gamma))
        scores = []
        for val in parts:
            mask = np.ones(y.size, dtype=bool)
            mask[val] = False
            model = svr_train(X[mask], y[mask], hyper, tol=tol, max_passes=max_passes, seed=seed)
            scores.append(mse(svr_predict_many(model, X[val]), y[val]))
        table.append(GridRow(hyper.gamma, hyper.C, hyper.epsilon, float(np.mean(scores))))
    best = min(table, key=lambda r: (r.mse, r.C, r.gamma, -r.epsilon))
    log.info("grid search picked gamma=%g C=%g epsilon=%g (mse %.6g)", best.gamma, best.C, best.epsilon, best.mse)
    return SvrHyper(C=best.C, epsilon=best.epsilon, gamma=best.gamma), table


def grid_table_csv(table: Sequence[GridRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["gamma", "C", "epsilon", "mse"])
    for r in table:
        w.writerow([repr(r.gamma), repr(r.C), repr(r.epsilon), repr(r.mse)])
    return out.getvalue()

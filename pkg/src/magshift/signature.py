"""Sparse embedding signatures: elastic-net logistic fits and cross-fold stability."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .errors import FitError, SelectionError
from .evaluation import ScoredSet, auc

__all__ = [
    "Standardizer",
    "SparseModel",
    "Selection",
    "StabilityReport",
    "fit_standardizer",
    "alpha_max",
    "objective",
    "kkt_violation",
    "fit_sparse_logistic",
    "default_grid",
    "select_regularization",
    "stability_report",
    "jaccard",
    "write_signature",
    "write_stability",
    "stability_dict",
]


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.mean.shape[0]:
            raise ValueError(f"expected [n x {self.mean.shape[0]}] matrix, got {X.shape}")
        return (X - self.mean) / self.std


def fit_standardizer(train_embeddings) -> Standardizer:
    """Column mean and population std; zero-variance columns get std 1."""
    X = np.asarray(train_embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two training rows to standardize")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Standardizer(mean, std)


@dataclass
class SparseModel:
    intercept: float
    beta: np.ndarray
    alpha: float
    gamma: float
    converged: bool = True
    n_sweeps: int = 0

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(np.flatnonzero(self.beta != 0.0).tolist())

    def decision_function(self, D) -> np.ndarray:
        return self.intercept + np.asarray(D, dtype=np.float64) @ self.beta

    def predict_proba(self, D) -> np.ndarray:
        return _sigmoid(self.decision_function(D))


def _sigmoid(s):
    e = np.exp(-np.abs(s))
    return np.where(s >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_xy(D, y):
    D = np.asarray(D, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if D.ndim != 2 or y.shape != (D.shape[0],):
        raise FitError(f"design {D.shape} does not match labels {y.shape}")
    if D.shape[0] == 0 or y.min() == y.max():
        raise FitError("labels must contain both classes")
    return D, y


def alpha_max(D, y) -> float:
    """Smallest l1 weight at which the all-zero coefficient vector is optimal."""
    D, y = _check_xy(D, y)
    return float(np.max(np.abs(D.T @ (y - y.mean()))) / D.shape[0])


def objective(D, y, intercept, beta, alpha, gamma) -> float:
    """Mean Bernoulli NLL + alpha*||beta||_1 + gamma/2*||beta||_2^2."""
    eta = intercept + D @ beta
    nll = np.mean(np.logaddexp(0.0, eta) - y * eta)
    return float(nll + alpha * np.abs(beta).sum() + 0.5 * gamma * beta @ beta)


def kkt_violation(D, y, model: SparseModel) -> float:
    """Largest violation of the elastic-net optimality conditions."""
    D = np.asarray(D, dtype=np.float64)
    r = _sigmoid(model.decision_function(D)) - y
    g = D.T @ r / D.shape[0] + model.gamma * model.beta
    active = model.beta != 0
    v_active = np.abs(g[active] + model.alpha * np.sign(model.beta[active]))
    v_inactive = np.maximum(np.abs(g[~active]) - model.alpha, 0.0)
    return float(max(v_active.max(initial=0.0), v_inactive.max(initial=0.0), abs(r.mean())))



@njit(cache=True)
def _bound_curvature(eta):
    """Curvature of the tightest quadratic upper bound on softplus touching at ``eta``.

    ``tanh(eta/2) / (2 eta)``, equal to 1/4 at zero and decaying like
    ``1 / (2|eta|)``; it never falls below the true curvature, so the bound
    holds globally.
    """
    w = np.empty_like(eta)
    for i in range(eta.size):
        e = eta[i]
        w[i] = 0.25 if abs(e) < 1e-6 else np.tanh(0.5 * e) / (2.0 * e)
    return w


@njit(cache=True)
def _cd_quadratic(H, g, b, alpha, gamma, inner_tol):
    """Minimize ``g.d + d'Hd/2 + penalty(b + d)`` over ``d`` by cyclic CD; returns ``b + d``."""
    q = b.size
    x = b.copy()
    v = np.zeros(q)  # H @ (x - b), kept incrementally
    for _ in range(100_000):
        biggest = 0.0
        for j in range(q):
            hjj = H[j, j]
            if j == 0:
                new = x[0] - (g[0] + v[0]) / hjj
            else:
                denom = hjj + gamma
                if denom == 0.0:
                    continue
                z = hjj * x[j] - (g[j] + v[j])
                new = np.sign(z) * max(abs(z) - alpha, 0.0) / denom
            delta = new - x[j]
            if delta != 0.0:
                x[j] = new
                v += delta * H[:, j]
                biggest = max(biggest, abs(delta))
        if biggest < inner_tol:
            break
    return x


@njit(cache=True)
def _penalized(X, y, b, alpha, gamma):
    eta = X @ b
    beta = b[1:]
    nll = np.mean(np.logaddexp(0.0, eta) - y * eta)
    return nll + alpha * np.abs(beta).sum() + 0.5 * gamma * (beta @ beta)


@njit(cache=True)
def _mm_fit(X, y, b, alpha, gamma, tol, max_steps, obj):
    """Outer loop on ``X = [1, D]``; updates ``b`` (intercept first) in place.

    Each step first tries a proximal Newton move: the logistic loss is
    replaced by its second-order expansion, the penalized quadratic is
    solved by coordinate descent, and the move is shortened by backtracking
    until the true objective drops enough. If backtracking stalls the step
    falls back to the quadratic upper bound, whose minimizer can never
    raise the objective. Either way the objective is non-increasing.
    Returns ``(steps run, converged)``.
    """
    n, q = X.shape
    inner_tol = tol * 1e-3
    f = _penalized(X, y, b, alpha, gamma)
    for step in range(1, max_steps + 1):
        eta = X @ b
        mu = 1.0 / (1.0 + np.exp(-eta))
        g = X.T @ (mu - y) / n
        w = np.maximum(mu * (1.0 - mu), 1e-12)
        H = (X * w[:, None]).T @ X / n
        target = _cd_quadratic(H, g, b, alpha, gamma, inner_tol)
        d = target - b
        pen_b = alpha * np.abs(b[1:]).sum() + 0.5 * gamma * (b[1:] @ b[1:])
        pen_t = alpha * np.abs(target[1:]).sum() + 0.5 * gamma * (target[1:] @ target[1:])
        decrease = g @ d + pen_t - pen_b  # predicted, always <= 0
        t = 1.0
        accepted = False
        for _ in range(30):
            trial = b + t * d
            f_trial = _penalized(X, y, trial, alpha, gamma)
            if f_trial <= f + 1e-4 * t * decrease:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            H = (X * _bound_curvature(eta)[:, None]).T @ X / n
            trial = _cd_quadratic(H, g, b, alpha, gamma, inner_tol)
            f_trial = _penalized(X, y, trial, alpha, gamma)
            if f_trial > f:  # rounding only; keep the current point
                trial = b.copy()
                f_trial = f
        change = np.max(np.abs(trial - b))
        b[:] = trial
        f = f_trial
        if obj.size:
            obj[step - 1] = f
        if change < tol:
            return step, True
    return max_steps, False


def fit_sparse_logistic(D, y, alpha: float, gamma: float, tol: float = 1e-7,
                        max_sweeps: int = 10_000, trace: list | None = None,
                        init: SparseModel | None = None) -> SparseModel:
    """Elastic-net logistic regression by coordinate descent on quadratic models.

    At the current linear predictor the mean logistic loss is replaced by a
    quadratic (its Newton expansion, or the global upper bound with per
    sample curvature ``tanh(eta/2) / (2 eta)`` when a damped Newton move
    cannot make progress). Quadratic + l1/l2 penalty is minimized by cyclic
    coordinate descent, each coordinate taking the closed form
    ``soft(H_jj*b_j - grad_j, alpha) / (H_jj + gamma)``.
    The process repeats until the largest coefficient change of an outer
    step is below ``tol``. Zeros in ``beta``
    are exact outputs of the soft threshold. ``trace`` collects the
    objective after every outer step when given. ``init`` warm-starts from
    another model's coefficients, which only changes the path taken.
    """
    if alpha < 0 or gamma < 0:
        raise FitError("alpha and gamma must be non-negative")
    D, y = _check_xy(D, y)
    n, p = D.shape
    ybar = y.mean()
    b0 = float(np.log(ybar / (1.0 - ybar)))
    if alpha >= alpha_max(D, y):
        # KKT holds at the null model for every gamma
        if trace is not None:
            trace.append(objective(D, y, b0, np.zeros(p), alpha, gamma))
        return SparseModel(b0, np.zeros(p), alpha, gamma, True, 0)

    X = np.column_stack([np.ones(n), D])
    b = np.zeros(p + 1)
    b[0] = b0
    if init is not None:
        if init.beta.shape != (p,):
            raise FitError(f"warm start has {init.beta.size} coefficients, expected {p}")
        b[0] = init.intercept
        b[1:] = init.beta
    obj = np.zeros(max_sweeps if trace is not None else 0)
    steps, converged = _mm_fit(X, y, b, float(alpha), float(gamma), float(tol), int(max_sweeps), obj)
    if trace is not None:
        trace.extend(obj[:steps].tolist())
    return SparseModel(float(b[0]), b[1:].copy(), float(alpha), float(gamma), bool(converged), int(steps))


def default_grid(alpha_max_value: float, n_alpha: int = 9,
                 gammas: Sequence[float] = (0.0, 1e-4, 1e-2)) -> list[tuple[float, float]]:
    """Log-spaced alphas ``alpha_max * 10**(-k/2)`` crossed with the l2 weights."""
    alphas = [alpha_max_value * 10.0 ** (-k / 2.0) for k in range(n_alpha)]
    return [(a, g) for g in gammas for a in alphas]


@dataclass
class Selection:
    alpha: float
    gamma: float
    model: SparseModel
    val_auc: float
    table: list[tuple[float, float, float, int]] = field(default_factory=list)


def select_regularization(train, val, grid=None) -> Selection:
    """Pick (alpha, gamma) by validation AUC; ties go to the smaller support, then larger alpha.

    ``train`` and ``val`` are ``(D, y)`` pairs already standardized with the
    training statistics. The winning model is the fit on the training split,
    which is exactly the refit at the selected pair.
    """
    D_tr, y_tr = train
    D_va, y_va = val
    if grid is None:
        grid = default_grid(alpha_max(D_tr, y_tr))
    grid = list(grid)
    if not grid:
        raise SelectionError("empty regularization grid")
    best = None
    table = []
    previous = {}  # last fit per gamma, used as a warm start down the alpha path
    for i, (a, g) in enumerate(grid):
        try:
            m = fit_sparse_logistic(D_tr, y_tr, a, g, init=previous.get(g))
            previous[g] = m
            score = auc(ScoredSet(y_va, m.predict_proba(D_va)))
        except Exception:  # a failed grid point is skipped, not fatal
            continue
        table.append((a, g, score, len(m.support)))
        key = (-score, len(m.support), -a, i)
        if best is None or key < best[0]:
            best = (key, a, g, m, score)
    if best is None:
        raise SelectionError("every grid point failed to fit or score")
    _, a, g, m, score = best
    return Selection(a, g, m, score, table)


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    return 1.0 if not union else len(a & b) / len(union)


@dataclass
class StabilityReport:
    sizes: list[int]
    frequencies: np.ndarray
    jaccard: np.ndarray

    @property
    def mean_size(self) -> float:
        return float(np.mean(self.sizes))

    @property
    def mean_offdiag_jaccard(self) -> float:
        k = self.jaccard.shape[0]
        if k < 2:
            return 1.0
        return float(self.jaccard[~np.eye(k, dtype=bool)].mean())


def stability_report(supports: Sequence[Sequence[int]], p: int) -> StabilityReport:
    """Selection frequency per dimension and the pairwise Jaccard matrix of supports."""
    sets = [set(int(j) for j in s) for s in supports]
    for s in sets:
        bad = [j for j in s if not 0 <= j < p]
        if bad:
            raise IndexError(f"support index {bad[0]} outside [0, {p})")
    k = len(sets)
    freq = np.zeros(p)
    for s in sets:
        freq[list(s)] += 1.0
    freq = freq / k if k else freq
    J = np.ones((k, k))
    for a in range(k):
        for b in range(a + 1, k):
            J[a, b] = J[b, a] = jaccard(sets[a], sets[b])
    return StabilityReport([len(s) for s in sets], freq, J)


def write_signature(path, rows) -> None:
    """Rows of ``(fold, dimension, coefficient)`` for nonzero coefficients."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "dimension", "coefficient"])
        for fold, j, c in rows:
            w.writerow([fold, int(j), repr(float(c))])


def stability_dict(report: StabilityReport, folds: Sequence[str]) -> dict:
    return {
        "folds": list(folds),
        "sizes": [int(x) for x in report.sizes],
        "mean_size": report.mean_size,
        "frequencies": [float(f) for f in report.frequencies],
        "jaccard": [[float(x) for x in row] for row in report.jaccard],
        "mean_offdiag_jaccard": report.mean_offdiag_jaccard,
    }


def write_stability(path, reports: dict[str, StabilityReport], folds: Sequence[str]) -> None:
    """One JSON document keyed by method (e.g. ``baseline``, ``grl``)."""
    doc = {method: stability_dict(r, folds) for method, r in reports.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")

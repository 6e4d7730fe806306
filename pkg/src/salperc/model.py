"""Penalized cumulative-logit additive model for 1..R importance ratings.

The latent predictor eta is a sum of design blocks (intercept, centered
smooths, factor contrasts, tensor interactions, ridge-penalized random
effects).  Ratings follow P(y = r) = sigma(theta_r - eta) - sigma(
theta_{r-1} - eta) with theta_0 = -inf, theta_R = +inf.  The first cut
point is fixed at -1; the rest are parameterized through log increments
delta so theta_{j+1} = theta_j + exp(delta_j) keeps them increasing.

Parameter vector layout: beta (design.p entries) followed by delta
(R - 2 entries).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .design import Design, ModelSpec
from .features import TokenContext
from .records import RatingRecord

GRAD_TOL = 1e-6
MAX_ITER = 200
ARMIJO_C = 1e-4
DEFAULT_LAMBDA_GRID = tuple(float(x) for x in np.logspace(-2, 6, 9))


def _logsig(z):
    return -np.logaddexp(0.0, -z)


def default_delta(R: int) -> np.ndarray:
    # evenly spaced cuts two latent units apart
    return np.full(R - 2, math.log(2.0))


def cut_points(delta: np.ndarray) -> np.ndarray:
    """theta_1..theta_{R-1}, first fixed at -1."""
    return np.concatenate([[-1.0], -1.0 + np.cumsum(np.exp(delta))])


def _theta_full(delta: np.ndarray) -> np.ndarray:
    # theta_0..theta_R including the infinite boundaries
    return np.concatenate([[-np.inf], cut_points(delta), [np.inf]])


def _log_prob_parts(eta, ratings, delta):
    """Stable per-observation log P(y=r) plus the sigmoid ratios used by
    the gradient and Hessian.

    r_a = sigma'(a)/P and r_b = sigma'(b)/P with a = theta_r - eta and
    b = theta_{r-1} - eta; both vanish at the infinite boundary cuts.
    """
    theta = _theta_full(delta)
    a = theta[ratings] - eta
    b = theta[ratings - 1] - eta
    d = a - b
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        # log(1 - exp(-d)); switch formulas at ~log 2 for accuracy
        small = d < 0.693
        ln_diff = np.where(
            small,
            np.log(-np.expm1(-np.where(small, d, 1.0))),
            np.log1p(-np.exp(-np.where(small, 1.0, d))),
        )
        ln_p = _logsig(a) + _logsig(-b) + ln_diff
        r_a = np.exp(_logsig(a) + _logsig(-a) - ln_p)
        r_b = np.exp(_logsig(b) + _logsig(-b) - ln_p)
    return ln_p, a, b, r_a, r_b


class OrdinalObjective:
    """Penalized negative log-likelihood over (beta, delta)."""

    def __init__(self, X: np.ndarray, ratings: np.ndarray, R: int, P_pen: np.ndarray):
        ratings = np.asarray(ratings, dtype=int)
        if len(ratings) == 0:
            raise ValueError("no ratings")
        if ratings.min() < 1 or ratings.max() > R:
            raise ValueError(f"ratings outside 1..{R}")
        self.X = X
        self.ratings = ratings
        self.R = R
        self.P_pen = P_pen
        self.p = X.shape[1]

    def split(self, params):
        return params[: self.p], params[self.p :]

    def value_grad(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        beta, delta = self.split(params)
        eta = self.X @ beta
        ln_p, a, b, r_a, r_b = _log_prob_parts(eta, self.ratings, delta)
        if not np.all(np.isfinite(ln_p)):
            # probability underflow; signal an unusable point to the
            # line search instead of propagating infinities
            return np.inf, np.full_like(params, np.nan)
        value = -math.fsum(ln_p) + 0.5 * beta @ self.P_pen @ beta

        g_beta = self.X.T @ (r_a - r_b) + self.P_pen @ beta
        g_theta = np.zeros(self.R - 2)
        r = self.ratings
        mask_a = (r >= 2) & (r <= self.R - 1)
        np.subtract.at(g_theta, r[mask_a] - 2, r_a[mask_a])
        mask_b = r >= 3
        np.add.at(g_theta, r[mask_b] - 3, r_b[mask_b])
        # theta_m depends on delta_j for j <= m-2: reverse cumulative sum
        rev = np.cumsum(g_theta[::-1])[::-1]
        g_delta = np.exp(delta) * rev
        grad = np.concatenate([g_beta, g_delta])
        if not np.all(np.isfinite(grad)):
            bad = int(np.argmax(~np.isfinite(grad)))
            raise FloatingPointError(f"non-finite gradient at parameter index {bad}")
        return value, grad

    def hessian(self, params: np.ndarray, penalized: bool = True) -> np.ndarray:
        beta, delta = self.split(params)
        eta = self.X @ beta
        ln_p, a, b, r_a, r_b = _log_prob_parts(eta, self.ratings, delta)
        sig_a = expit(np.clip(a, -700, 700))
        sig_b = expit(np.clip(b, -700, 700))
        # second derivatives of log P w.r.t. (a, b)
        h_aa = r_a * (1.0 - 2.0 * sig_a) - r_a**2
        h_bb = -r_b * (1.0 - 2.0 * sig_b) - r_b**2
        h_ab = r_a * r_b

        w_eta = -(h_aa + 2.0 * h_ab + h_bb)  # negative log-lik curvature in eta
        H_bb = (self.X * w_eta[:, None]).T @ self.X
        if penalized:
            H_bb = H_bb + self.P_pen

        R = self.R
        n = len(self.ratings)
        r = self.ratings
        mask_a = (r >= 2) & (r <= R - 1)
        mask_b = r >= 3
        # cross terms eta x theta, one column per free cut
        M = np.zeros((n, R - 2))
        idx = np.arange(n)
        M[idx[mask_a], r[mask_a] - 2] += (h_aa + h_ab)[mask_a]
        M[idx[mask_b], r[mask_b] - 3] += (h_ab + h_bb)[mask_b]
        H_bt = self.X.T @ M

        T = np.zeros((R - 2, R - 2))
        np.add.at(T, (r[mask_a] - 2, r[mask_a] - 2), -h_aa[mask_a])
        np.add.at(T, (r[mask_b] - 3, r[mask_b] - 3), -h_bb[mask_b])
        both = mask_a & mask_b
        np.add.at(T, (r[both] - 2, r[both] - 3), -h_ab[both])
        np.add.at(T, (r[both] - 3, r[both] - 2), -h_ab[both])

        # chain rule theta -> delta: J[i, j] = exp(delta_j) for j <= i,
        # plus the diagonal second-order term, which equals the delta
        # gradient of the negative log-likelihood
        J = np.tril(np.ones((R - 2, R - 2))) * np.exp(delta)[None, :]
        g_theta = np.zeros(R - 2)
        np.subtract.at(g_theta, r[mask_a] - 2, r_a[mask_a])
        np.add.at(g_theta, r[mask_b] - 3, r_b[mask_b])
        rev = np.cumsum(g_theta[::-1])[::-1]
        H_dd = J.T @ T @ J + np.diag(np.exp(delta) * rev)
        H_bd = H_bt @ J

        H = np.block([[H_bb, H_bd], [H_bd.T, H_dd]])
        return 0.5 * (H + H.T)


def penalized_neg_loglik(params, design: Design, records: Sequence[RatingRecord],
                         lams: dict) -> tuple[float, np.ndarray]:
    """Value and exact gradient of the penalized objective at ``params``."""
    X = design.matrix_from_records(records)
    ratings = np.array([r.rating for r in records])
    obj = OrdinalObjective(X, ratings, design.spec.num_categories, design.penalty_full(lams))
    return obj.value_grad(np.asarray(params, dtype=float))


def penalized_hessian(params, design: Design, records: Sequence[RatingRecord],
                      lams: dict) -> np.ndarray:
    X = design.matrix_from_records(records)
    ratings = np.array([r.rating for r in records])
    obj = OrdinalObjective(X, ratings, design.spec.num_categories, design.penalty_full(lams))
    return obj.hessian(np.asarray(params, dtype=float))


def _init_params(obj: OrdinalObjective) -> np.ndarray:
    """Start from empirical cumulative logits, shifted so theta_1 = -1
    with the shift absorbed into the intercept."""
    R = obj.R
    counts = np.bincount(obj.ratings, minlength=R + 1)[1:]
    F = np.cumsum(counts)[:-1] / counts.sum()
    logits = logit(np.clip(F, 1e-3, 1.0 - 1e-3))
    incr = np.maximum(np.diff(logits), 1e-2)
    delta0 = np.log(incr)
    beta0 = np.zeros(obj.p)
    beta0[0] = -1.0 - logits[0]  # intercept column is first
    return np.concatenate([beta0, delta0])


@dataclass
class NewtonReport:
    converged: bool
    n_iter: int
    final_grad_norm: float
    damped: bool
    monotone: bool


def _newton(obj: OrdinalObjective, x0: np.ndarray,
            max_iter: int = MAX_ITER, tol: float = GRAD_TOL) -> tuple[np.ndarray, NewtonReport]:
    x = x0.copy()
    f, g = obj.value_grad(x)
    damped = False
    monotone = True
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(g)))
        if gnorm < tol:
            return x, NewtonReport(True, it - 1, gnorm, damped, monotone)
        H = obj.hessian(x)
        scale = max(float(np.max(np.abs(np.diag(H)))), 1.0)
        mu = 0.0
        while True:
            try:
                L = np.linalg.cholesky(H + mu * np.eye(len(x)))
                break
            except np.linalg.LinAlgError:
                damped = True
                mu = 1e-8 * scale if mu == 0.0 else mu * 10.0
                if mu > 1e10 * scale:
                    return x, NewtonReport(False, it, gnorm, damped, monotone)
        d = -np.linalg.solve(H + mu * np.eye(len(x)), g)
        slope = float(g @ d)
        if slope >= 0:
            d = -g
            slope = float(g @ d)
        t = 1.0
        while True:
            f_new, g_new = obj.value_grad(x + t * d)
            if np.isfinite(f_new) and f_new <= f + ARMIJO_C * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                return x, NewtonReport(False, it, gnorm, damped, monotone)
        if f_new > f + 1e-12:
            monotone = False
        x = x + t * d
        f, g = f_new, g_new
    gnorm = float(np.max(np.abs(g)))
    return x, NewtonReport(gnorm < tol, max_iter, gnorm, damped, monotone)


class FittedPerceptionModel:
    """Immutable fit result: design, coefficients, cut points, Hessians."""

    def __init__(self, design: Design, beta: np.ndarray, delta: np.ndarray,
                 lams: dict, H_pen: np.ndarray, H_unpen: np.ndarray,
                 report: NewtonReport):
        self.design = design
        self.beta = np.asarray(beta, dtype=float)
        self.delta = np.asarray(delta, dtype=float)
        self.lams = dict(lams)
        self.H_pen = H_pen
        self.H_unpen = H_unpen
        self.report = report

    @property
    def num_categories(self) -> int:
        return self.design.spec.num_categories

    @property
    def cut_points(self) -> np.ndarray:
        return cut_points(self.delta)

    @property
    def worker_levels(self) -> list[str]:
        return self.design.worker_levels

    @property
    def sentence_levels(self) -> list[str]:
        return self.design.sentence_levels

    # -- prediction -----------------------------------------------------

    def _values(self, s: float, x, worker, sentence, extra=None) -> dict:
        vals = x.as_dict() if isinstance(x, TokenContext) else dict(x)
        vals["saliency"] = float(s)
        vals["worker_id"] = worker
        vals["sentence_id"] = sentence
        if extra:
            vals.update(extra)
        return vals

    def predict_latent(self, s: float, x, worker=None, sentence=None, extra=None) -> float:
        row = self.design.row(self._values(s, x, worker, sentence, extra))
        return float(row @ self.beta)

    def predict_latent_averaged(self, s: float, x, extra=None) -> float:
        """Mean latent prediction over all (worker, sentence) pairs,
        computed with uniform random-effect weights; exactly equal to
        the literal double loop by additivity."""
        row = self.design.row(self._values(s, x, None, None, extra), averaged=True)
        return float(row @ self.beta)

    def predict_latent_many(self, values: Sequence[dict], averaged: bool = False) -> np.ndarray:
        return self.design.matrix(values, averaged=averaged) @ self.beta

    def predict_category_probs(self, s: float, x, worker=None, sentence=None, extra=None) -> np.ndarray:
        eta = self.predict_latent(s, x, worker, sentence, extra)
        return category_probs(eta, self.delta)

    # -- inspection -----------------------------------------------------

    def smooth_terms(self) -> list[str]:
        return [b.name for b in self.design.blocks if b.kind == "smooth"]

    def partial_effect(self, term: str, grid) -> tuple[np.ndarray, np.ndarray]:
        """Centered curve of one univariate smooth with +-1 SE band."""
        try:
            block = self.design.block_by_name(term)
        except KeyError:
            raise KeyError(f"no smooth term {term!r}; available: {self.smooth_terms()}") from None
        if block.kind != "smooth":
            raise KeyError(f"{term!r} is not a univariate smooth; available: {self.smooth_terms()}")
        from .basis import build_bspline_basis

        grid = np.asarray(grid, dtype=float)
        rows = build_bspline_basis(grid, block.payload["spec"], block.payload["knots"]) @ block.payload["Z"]
        curve = rows @ self.beta[block.cols]
        cov = np.linalg.inv(self.H_pen)[block.cols, block.cols]
        se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", rows, cov, rows), 0.0))
        return curve, se

    def edf(self) -> dict[str, float]:
        """Per-term effective degrees of freedom: block traces of
        H_penalized^-1 H_unpenalized."""
        F = np.linalg.solve(self.H_pen, self.H_unpen)
        out = {}
        for b in self.design.blocks:
            out[b.name] = float(np.trace(F[b.cols, b.cols]))
        p = self.design.p
        out["cut-points"] = float(np.trace(F[p:, p:]))
        return out

    # -- serialization --------------------------------------------------

    def to_json(self) -> dict:
        return {
            "design": self.design.to_json(),
            "beta": self.beta.tolist(),
            "delta": self.delta.tolist(),
            "cut_points": self.cut_points.tolist(),
            "lams": self.lams,
            "H_pen": self.H_pen.tolist(),
            "H_unpen": self.H_unpen.tolist(),
            "report": {
                "converged": self.report.converged,
                "n_iter": self.report.n_iter,
                "final_grad_norm": self.report.final_grad_norm,
                "damped": self.report.damped,
                "monotone": self.report.monotone,
            },
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def from_json(cls, d: dict) -> "FittedPerceptionModel":
        rep = NewtonReport(**d["report"])
        return cls(
            Design.from_json(d["design"]),
            np.array(d["beta"]),
            np.array(d["delta"]),
            dict(d["lams"]),
            np.array(d["H_pen"]),
            np.array(d["H_unpen"]),
            rep,
        )

    @classmethod
    def load(cls, path) -> "FittedPerceptionModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def category_probs(eta: float, delta: np.ndarray) -> np.ndarray:
    theta = _theta_full(delta)
    cum = expit(theta - eta)
    probs = np.diff(cum)
    return probs


def _resolve_lams(design: Design, lam) -> tuple[dict, list[str]]:
    """Split lambda keys into fixed values and ones needing selection."""
    fixed = design.fixed_lams()
    resolved = {}
    to_select = []
    for key, val in fixed.items():
        if isinstance(lam, dict) and key in lam:
            resolved[key] = float(lam[key])
        elif isinstance(lam, (int, float)) and not isinstance(lam, bool):
            resolved[key] = float(lam)
        elif val is not None:
            resolved[key] = val
        else:
            to_select.append(key)
    return resolved, to_select


def fit(records: Sequence[RatingRecord], spec: ModelSpec, lam="select",
        grid: Sequence[float] = DEFAULT_LAMBDA_GRID, folds: int = 5,
        seed: int = 0, max_iter: int = MAX_ITER) -> FittedPerceptionModel:
    """Fit the model; ``lam`` is a scalar, a per-key dict, or "select"
    for grouped cross-validated selection of any unpinned penalties."""
    design = Design.build(records, spec)
    X = design.matrix_from_records(records)
    ratings = np.array([r.rating for r in records])
    R = spec.num_categories

    resolved, to_select = _resolve_lams(design, lam)
    if to_select:
        if lam == "select" or isinstance(lam, dict):
            workers = [r.worker_id for r in records]
            selected = select_smoothing(
                X, ratings, design, resolved, to_select, workers,
                grid=grid, folds=folds, seed=seed,
            )
            resolved.update(selected)
        else:
            raise ValueError(f"lambda unspecified for {to_select}")

    obj = OrdinalObjective(X, ratings, R, design.penalty_full(resolved))
    params, report = _newton(obj, _init_params(obj), max_iter=max_iter)
    if not report.converged:
        warnings.warn(
            f"fit stopped after {report.n_iter} iterations, "
            f"max |gradient| {report.final_grad_norm:.2e}"
        )
    beta, delta = obj.split(params)
    if np.max(np.abs(beta)) > 25:
        warnings.warn("very large coefficient; a factor level may be separated")
    H_pen = obj.hessian(params)
    H_unpen = obj.hessian(params, penalized=False)
    try:
        np.linalg.cholesky(H_pen)
    except np.linalg.LinAlgError:
        warnings.warn("penalized Hessian not positive definite at optimum")
    return FittedPerceptionModel(design, beta, delta, resolved, H_pen, H_unpen, report)


def _fold_assignment(workers: Sequence[str], folds: int, seed: int) -> np.ndarray:
    """Fold id per record; every record of one worker shares a fold."""
    levels = sorted(set(workers))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(levels))
    fold_of = {lv: int(perm[i] % folds) for i, lv in enumerate(levels)}
    return np.array([fold_of[w] for w in workers])


def select_smoothing(X, ratings, design: Design, fixed: dict, keys: list[str],
                     workers: Sequence[str], grid=DEFAULT_LAMBDA_GRID,
                     folds: int = 5, seed: int = 0, sweeps: int = 3) -> dict:
    """Coordinate descent over penalty weights, scoring each candidate by
    K-fold cross-validated deviance with worker-grouped folds.  Ties go
    to the larger (smoother) lambda."""
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("empty lambda grid")
    assign = _fold_assignment(workers, folds, seed)
    R = design.spec.num_categories
    current = dict(fixed)
    for key in keys:
        current[key] = grid[len(grid) // 2]
    if len(grid) == 1:
        return {k: grid[0] for k in keys}

    def cv_deviance(lams: dict) -> float:
        total = 0.0
        for k in range(folds):
            train = assign != k
            test = ~train
            if not test.any() or not train.any():
                continue
            obj = OrdinalObjective(
                X[train], ratings[train], R,
                _penalty_for(design, lams),
            )
            params, _ = _newton(obj, _init_params(obj), max_iter=80, tol=1e-5)
            beta, delta = obj.split(params)
            ln_p, *_ = _log_prob_parts(X[test] @ beta, ratings[test], delta)
            total += -2.0 * math.fsum(ln_p)
        return total

    best = cv_deviance(current)
    for _ in range(sweeps):
        changed = False
        for key in keys:
            for lam in reversed(grid):  # larger lambda wins ties
                if lam == current[key]:
                    continue
                trial = dict(current)
                trial[key] = lam
                score = cv_deviance(trial)
                if score < best - 1e-9 or (score <= best + 1e-9 and lam > current[key]):
                    best = score
                    current = trial
                    changed = True
        if not changed:
            break
    return {k: current[k] for k in keys}


def _penalty_for(design: Design, lams: dict) -> np.ndarray:
    return design.penalty_full(lams)

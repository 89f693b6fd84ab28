"""
Ordered probit model of weekly home-delivery frequency.

Latent propensity Y* = βx + ε with ε standard normal; the observed class is
n when τ(n-1) < Y* <= τ(n), with τ(-1) = -inf and τ(5) = +inf. There is no
intercept: location is absorbed by the five thresholds.

Estimation maximises the log-likelihood with BFGS on an unconstrained
parameterisation (β, τ0, δ1..δ4) where τj = τ(j-1) + exp(δj), followed by
Newton polishing steps until the gradient test passes. Standard errors come
from the inverse negative Hessian mapped back to (β, τ) by the delta method.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize
from scipy.special import ndtr, ndtri
from scipy.stats import norm

from delivery.config import N_CLASSES, PROBIT_DEFAULTS
from delivery.data_model import Dataset

logger = logging.getLogger(__name__)

N_THRESHOLDS = N_CLASSES - 1
PROB_FLOOR = 1e-300
# Keeps exp(δ) finite and positive inside the optimiser
DELTA_BOUND = 50.0


@dataclass(frozen=True, eq=False)
class OrderedProbitParams:
    """Coefficients β (length p) and strictly increasing thresholds τ (length 5)."""

    beta: np.ndarray
    thresholds: np.ndarray

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64, copy=True).reshape(-1)
        thresholds = np.array(self.thresholds, dtype=np.float64, copy=True).reshape(-1)
        if thresholds.shape != (N_THRESHOLDS,):
            raise ValueError(f"Need {N_THRESHOLDS} thresholds, got {thresholds.shape[0]}")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(thresholds))):
            raise ValueError("Parameters must be finite")
        if np.any(np.diff(thresholds) <= 0):
            raise ValueError(f"Thresholds must be strictly increasing: {thresholds}")
        beta.setflags(write=False)
        thresholds.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "thresholds", thresholds)

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.thresholds])

    @classmethod
    def from_vector(cls, vector: Sequence[float], p: int) -> "OrderedProbitParams":
        vector = np.asarray(vector, dtype=np.float64)
        return cls(vector[:p], vector[p:])


# =============================================================================
# PROBABILITIES AND LIKELIHOOD
# =============================================================================

def _interval_probability(low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """Φ(high) − Φ(low), evaluated in the upper tail through Φ(−low) − Φ(−high)."""
    direct = ndtr(high) - ndtr(low)
    mirrored = ndtr(-low) - ndtr(-high)
    return np.where(low > 0, mirrored, direct)


def _cutpoints(thresholds: np.ndarray) -> np.ndarray:
    return np.concatenate(([-np.inf], thresholds, [np.inf]))


def _check_width(x: np.ndarray, p: int) -> None:
    if x.shape[-1] != p:
        raise ValueError(f"Dimension mismatch: model has {p} coefficients, got {x.shape[-1]} features")


def _as_params(model) -> OrderedProbitParams:
    return model.params if isinstance(model, OrderedProbitFit) else model


def class_probability_matrix(model, X: np.ndarray) -> np.ndarray:
    """n×6 class probabilities for the rows of X."""
    params = _as_params(model)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"Expected a 2-D feature matrix, got shape {X.shape}")
    _check_width(X, params.p)
    eta = (X @ params.beta)[:, None]
    cut = _cutpoints(params.thresholds)
    return _interval_probability(cut[:-1] - eta, cut[1:] - eta)


def class_probabilities(model, x: Sequence[float]) -> np.ndarray:
    """
    Length-6 class probabilities for one household.

    P(0) = Φ(τ0 − βx), P(n) = Φ(τn − βx) − Φ(τ(n-1) − βx), P(5) = 1 − Φ(τ4 − βx).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"Expected a feature vector, got shape {x.shape}")
    return class_probability_matrix(model, x.reshape(1, -1))[0]


def _observed_terms(beta: np.ndarray, thresholds: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Probability of each observed label and the standardized interval bounds."""
    eta = X @ beta
    cut = _cutpoints(thresholds)
    low = cut[y] - eta
    high = cut[y + 1] - eta
    return _interval_probability(low, high), low, high


def _loglik(beta, thresholds, X, y) -> float:
    prob, _, _ = _observed_terms(beta, thresholds, X, y)
    # fsum makes the total independent of row order
    return math.fsum(np.log(np.maximum(prob, PROB_FLOOR)))


def _score(beta, thresholds, X, y) -> np.ndarray:
    prob, low, high = _observed_terms(beta, thresholds, X, y)
    prob = np.maximum(prob, PROB_FLOOR)
    pdf_low = norm.pdf(low) / prob
    pdf_high = norm.pdf(high) / prob

    # d log P / d eta = (φ(low) − φ(high)) / P
    grad_beta = X.T @ (pdf_low - pdf_high)
    upper = np.bincount(y, weights=pdf_high, minlength=N_CLASSES)[:N_THRESHOLDS]
    lower = np.bincount(y, weights=pdf_low, minlength=N_CLASSES)[1:]
    return np.concatenate([grad_beta, upper - lower])


def _data_arrays(params: OrderedProbitParams, data: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    if data.n < 1:
        raise ValueError("Dataset is empty")
    _check_width(data.rows, params.p)
    return data.rows, data.labels


def log_likelihood(model, data: Dataset) -> float:
    """Σ log P(y_i | x_i); probabilities are floored at 1e-300 before the log."""
    params = _as_params(model)
    X, y = _data_arrays(params, data)
    return _loglik(params.beta, params.thresholds, X, y)


def score(model, data: Dataset) -> np.ndarray:
    """Analytic gradient of log_likelihood over (β, τ)."""
    params = _as_params(model)
    X, y = _data_arrays(params, data)
    return _score(params.beta, params.thresholds, X, y)


def initial_thresholds(labels: Sequence[int]) -> np.ndarray:
    """Thresholds reproducing the empirical cumulative class shares (null-model optimum)."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=N_CLASSES)
    cumulative = np.cumsum(counts)[:N_THRESHOLDS] / labels.shape[0]
    thresholds = ndtri(np.clip(cumulative, 1e-4, 1.0 - 1e-4))
    for j in range(1, N_THRESHOLDS):
        thresholds[j] = max(thresholds[j], thresholds[j - 1] + 1e-3)
    return thresholds


def null_params(labels: Sequence[int], p: int = 0) -> OrderedProbitParams:
    """β = 0 with thresholds at the empirical cumulative-share quantiles."""
    return OrderedProbitParams(np.zeros(p), initial_thresholds(labels))


def null_log_likelihood(labels: Sequence[int]) -> float:
    """Thresholds-only maximum Σ n_c log(n_c / n) over the classes present."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=N_CLASSES)
    n = counts.sum()
    return math.fsum(c * math.log(c / n) for c in counts if c > 0)


# =============================================================================
# ESTIMATION
# =============================================================================

def _to_unconstrained(beta: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return np.concatenate([beta, thresholds[:1], np.log(np.diff(thresholds))])


def _from_unconstrained(u: np.ndarray, p: int) -> Tuple[np.ndarray, np.ndarray]:
    deltas = np.exp(np.clip(u[p + 1:], -DELTA_BOUND, DELTA_BOUND))
    thresholds = u[p] + np.concatenate(([0.0], np.cumsum(deltas)))
    return u[:p], thresholds


def _jacobian(u: np.ndarray, p: int) -> np.ndarray:
    """d(β, τ)/du for the exponential-increment parameterisation."""
    jac = np.eye(p + N_THRESHOLDS)
    deltas = np.exp(np.clip(u[p + 1:], -DELTA_BOUND, DELTA_BOUND))
    block = np.zeros((N_THRESHOLDS, N_THRESHOLDS))
    block[:, 0] = 1.0
    for j in range(1, N_THRESHOLDS):
        block[j, 1:j + 1] = deltas[:j]
    jac[p:, p:] = block
    return jac


class _Objective:
    """Log-likelihood and gradient in unconstrained coordinates."""

    def __init__(self, X: np.ndarray, y: np.ndarray):
        self.X = X
        self.y = y
        self.n, self.p = X.shape

    def loglik(self, u: np.ndarray) -> float:
        beta, thresholds = _from_unconstrained(u, self.p)
        return _loglik(beta, thresholds, self.X, self.y)

    def gradient(self, u: np.ndarray) -> np.ndarray:
        beta, thresholds = _from_unconstrained(u, self.p)
        return _jacobian(u, self.p).T @ _score(beta, thresholds, self.X, self.y)

    def mean_negative(self, u: np.ndarray) -> Tuple[float, np.ndarray]:
        ll = self.loglik(u)
        if not math.isfinite(ll):
            return np.inf, np.zeros_like(u)
        return -ll / self.n, -self.gradient(u) / self.n

    def score_norm(self, u: np.ndarray) -> float:
        """Max-norm of the log-likelihood gradient over (β, τ)."""
        beta, thresholds = _from_unconstrained(u, self.p)
        return float(np.max(np.abs(_score(beta, thresholds, self.X, self.y)), initial=0.0))

    def hessian(self, u: np.ndarray) -> np.ndarray:
        """Central differences of the analytic gradient (full log-likelihood scale)."""
        k = u.shape[0]
        hessian = np.empty((k, k))
        for j in range(k):
            step = 1e-5 * max(1.0, abs(u[j]))
            forward = u.copy()
            backward = u.copy()
            forward[j] += step
            backward[j] -= step
            hessian[:, j] = (self.gradient(forward) - self.gradient(backward)) / (2.0 * step)
        return 0.5 * (hessian + hessian.T)


@dataclass
class _Maximum:
    u: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    gradient_norm: float
    trace: List[float]


def _maximise(objective: _Objective, u0: np.ndarray, max_iter: int, tolerance: float) -> _Maximum:
    trace = [objective.loglik(u0)]

    def record(uk):
        trace.append(objective.loglik(uk))

    result = optimize.minimize(
        objective.mean_negative,
        u0,
        jac=True,
        method="BFGS",
        callback=record,
        options={"maxiter": max_iter, "gtol": tolerance, "norm": np.inf},
    )
    u = result.x
    iterations = int(result.nit)
    gradient_norm = objective.score_norm(u)

    # Newton polishing with step halving until the full-scale gradient test passes
    while gradient_norm >= tolerance and iterations < max_iter:
        value = objective.loglik(u)
        gradient = objective.gradient(u)
        negative_hessian = -objective.hessian(u)
        try:
            np.linalg.cholesky(negative_hessian)
            step = np.linalg.solve(negative_hessian, gradient)
        except np.linalg.LinAlgError:
            logger.debug("Newton polish stopped: Hessian not positive definite")
            break

        alpha = 1.0
        # LL changes near the optimum fall below rounding
        slack = 1e-10 * max(1.0, abs(value))
        for _ in range(40):
            candidate = u + alpha * step
            if objective.loglik(candidate) >= value - slack:
                break
            alpha *= 0.5
        else:
            break
        u = candidate
        iterations += 1
        trace.append(objective.loglik(u))
        gradient_norm = objective.score_norm(u)

    return _Maximum(
        u=u,
        loglik=objective.loglik(u),
        converged=gradient_norm < tolerance,
        iterations=iterations,
        gradient_norm=gradient_norm,
        trace=trace,
    )


def mcfadden_r2(ll_full: float, ll_null: float) -> float:
    """McFadden's pseudo R²: 1 − LL/LL_null."""
    return 1.0 - ll_full / ll_null


def aic(ll: float, k: int) -> float:
    """Akaike information criterion as −2(LL − k)."""
    return -2.0 * (ll - k)


@dataclass(frozen=True, eq=False)
class OrderedProbitFit:
    """Estimated ordered probit model with inference and fit statistics."""

    params: OrderedProbitParams
    feature_names: Tuple[str, ...]
    covariance: Optional[np.ndarray]
    log_likelihood_full: float
    log_likelihood_null: float
    null_thresholds: np.ndarray
    converged: bool
    iterations: int
    n_obs: int
    gradient_norm: float = 0.0
    null_converged: bool = True
    loglik_trace: Tuple[float, ...] = field(default_factory=tuple)

    @property
    def k(self) -> int:
        return self.params.p + N_THRESHOLDS

    @property
    def mcfadden_r2(self) -> float:
        return mcfadden_r2(self.log_likelihood_full, self.log_likelihood_null)

    @property
    def aic_full(self) -> float:
        return aic(self.log_likelihood_full, self.k)

    @property
    def aic_null(self) -> float:
        return aic(self.log_likelihood_null, N_THRESHOLDS)

    @property
    def estimates(self) -> np.ndarray:
        return self.params.vector()

    @property
    def parameter_names(self) -> List[str]:
        return list(self.feature_names) + threshold_labels()

    @property
    def standard_errors(self) -> Optional[np.ndarray]:
        if self.covariance is None:
            return None
        return np.sqrt(np.diag(self.covariance))

    @property
    def t_values(self) -> Optional[np.ndarray]:
        errors = self.standard_errors
        if errors is None:
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.estimates / errors

    @property
    def p_values(self) -> Optional[np.ndarray]:
        """Two-sided normal p-values."""
        t = self.t_values
        if t is None:
            return None
        return 2.0 * ndtr(-np.abs(t))


def threshold_labels() -> List[str]:
    labels = [f"{j}|{j + 1}" for j in range(N_THRESHOLDS)]
    labels[-1] = f"{N_THRESHOLDS - 1}|{N_THRESHOLDS}+"
    return labels


def _covariance(objective: _Objective, u: np.ndarray) -> Optional[np.ndarray]:
    """Inverse negative Hessian in (β, τ) coordinates via the delta method."""
    negative_hessian = -objective.hessian(u)
    try:
        np.linalg.cholesky(negative_hessian)
        covariance_u = np.linalg.inv(negative_hessian)
    except np.linalg.LinAlgError:
        logger.warning("Singular Hessian at the optimum; covariance omitted")
        return None
    if not np.all(np.isfinite(covariance_u)):
        logger.warning("Non-finite covariance at the optimum; covariance omitted")
        return None
    jac = _jacobian(u, objective.p)
    covariance = jac @ covariance_u @ jac.T
    return 0.5 * (covariance + covariance.T)


def fit(
    data: Dataset,
    feature_names: Optional[Sequence[str]] = None,
    max_iter: int = PROBIT_DEFAULTS["max_iter"],
    tolerance: float = PROBIT_DEFAULTS["tolerance"],
    seed: Optional[int] = None,
) -> OrderedProbitFit:
    """
    Maximum-likelihood ordered probit fit plus the thresholds-only null model.

    Args:
        data: Training dataset
        feature_names: Columns to use (all columns when omitted)
        max_iter: Iteration cap shared by BFGS and Newton polishing
        tolerance: Max-norm bound on the log-likelihood gradient over (β, τ)
        seed: Accepted for interface symmetry; estimation is deterministic

    Returns:
        OrderedProbitFit; converged=False when the gradient test fails
    """
    if feature_names is not None:
        data = data.select(list(feature_names))
    X, y = data.rows, data.labels
    n, p = X.shape

    if np.unique(y).shape[0] < 2:
        raise ValueError("Degenerate labels: need at least 2 distinct classes to fit")
    if n <= p + N_THRESHOLDS:
        raise ValueError(f"Need more than {p + N_THRESHOLDS} rows for {p} features, got {n}")
    if max_iter < 1 or tolerance <= 0:
        raise ValueError("max_iter must be >= 1 and tolerance > 0")

    start = initial_thresholds(y)
    full = _Objective(X, y)
    best = _maximise(full, _to_unconstrained(np.zeros(p), start), max_iter, tolerance)
    null = _maximise(_Objective(np.empty((n, 0)), y), _to_unconstrained(np.zeros(0), start), max_iter, tolerance)

    if best.converged:
        logger.info(f"Ordered probit converged in {best.iterations} iterations (LL={best.loglik:.3f})")
    else:
        logger.warning(
            f"Ordered probit did not converge in {max_iter} iterations "
            f"(gradient max-norm {best.gradient_norm:.2e})"
        )

    beta, thresholds = _from_unconstrained(best.u, p)
    _, null_thresholds = _from_unconstrained(null.u, 0)
    return OrderedProbitFit(
        params=OrderedProbitParams(beta, thresholds),
        feature_names=tuple(data.feature_names),
        covariance=_covariance(full, best.u),
        log_likelihood_full=best.loglik,
        log_likelihood_null=null_log_likelihood(y),
        null_thresholds=null_thresholds,
        converged=best.converged,
        iterations=best.iterations,
        n_obs=n,
        gradient_norm=best.gradient_norm,
        null_converged=null.converged,
        loglik_trace=tuple(best.trace),
    )


# =============================================================================
# PREDICTION AND EFFECTS
# =============================================================================

def argmax_class(probabilities: Sequence[float]) -> int:
    """Most probable class; ties go to the lowest class index."""
    return int(np.argmax(np.asarray(probabilities)))


def predict_class(model, x: Sequence[float]) -> int:
    return argmax_class(class_probabilities(model, x))


def predict_classes(model, X: np.ndarray) -> np.ndarray:
    return np.argmax(class_probability_matrix(model, X), axis=1)


def expected_class_shares(model, data: Dataset) -> np.ndarray:
    """Mean predicted class probabilities over the rows of a dataset."""
    if data.n < 1:
        raise ValueError("Dataset is empty")
    return class_probability_matrix(model, data.rows).mean(axis=0)


def marginal_effects(model, x: Sequence[float]) -> np.ndarray:
    """
    6×p matrix of ∂P(class)/∂x at x.

    Row n is [φ(τ(n-1) − βx) − φ(τn − βx)]·β with φ(±inf) = 0, so every
    column sums to zero across classes.
    """
    params = _as_params(model)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"Expected a feature vector, got shape {x.shape}")
    _check_width(x, params.p)
    density = norm.pdf(_cutpoints(params.thresholds) - x @ params.beta)
    return (density[:-1] - density[1:])[:, None] * params.beta[None, :]


def average_marginal_effects(model, data: Dataset) -> np.ndarray:
    """Marginal effects averaged over the rows of a dataset (6×p)."""
    params = _as_params(model)
    X, _ = _data_arrays(params, data)
    density = norm.pdf(_cutpoints(params.thresholds)[None, :] - (X @ params.beta)[:, None])
    weights = (density[:, :-1] - density[:, 1:]).mean(axis=0)
    return weights[:, None] * params.beta[None, :]


def discrete_change_effects(model, data: Dataset, feature: str) -> np.ndarray:
    """Mean change in class probabilities when a binary feature moves from 0 to 1."""
    params = _as_params(model)
    j = data.schema.index(feature)
    X, _ = _data_arrays(params, data)
    on = np.array(X, copy=True)
    off = np.array(X, copy=True)
    on[:, j] = 1.0
    off[:, j] = 0.0
    return (class_probability_matrix(params, on) - class_probability_matrix(params, off)).mean(axis=0)


# =============================================================================
# REPORTING AND SERIALIZATION
# =============================================================================

def format_fit_report(fit_result: OrderedProbitFit, title: str = "Ordered probit weekly home delivery frequency model") -> str:
    """Text report laid out like a published estimation table."""
    t_values = fit_result.t_values
    p_values = fit_result.p_values
    width = 78
    lines = [title, "=" * width]
    lines.append(f"{'Attribute':<34} {'Estimate':>10} {'t-value':>10} {'p-value':>10}")
    lines.append("-" * width)

    def row(label, index):
        estimate = fit_result.estimates[index]
        if t_values is None:
            return f"{label:<34} {estimate:>10.4f} {'n/a':>10} {'n/a':>10}"
        marker = " *" if p_values[index] < 0.05 else ""
        return f"{label:<34} {estimate:>10.4f} {t_values[index]:>10.2f} {p_values[index]:>10.4f}{marker}"

    for i, name in enumerate(fit_result.feature_names):
        lines.append(row(name, i))
    lines.append("Thresholds")
    for j, label in enumerate(threshold_labels()):
        lines.append(row(f"  {label}", fit_result.params.p + j))
    lines.append("-" * width)
    lines.append(f"Observations: {fit_result.n_obs}")
    lines.append(f"Log likelihood (full): {fit_result.log_likelihood_full!r}")
    lines.append(f"Log likelihood (null): {fit_result.log_likelihood_null!r}")
    lines.append(f"McFadden's R^2: {fit_result.mcfadden_r2!r}")
    lines.append(f"AIC (full): {fit_result.aic_full!r}")
    lines.append(f"AIC (null): {fit_result.aic_null!r}")
    lines.append(f"converged={'true' if fit_result.converged else 'false'}")
    lines.append(f"iterations={fit_result.iterations}")
    if fit_result.covariance is None:
        lines.append("covariance=omitted (singular Hessian)")
    lines.append("* significant at the 95% confidence level")
    return "\n".join(lines) + "\n"


def fit_to_records(fit_result: OrderedProbitFit) -> List[Tuple[str, str]]:
    """Machine-readable key=value pairs for (β, τ, covariance) and fit statistics."""
    records = [
        ("features", ",".join(fit_result.feature_names)),
        ("n_obs", str(fit_result.n_obs)),
        ("converged", "true" if fit_result.converged else "false"),
        ("null_converged", "true" if fit_result.null_converged else "false"),
        ("iterations", str(fit_result.iterations)),
        ("gradient_norm", repr(fit_result.gradient_norm)),
        ("log_likelihood_full", repr(fit_result.log_likelihood_full)),
        ("log_likelihood_null", repr(fit_result.log_likelihood_null)),
    ]
    for name, value in zip(fit_result.feature_names, fit_result.params.beta):
        records.append((f"beta.{name}", repr(float(value))))
    for j, value in enumerate(fit_result.params.thresholds):
        records.append((f"tau.{j}", repr(float(value))))
    for j, value in enumerate(fit_result.null_thresholds):
        records.append((f"null_tau.{j}", repr(float(value))))
    if fit_result.covariance is not None:
        k = fit_result.covariance.shape[0]
        for i in range(k):
            for j in range(k):
                records.append((f"cov.{i}.{j}", repr(float(fit_result.covariance[i, j]))))
    return records


def fit_from_records(records: Mapping[str, str]) -> OrderedProbitFit:
    """Rebuild a fit from its key=value records."""
    names = tuple(n for n in records.get("features", "").split(",") if n)
    p = len(names)
    beta = np.array([float(records[f"beta.{name}"]) for name in names])
    thresholds = np.array([float(records[f"tau.{j}"]) for j in range(N_THRESHOLDS)])
    null_thresholds = np.array([float(records[f"null_tau.{j}"]) for j in range(N_THRESHOLDS)])

    covariance = None
    if "cov.0.0" in records:
        k = p + N_THRESHOLDS
        covariance = np.array([[float(records[f"cov.{i}.{j}"]) for j in range(k)] for i in range(k)])

    return OrderedProbitFit(
        params=OrderedProbitParams(beta, thresholds),
        feature_names=names,
        covariance=covariance,
        log_likelihood_full=float(records["log_likelihood_full"]),
        log_likelihood_null=float(records["log_likelihood_null"]),
        null_thresholds=null_thresholds,
        converged=records.get("converged") == "true",
        iterations=int(records.get("iterations", 0)),
        n_obs=int(records.get("n_obs", 0)),
        gradient_norm=float(records.get("gradient_norm", 0.0)),
        null_converged=records.get("null_converged", "true") == "true",
    )

"""Scalar Gaussian-process regression with a squared-exponential ARD kernel.

Hyperparameters live in log space so positivity never needs checking.  The
prior mean is zero.  ``fit`` maximizes the log marginal likelihood with
L-BFGS-B from several starting points and keeps the best.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, lapack, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_TRAINING = 5000
DEFAULT_RESTARTS = 5
# diagonal jitter, relative to the mean diagonal of K_y
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_LOG_2PI = math.log(2.0 * math.pi)


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class DimensionMismatch(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class CorruptModel(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    log_length_scales: np.ndarray
    log_sigma_f: float
    log_sigma_n: float

    @classmethod
    def from_values(cls, length_scales, signal_std: float, noise_std: float) -> "Hyperparams":
        ls = np.atleast_1d(np.asarray(length_scales, dtype=float))
        if np.any(ls <= 0) or signal_std <= 0 or noise_std <= 0:
            raise ValueError("hyperparameters must be strictly positive")
        return cls(np.log(ls), math.log(signal_std), math.log(noise_std))

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "Hyperparams":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:-2].copy(), float(theta[-2]), float(theta[-1]))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.log_length_scales, [self.log_sigma_f, self.log_sigma_n]])

    @property
    def dim(self) -> int:
        return self.log_length_scales.shape[0]

    @property
    def length_scales(self) -> np.ndarray:
        return np.exp(self.log_length_scales)

    @property
    def signal_std(self) -> float:
        return math.exp(self.log_sigma_f)

    @property
    def noise_std(self) -> float:
        return math.exp(self.log_sigma_n)


def kernel_matrix(a: np.ndarray, b: np.ndarray, h: Hyperparams) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != h.dim or b.shape[1] != h.dim:
        raise DimensionMismatch(f"inputs have {a.shape[1]}/{b.shape[1]} columns, model expects {h.dim}")
    ls = h.length_scales
    return h.signal_std**2 * np.exp(-0.5 * cdist(a / ls, b / ls, "sqeuclidean"))


def kernel(xi, xj, h: Hyperparams) -> float:
    return float(kernel_matrix(np.atleast_2d(xi), np.atleast_2d(xj), h)[0, 0])


def _factor(ky: np.ndarray) -> tuple[np.ndarray, float]:
    scale = float(np.mean(np.diag(ky)))
    n = ky.shape[0]
    for level in JITTER_LADDER:
        jitter = level * scale
        try:
            return cholesky(ky + jitter * np.eye(n), lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(f"K_y not positive definite even with jitter {JITTER_LADDER[-1]:g}")


def _cholesky_inverse(chol: np.ndarray) -> np.ndarray:
    inv, info = lapack.dpotri(chol, lower=1)
    if info:
        raise NotPositiveDefinite(f"potri failed with info={info}")
    # potri fills only the lower triangle
    return np.tril(inv) + np.tril(inv, -1).T


def log_marginal_likelihood(X, y, h: Hyperparams, gradient: bool = False):
    """ln p(y | X, h); with ``gradient=True`` also d/d(log-hyperparameters)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    kf = kernel_matrix(X, X, h)
    ky = kf + h.noise_std**2 * np.eye(n)
    chol, _ = _factor(ky)
    alpha = cho_solve((chol, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(chol)).sum() - 0.5 * n * _LOG_2PI
    if not gradient:
        return float(lml)
    inner = np.outer(alpha, alpha) - _cholesky_inverse(chol)
    # sum_ij A_ij (x_id - x_jd)^2 = 2 (sum_i x_id^2 (A 1)_i - x_d' A x_d) for symmetric A
    a = inner * kf
    xs = X / h.length_scales
    weighted = np.einsum("id,i->d", xs * xs, a.sum(axis=1)) - np.einsum("id,id->d", xs, a @ xs)
    grad = np.empty(h.dim + 2)
    grad[: h.dim] = weighted
    grad[h.dim] = np.sum(inner * kf)
    grad[h.dim + 1] = h.noise_std**2 * np.trace(inner)
    return float(lml), grad


@dataclass(frozen=True, eq=False)
class GpModel:
    hyper: Hyperparams
    X: np.ndarray
    y: np.ndarray
    dof_tag: str = ""
    chol: np.ndarray = field(repr=False, default=None)
    alpha: np.ndarray = field(repr=False, default=None)
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def log_marginal_likelihood(self) -> float:
        return log_marginal_likelihood(self.X, self.y, self.hyper)

    def predict(self, Xstar) -> tuple[np.ndarray, np.ndarray]:
        return predict(self, Xstar)


def condition(X, y, hyper: Hyperparams, dof_tag: str = "") -> GpModel:
    """Build a model from fixed hyperparameters (no optimization)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    if X.shape[1] != hyper.dim:
        raise DimensionMismatch(f"inputs have {X.shape[1]} columns, hyperparameters {hyper.dim}")
    ky = kernel_matrix(X, X, hyper) + hyper.noise_std**2 * np.eye(len(y))
    chol, jitter = _factor(ky)
    alpha = cho_solve((chol, True), y)
    return GpModel(hyper, X, y, dof_tag, chol, alpha, jitter)


def predict(model: GpModel, Xstar) -> tuple[np.ndarray, np.ndarray]:
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if Xstar.shape[1] != model.dim:
        raise DimensionMismatch(f"query has {Xstar.shape[1]} columns, model expects {model.dim}")
    kstar = kernel_matrix(Xstar, model.X, model.hyper)
    mean = kstar @ model.alpha
    v = solve_triangular(model.chol, kstar.T, lower=True)
    var = model.hyper.signal_std**2 - np.einsum("ij,ij->j", v, v)
    return mean, np.maximum(var, 0.0)


def default_init(X: np.ndarray, y: np.ndarray) -> Hyperparams:
    ls = np.std(X, axis=0)
    ls = np.where(ls > 0, ls, 1.0)
    # the prior mean is zero, so an offset in y is signal too: use the RMS
    sf = float(np.sqrt(np.mean(y * y)))
    if sf <= 0:
        sf = 1.0
    return Hyperparams.from_values(ls, sf, 0.5 * sf)


def _canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.lexsort(np.column_stack([X, y]).T[::-1])


def fit(
    X,
    y,
    init: Hyperparams | None = None,
    restarts: int = DEFAULT_RESTARTS,
    seed: int = 0,
    dof_tag: str = "",
    max_training: int = MAX_TRAINING,
) -> GpModel:
    """Maximize the log marginal likelihood over log-hyperparameters.

    Rows are put in a canonical (lexicographic) order first, so the result
    does not depend on the order of the training pairs.  Above
    ``max_training`` rows a uniform stride subsample is used.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    if y.shape[0] < 2:
        raise ValueError("need at least two training pairs")
    order = _canonical_order(X, y)
    X, y = X[order], y[order]
    if y.shape[0] > max_training:
        keep = np.linspace(0, y.shape[0] - 1, max_training).round().astype(int)
        log.info("subsampling %d training rows to %d", y.shape[0], max_training)
        X, y = X[keep], y[keep]

    init = init or default_init(X, y)
    theta0 = init.vector()
    d = init.dim
    lower = theta0 - 7.0
    upper = theta0 + 7.0
    lower[d:] = theta0[d:] - 14.0
    bounds = list(zip(lower, upper))

    def objective(theta):
        try:
            value, grad = log_marginal_likelihood(X, y, Hyperparams.from_vector(theta), gradient=True)
        except NotPositiveDefinite:
            return 1e25, np.zeros_like(theta)
        return -value, -grad

    rng = np.random.default_rng(seed)
    starts = [theta0] + [np.clip(theta0 + rng.normal(size=theta0.shape), lower, upper) for _ in range(max(restarts, 0))]
    best_theta, best_value = theta0, math.inf
    for start in starts:
        res = minimize(objective, start, jac=True, method="L-BFGS-B", bounds=bounds, options={"gtol": 1e-6})
        if res.fun < best_value:
            best_theta, best_value = res.x, float(res.fun)
    return condition(X, y, Hyperparams.from_vector(best_theta), dof_tag)


def to_json(model: GpModel) -> str:
    doc = {
        "version": FORMAT_VERSION,
        "dof_tag": model.dof_tag,
        "D": model.dim,
        "n": model.n,
        "log_length_scales": [float(v) for v in model.hyper.log_length_scales],
        "log_sigma_f": float(model.hyper.log_sigma_f),
        "log_sigma_n": float(model.hyper.log_sigma_n),
        "X": [float(v) for v in model.X.reshape(-1)],
        "y": [float(v) for v in model.y],
    }
    # json writes floats with repr, which round-trips exactly
    return json.dumps(doc)


def from_json(text: str | bytes) -> GpModel:
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptModel(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise CorruptModel("model file has no version field")
    if doc["version"] != FORMAT_VERSION:
        raise VersionMismatch(f"model version {doc['version']!r}, expected {FORMAT_VERSION}")
    try:
        d, n = int(doc["D"]), int(doc["n"])
        X = np.asarray(doc["X"], dtype=float).reshape(n, d)
        y = np.asarray(doc["y"], dtype=float)
        hyper = Hyperparams(
            np.asarray(doc["log_length_scales"], dtype=float),
            float(doc["log_sigma_f"]),
            float(doc["log_sigma_n"]),
        )
        tag = str(doc.get("dof_tag", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModel(f"model file is malformed: {exc}") from exc
    if y.shape != (n,) or hyper.dim != d:
        raise CorruptModel("model arrays do not match declared sizes")
    return condition(X, y, hyper, tag)


def save(model: GpModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(model))


def load(path) -> GpModel:
    with open(path, "rb") as fh:
        return from_json(fh.read())

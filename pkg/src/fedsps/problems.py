"""Convex loss oracles, the two-quadratic local-adaptivity instance, heterogeneity
measures and smoothness estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, logsumexp

from fedsps import rng as rngmod
from fedsps.data import ClientShard, Dataset
from fedsps.errors import OptimumNotFound


class Problem:
    """Finite-sum oracle: ``evaluate(x, idx)`` returns the mean loss and mean
    gradient over the samples ``idx``. All built-in losses are nonnegative."""

    kind = "abstract"

    def __init__(self, features):
        if sp.issparse(features):
            features = sp.csr_matrix(features, dtype=np.float64)
        else:
            features = np.ascontiguousarray(features, dtype=np.float64)
        self.A = features
        self.n_samples, self.n_features = features.shape

    @property
    def dim(self) -> int:
        return self.n_features

    def _rows(self, idx):
        """Rows for a batch; ``None`` selects the whole dataset."""
        if idx is None:
            return self.A, np.arange(self.n_samples)
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ValueError("empty batch")
        return self.A[idx], idx

    def _check_x(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ValueError(f"parameter has shape {x.shape}, expected ({self.dim},)")
        return x

    def evaluate(self, x, idx):
        raise NotImplementedError

    def loss(self, x, idx) -> float:
        return self.evaluate(x, idx)[0]

    def per_sample_grads(self, x, idx) -> np.ndarray:
        raise NotImplementedError

    def _row_sq_norms(self, idx=None):
        A = self.A if idx is None else self.A[np.asarray(idx)]
        if sp.issparse(A):
            return np.asarray(A.multiply(A).sum(axis=1)).ravel()
        return np.einsum("ij,ij->i", A, A)

    def sample_smoothness(self, idx=None) -> float:
        """Upper bound on the smoothness constant of every per-sample loss."""
        raise NotImplementedError


class LeastSquares(Problem):
    """F(x, j) = 0.5 (a_j . x - b_j)^2."""

    kind = "least_squares"

    def __init__(self, features, targets):
        super().__init__(features)
        self.b = np.asarray(targets, dtype=np.float64)
        if self.b.shape != (self.n_samples,):
            raise ValueError("targets must have one entry per row")

    def evaluate(self, x, idx):
        x = self._check_x(x)
        A, idx = self._rows(idx)
        r = A @ x - self.b[idx]
        return 0.5 * float(r @ r) / len(idx), (A.T @ r) / len(idx)

    def per_sample_grads(self, x, idx):
        A, idx = self._rows(idx)
        r = A @ self._check_x(x) - self.b[idx]
        G = A.multiply(r[:, None]) if sp.issparse(A) else A * r[:, None]
        return np.asarray(G.todense()) if sp.issparse(G) else G

    def sample_smoothness(self, idx=None):
        return float(self._row_sq_norms(idx).max())

    def spectral_L(self, idx=None) -> float:
        """Exact smoothness constant of the mean loss over ``idx``."""
        A = self.A if idx is None else self.A[np.asarray(idx)]
        A = A.toarray() if sp.issparse(A) else A
        return float(np.linalg.eigvalsh(A.T @ A / A.shape[0])[-1])


class LogisticRegression(Problem):
    """Binary log-loss, labels mapped from {0, 1} to y in {-1, +1}."""

    kind = "logistic"

    def __init__(self, features, labels):
        super().__init__(features)
        labels = np.asarray(labels)
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("binary logistic regression needs labels in {0, 1}")
        self.y = 2.0 * labels - 1.0

    def evaluate(self, x, idx):
        x = self._check_x(x)
        A, idx = self._rows(idx)
        y = self.y[idx]
        z = y * (A @ x)
        weights = -y * expit(-z)
        return float(np.logaddexp(0.0, -z).mean()), (A.T @ weights) / len(idx)

    def per_sample_grads(self, x, idx):
        A, idx = self._rows(idx)
        y = self.y[idx]
        w = -y * expit(-y * (A @ self._check_x(x)))
        G = A.multiply(w[:, None]) if sp.issparse(A) else A * w[:, None]
        return np.asarray(G.todense()) if sp.issparse(G) else G

    def sample_smoothness(self, idx=None):
        return float(self._row_sq_norms(idx).max()) / 4.0


class SoftmaxRegression(Problem):
    """Multinomial log-loss; the parameter is the row-major flattening of a
    (d, K) weight matrix."""

    kind = "softmax"

    def __init__(self, features, labels, n_classes):
        super().__init__(features)
        self.K = int(n_classes)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.labels.min() < 0 or self.labels.max() >= self.K:
            raise ValueError("labels outside [0, n_classes)")

    @property
    def dim(self):
        return self.n_features * self.K

    def _probs(self, x, A, idx):
        W = x.reshape(self.n_features, self.K)
        logits = np.asarray(A @ W)
        lse = logsumexp(logits, axis=1)
        rows = np.arange(len(idx))
        loss = lse - logits[rows, self.labels[idx]]
        P = np.exp(logits - lse[:, None])
        P[rows, self.labels[idx]] -= 1.0
        return loss, P

    def evaluate(self, x, idx):
        x = self._check_x(x)
        A, idx = self._rows(idx)
        loss, P = self._probs(x, A, idx)
        return float(loss.mean()), np.asarray(A.T @ P).ravel() / len(idx)

    def per_sample_grads(self, x, idx):
        A, idx = self._rows(idx)
        _, P = self._probs(self._check_x(x), A, idx)
        A = A.toarray() if sp.issparse(A) else A
        return np.einsum("bi,bk->bik", A, P).reshape(len(idx), -1)

    def sample_smoothness(self, idx=None):
        # Hessian of log-sum-exp has spectral norm <= 1/2
        return float(self._row_sq_norms(idx).max()) / 2.0


PROBLEM_KINDS = ("least_squares", "logistic", "softmax")


def make_problem(kind: str, dataset: Dataset) -> Problem:
    X = dataset.matrix()
    if kind == "least_squares":
        if dataset.targets is None:
            raise ValueError("least squares needs a dataset with regression targets")
        return LeastSquares(X, dataset.targets)
    if kind == "logistic":
        if dataset.n_classes != 2:
            raise ValueError(f"binary logistic regression needs 2 classes, dataset has {dataset.n_classes}")
        return LogisticRegression(X, dataset.labels)
    if kind == "softmax":
        return SoftmaxRegression(X, dataset.labels, dataset.n_classes)
    raise ValueError(f"unknown problem kind {kind!r}; choose from {PROBLEM_KINDS}")


def logistic_eval(x, batch, data: Dataset):
    return make_problem("logistic" if data.n_classes == 2 else "softmax", data).evaluate(x, batch)


def least_squares_eval(x, batch, data: Dataset):
    return make_problem("least_squares", data).evaluate(x, batch)


def client_loss(problem: Problem, x, shards) -> float:
    """f(x) = mean over clients of the client's full-batch loss."""
    return math.fsum(problem.loss(x, s.indices) for s in shards) / len(shards)


def client_grad(problem: Problem, x, shards) -> np.ndarray:
    g = np.zeros(problem.dim)
    for s in shards:
        g += problem.evaluate(x, s.indices)[1]
    return g / len(shards)


# -- local adaptivity example ------------------------------------------------


@dataclass(frozen=True)
class TwoCurvature:
    a: float
    problem: LeastSquares
    shards: list
    x_star: np.ndarray
    gamma_star: tuple[float, float]

    @property
    def L(self) -> float:
        return (1.0 + self.a) / 2.0


def two_curvature_instance(a: float) -> TwoCurvature:
    """Clients f_1 = a x^2 / 2 and f_2 = x^2 / 2, one sample each."""
    if not a > 0:
        raise ValueError("a must be positive")
    problem = LeastSquares(np.array([[math.sqrt(a)], [1.0]]), np.zeros(2))
    shards = [ClientShard(0, np.array([0]), 0), ClientShard(1, np.array([1]), 1)]
    return TwoCurvature(a, problem, shards, np.zeros(1), (1.0 / a, 1.0))


def two_curvature_minibatch_iterations(a, gamma, x0=1.0, tol=1e-6, max_iter=100_000) -> int | None:
    """Steps of x <- x - (gamma/2)(a x + x) until |x| < tol; None if never."""
    x = x0
    for t in range(max_iter + 1):
        if abs(x) < tol:
            return t
        x = x - 0.5 * gamma * (a * x + x)
        if not math.isfinite(x):
            return None
    return None


def two_curvature_adaptive_iterations(a, gammas, x0=1.0, tol=1e-6, max_iter=100_000) -> int | None:
    """Steps of x <- x - (1/2)(gamma_1 a x + gamma_2 x) until |x| < tol."""
    g1, g2 = gammas
    x = x0
    for t in range(max_iter + 1):
        if abs(x) < tol:
            return t
        x = x - 0.5 * (g1 * a * x + g2 * x)
        if not math.isfinite(x):
            return None
    return None


# -- heterogeneity -----------------------------------------------------------


@dataclass(frozen=True)
class HeterogeneityReport:
    sigma_f_sq: float
    zeta_star_sq: float
    sigma_star_sq: float
    smoothness_L: float
    x_star: np.ndarray
    f_star: float

    def dissimilarity_bounds_hold(self, rtol: float = 1e-9) -> tuple[bool, bool]:
        bound = 2.0 * self.smoothness_L * self.sigma_f_sq
        slack = rtol * max(bound, abs(self.zeta_star_sq), abs(self.sigma_star_sq))
        return self.zeta_star_sq <= bound + slack, self.sigma_star_sq <= bound + slack


def least_squares_optimum(problem: LeastSquares, shards) -> np.ndarray:
    """Minimum-norm minimizer of the client-averaged least-squares objective."""
    rows, rhs = [], []
    for s in shards:
        A = problem.A[s.indices]
        A = A.toarray() if sp.issparse(A) else A
        w = 1.0 / math.sqrt(len(s.indices))
        rows.append(A * w)
        rhs.append(problem.b[s.indices] * w)
    return np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]


def solve_optimum(problem: Problem, shards, tol: float = 1e-10, ridge: float = 1e-8, max_iter: int = 200_000):
    """Global minimizer: closed form for least squares, otherwise full-batch
    gradient descent with a capped Polyak stepsize on f + (ridge/2)||x||^2."""
    if isinstance(problem, LeastSquares):
        return least_squares_optimum(problem, shards)
    # full-batch objective is (L_sample + ridge)-smooth
    cap = 1.0 / (problem.sample_smoothness() + ridge)
    x = np.zeros(problem.dim)
    for _ in range(max_iter):
        f = client_loss(problem, x, shards) + 0.5 * ridge * float(x @ x)
        g = client_grad(problem, x, shards) + ridge * x
        gsq = float(g @ g)
        if math.sqrt(gsq) <= tol:
            return x
        x = x - min(f / (0.5 * gsq), cap) * g
    raise OptimumNotFound(f"gradient norm still {math.sqrt(gsq):.3e} after {max_iter} iterations")


def compute_heterogeneity(
    problem: Problem, shards, x_star_tolerance: float = 1e-10, x_star=None, ell_star: float = 0.0
) -> HeterogeneityReport:
    """sigma_f^2, zeta_*^2 and sigma_*^2 at the global optimum (exact finite sums)."""
    if x_star is None:
        x_star = solve_optimum(problem, shards, tol=x_star_tolerance)
    gaps, zetas, sigmas = [], [], []
    for s in shards:
        loss, g = problem.evaluate(x_star, s.indices)
        G = problem.per_sample_grads(x_star, s.indices)
        gaps.append(loss - ell_star)
        zetas.append(float(g @ g))
        dev = G - g
        sigmas.append(float(np.einsum("ij,ij->", dev, dev)) / len(s.indices))
    n = len(shards)
    return HeterogeneityReport(
        sigma_f_sq=math.fsum(gaps) / n,
        zeta_star_sq=math.fsum(zetas) / n,
        sigma_star_sq=math.fsum(sigmas) / n,
        smoothness_L=max(problem.sample_smoothness(s.indices) for s in shards),
        x_star=x_star,
        f_star=math.fsum(gaps) / n + ell_star,
    )


def estimate_L(grad_fn, dim: int | None = None, probes: int = 1000, seed: int = 0, scale: float = 1.0, points=None):
    """Largest observed ||grad(x) - grad(y)|| / ||x - y|| over probe pairs.

    Probes are drawn from N(0, scale^2 I) unless ``points`` supplies them, in
    which case consecutive points are paired. Coincident pairs are skipped.
    """
    if points is None:
        if probes < 2:
            raise ValueError("need at least 2 probes")
        gen = rngmod.stream(seed, rngmod.VERIFY, 0)
        points = scale * gen.standard_normal((probes, dim))
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise ValueError("need at least 2 probes")
    best = 0.0
    for x, y in zip(points[::2], points[1::2]):
        dist = np.linalg.norm(x - y)
        if dist == 0.0:
            continue
        best = max(best, float(np.linalg.norm(grad_fn(x) - grad_fn(y)) / dist))
    return best

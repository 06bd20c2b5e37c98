"""Local cost ensembles with exact and stochastic gradient oracles.

Two concrete families: the nonconvex regularized logistic classification
ensemble used in the benchmark experiments, and strongly convex quadratics
(which satisfy the gradient-dominance condition with nu = the smallest
eigenvalue of the average Hessian) for convergence-rate tests.

The global objective is always the average f(x) = (1/n) sum_i f_i(x).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .rng import substream

__all__ = [
    "ProblemError",
    "SingularHessianSum",
    "NoConvergence",
    "Problem",
    "ClassificationProblem",
    "QuadraticProblem",
    "make_classification_problem",
    "make_quadratic_problem",
    "NoisyOracle",
    "stochastic_gradient",
    "solve_reference_optimum",
    "problem_to_json",
    "problem_from_json",
]


class ProblemError(ValueError):
    pass


class SingularHessianSum(ProblemError):
    """Sum of local Hessians is singular; no closed-form optimum."""


class NoConvergence(RuntimeError):
    """Reference solver hit the iteration cap above tolerance."""


class Problem:
    """Ensemble of n local costs over R^d with value/gradient oracles."""

    n: int
    d: int
    smoothness_hint: float | None = None

    def local_value(self, i: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def local_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value(self, x: np.ndarray) -> float:
        return sum(self.local_value(i, x) for i in range(1, self.n + 1)) / self.n

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.grad_stack(x).mean(axis=0)

    def grad_stack(self, x: np.ndarray) -> np.ndarray:
        """(n, d) stack of the local gradients, all evaluated at the same x."""
        return np.stack([self.local_grad(i, x) for i in range(1, self.n + 1)])

    def fingerprint(self) -> str:
        raise NotImplementedError


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(eq=False)
class ClassificationProblem(Problem):
    """Regularized logistic ensemble.

    f_i(x) = (1/m) sum_j log(1 + exp(-u_ij x.v_ij))
             + sum_s lam * alpha * x_s^2 / (1 + alpha * x_s^2)

    The second term is nonconvex; its gradient per coordinate is
    2 * lam * alpha * x_s / (1 + alpha * x_s^2)^2.
    """

    features: np.ndarray  # (n, m, d)
    labels: np.ndarray  # (n, m) in {-1, +1}
    lam: float
    alpha: float

    def __post_init__(self) -> None:
        self.n, self.m, self.d = self.features.shape
        if not np.isfinite(self.features).all():
            raise ProblemError("features must be finite")
        if not np.isin(self.labels, (-1, 1)).all():
            raise ProblemError("labels must be in {-1, +1}")
        # logistic curvature bound plus regularizer curvature bound
        lmax = max(
            float(np.linalg.eigvalsh(v.T @ v / self.m)[-1]) for v in self.features
        )
        self.smoothness_hint = 0.25 * lmax + 2.0 * self.lam * self.alpha

    def _margins(self, i: int, x: np.ndarray) -> np.ndarray:
        return -self.labels[i - 1] * (self.features[i - 1] @ x)

    def local_value(self, i: int, x: np.ndarray) -> float:
        z = self._margins(i, x)
        loss = float(np.logaddexp(0.0, z).mean())
        xsq = x * x
        reg = float((self.lam * self.alpha * xsq / (1.0 + self.alpha * xsq)).sum())
        return loss + reg

    def local_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        z = self._margins(i, x)
        coef = -self.labels[i - 1] * _sigmoid(z)
        loss_grad = (coef @ self.features[i - 1]) / self.m
        denom = 1.0 + self.alpha * x * x
        reg_grad = 2.0 * self.lam * self.alpha * x / (denom * denom)
        return loss_grad + reg_grad

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.features.tobytes())
        h.update(self.labels.astype(np.int8).tobytes())
        h.update(np.array([self.lam, self.alpha]).tobytes())
        return "classification:" + h.hexdigest()[:16]


@dataclass(eq=False)
class QuadraticProblem(Problem):
    """f_i(x) = 0.5 (x - c_i)^T A_i (x - c_i) with A_i symmetric PD."""

    hessians: np.ndarray  # (n, d, d)
    offsets: np.ndarray  # (n, d)

    def __post_init__(self) -> None:
        self.n, self.d = self.offsets.shape
        avg = self.hessians.mean(axis=0)
        self.smoothness_hint = float(np.linalg.eigvalsh(avg)[-1])
        self.pl_constant = float(np.linalg.eigvalsh(avg)[0])

    def local_value(self, i: int, x: np.ndarray) -> float:
        e = x - self.offsets[i - 1]
        return 0.5 * float(e @ self.hessians[i - 1] @ e)

    def local_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.hessians[i - 1] @ (x - self.offsets[i - 1])

    def grad_stack(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("nij,nj->ni", self.hessians, x[None, :] - self.offsets)

    def optimum(self) -> tuple[np.ndarray, float]:
        """Closed-form minimizer of the average objective and its value."""
        total = self.hessians.sum(axis=0)
        rhs = np.einsum("nij,nj->i", self.hessians, self.offsets)
        try:
            x_star = np.linalg.solve(total, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularHessianSum(str(exc)) from exc
        cond = np.linalg.cond(total)
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularHessianSum(f"Hessian sum condition number {cond:.3g}")
        return x_star, self.value(x_star)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.hessians.tobytes())
        h.update(self.offsets.tobytes())
        return "quadratic:" + h.hexdigest()[:16]


def make_classification_problem(
    n: int,
    m: int,
    d: int,
    lam: float,
    alpha: float,
    rng: np.random.Generator,
) -> ClassificationProblem:
    """Draw standard-Gaussian features and uniform +-1 labels per agent."""
    if min(n, m, d) < 1:
        raise ProblemError("n, m, d must all be >= 1")
    if lam < 0 or alpha < 0:
        raise ProblemError("lam and alpha must be >= 0")
    features = rng.standard_normal((n, m, d))
    labels = rng.integers(0, 2, size=(n, m)) * 2 - 1
    return ClassificationProblem(
        features=features, labels=labels.astype(float), lam=lam, alpha=alpha
    )


def make_quadratic_problem(
    n: int,
    d: int,
    spectrum: tuple[float, float],
    heterogeneity: float,
    rng: np.random.Generator,
    center_optimum: bool = False,
) -> QuadraticProblem:
    """Random SPD quadratics with eigenvalues in [spectrum[0], spectrum[1]].

    `heterogeneity` scales the per-agent offsets c_i; `center_optimum`
    shifts them so the global minimizer is exactly the origin (useful when
    comparing instances across agent counts).
    """
    lo, hi = float(spectrum[0]), float(spectrum[1])
    if not (0 < lo <= hi):
        raise ProblemError(f"spectrum ({lo}, {hi}) must be positive")
    hessians = np.empty((n, d, d))
    for i in range(n):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        eigs = rng.uniform(lo, hi, size=d)
        hessians[i] = (q * eigs) @ q.T
    offsets = heterogeneity * rng.standard_normal((n, d))
    problem = QuadraticProblem(hessians=hessians, offsets=offsets)
    if center_optimum:
        x_star, _ = problem.optimum()
        problem = QuadraticProblem(hessians=hessians, offsets=offsets - x_star)
    return problem


@dataclass(eq=False)
class NoisyOracle:
    """Stochastic gradient oracle with per-agent, per-round noise streams.

    Draws are addressed by (seed, tag, agent, round), so every value is
    reproducible independently of call order and agents can be evaluated
    in parallel. `bias` (scalar or d-vector) is added to every draw for
    biased-gradient experiments; zero keeps the oracle unbiased.
    """

    problem: Problem
    noise_sigma: float
    seed: int
    tag: str = "oracle"
    bias: float | np.ndarray = 0.0

    def gradient(self, agent: int, x: np.ndarray, round_k: int) -> np.ndarray:
        if not 1 <= agent <= self.problem.n:
            raise ProblemError(f"agent {agent} outside [1..{self.problem.n}]")
        g = self.problem.local_grad(agent, x)
        if self.noise_sigma > 0:
            stream = substream(self.seed, self.tag, "noise", agent, round_k)
            g = g + self.noise_sigma * stream.standard_normal(self.problem.d)
        if np.any(self.bias):
            g = g + self.bias
        return g

    def gradient_stack(self, x_stack: np.ndarray, round_k: int) -> np.ndarray:
        return np.stack(
            [
                self.gradient(i + 1, x_stack[i], round_k)
                for i in range(self.problem.n)
            ]
        )


def stochastic_gradient(
    oracle: NoisyOracle, agent: int, x: np.ndarray, round_k: int
) -> np.ndarray:
    return oracle.gradient(agent, x, round_k)


def solve_reference_optimum(
    problem: Problem,
    tol: float = 1e-8,
    max_iters: int = 200_000,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Centralized full-gradient descent with backtracking line search.

    Stops when ||grad f|| <= tol and returns (x, f(x)). Raises NoConvergence
    if the cap is hit first.
    """
    x = np.zeros(problem.d) if x0 is None else np.asarray(x0, dtype=float).copy()
    fval = problem.value(x)
    step = 1.0
    for _ in range(max_iters):
        g = problem.grad(x)
        gnorm_sq = float(g @ g)
        if np.sqrt(gnorm_sq) <= tol:
            return x, fval
        while True:
            candidate = x - step * g
            fcand = problem.value(candidate)
            if fcand <= fval - 0.5 * step * gnorm_sq:
                break
            if step < 1e-18:
                raise NoConvergence("line search stalled below machine step")
            step *= 0.5
        x, fval = candidate, fcand
        step = min(step * 1.5, 1e6)
    g = problem.grad(x)
    if np.linalg.norm(g) <= tol:
        return x, problem.value(x)
    raise NoConvergence(
        f"gradient norm {np.linalg.norm(g):.3e} > tol {tol:.3e} "
        f"after {max_iters} iterations"
    )


def problem_to_json(problem: Problem) -> str:
    """Serialize the frozen dataset so the same instance can be re-run."""
    if isinstance(problem, ClassificationProblem):
        obj = {
            "kind": "classification",
            "lambda": problem.lam,
            "alpha": problem.alpha,
            "features": problem.features.tolist(),
            "labels": problem.labels.tolist(),
        }
    elif isinstance(problem, QuadraticProblem):
        obj = {
            "kind": "quadratic",
            "hessians": problem.hessians.tolist(),
            "offsets": problem.offsets.tolist(),
        }
    else:
        raise ProblemError(f"cannot serialize {type(problem).__name__}")
    return json.dumps(obj)


def problem_from_json(source: str | dict) -> Problem:
    obj = json.loads(source) if isinstance(source, str) else source
    kind = obj.get("kind")
    if kind == "classification":
        return ClassificationProblem(
            features=np.asarray(obj["features"], dtype=float),
            labels=np.asarray(obj["labels"], dtype=float),
            lam=float(obj["lambda"]),
            alpha=float(obj["alpha"]),
        )
    if kind == "quadratic":
        return QuadraticProblem(
            hessians=np.asarray(obj["hessians"], dtype=float),
            offsets=np.asarray(obj["offsets"], dtype=float),
        )
    raise ProblemError(f"unknown problem kind {kind!r}")

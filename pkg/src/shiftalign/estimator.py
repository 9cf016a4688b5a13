"""Target label-distribution estimation by simplex-constrained feature mean matching.

The estimate minimises ``||M_s p - mu_t||^2`` over the probability simplex,
where the columns of ``M_s`` are per-class source feature means and ``mu_t``
is the target feature mean. Both means are tracked as exponential moving
averages over minibatches because the feature map keeps changing during
training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericalError, WarmupError
from .synth import check_simplex

FADE_IN_EPOCHS = 5
SINGULAR_COND = 1e10
MAX_HALVINGS = 20


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{p >= 0, sum p = 1}`` by sorting and thresholding."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError("project_to_simplex expects a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise NumericalError("cannot project a non-finite vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def uniform_prior(c: int) -> np.ndarray:
    return np.full(c, 1.0 / c)


@dataclass
class MeanMatchState:
    """Running feature statistics and the current estimate.

    ``class_means`` is K x c with NaN columns for classes not yet seen.
    ``target_mean_mode`` is "ema" (running mean) or "batch" (latest batch only).
    """

    class_means: np.ndarray
    class_counts: np.ndarray
    target_mean: np.ndarray | None
    estimate: np.ndarray
    ema_decay: float = 0.9
    target_mean_mode: str = "ema"
    target_count: int = 0
    degenerate: bool = False
    objective: float = float("nan")

    @classmethod
    def fresh(cls, K: int, c: int, ema_decay: float = 0.9, target_mean_mode: str = "ema"):
        if not 0.0 <= ema_decay < 1.0:
            raise ConfigurationError("ema_decay must lie in [0, 1)")
        if target_mean_mode not in ("ema", "batch"):
            raise ConfigurationError(f"unknown target mean mode {target_mean_mode!r}")
        return cls(
            class_means=np.full((K, c), np.nan),
            class_counts=np.zeros(c, dtype=np.int64),
            target_mean=None,
            estimate=uniform_prior(c),
            ema_decay=ema_decay,
            target_mean_mode=target_mean_mode,
        )

    @property
    def ready(self) -> bool:
        return bool(np.all(self.class_counts > 0)) and self.target_mean is not None

    def snapshot(self) -> "MeanMatchState":
        return MeanMatchState(
            self.class_means.copy(), self.class_counts.copy(),
            None if self.target_mean is None else self.target_mean.copy(),
            self.estimate.copy(), self.ema_decay, self.target_mean_mode,
            self.target_count, self.degenerate, self.objective,
        )


def _ema(old, new, decay):
    return decay * old + (1.0 - decay) * new


def update_means(state: MeanMatchState, source_features, source_labels, target_features):
    """Fold one minibatch into the running means (in place) and return the state.

    A class's first appearance initialises its column with the batch mean.
    """
    fs = np.asarray(source_features, dtype=np.float64)
    ft = np.asarray(target_features, dtype=np.float64)
    labels = np.asarray(source_labels, dtype=np.int64)
    K, c = state.class_means.shape
    if fs.ndim != 2 or fs.shape[1] != K or ft.ndim != 2 or ft.shape[1] != K:
        raise DimensionError(f"features must have {K} columns")
    if labels.shape != (fs.shape[0],):
        raise DimensionError("one label per source row required")
    d = state.ema_decay
    for i in np.unique(labels):
        batch_mean = fs[labels == i].mean(axis=0)
        if state.class_counts[i] == 0:
            state.class_means[:, i] = batch_mean
        else:
            state.class_means[:, i] = _ema(state.class_means[:, i], batch_mean, d)
        state.class_counts[i] += int(np.sum(labels == i))
    if ft.shape[0]:
        batch_mean = ft.mean(axis=0)
        if state.target_mean is None or state.target_mean_mode == "batch":
            state.target_mean = batch_mean
        else:
            state.target_mean = _ema(state.target_mean, batch_mean, d)
        state.target_count += ft.shape[0]
    return state


def mean_match_objective(M, mu, p) -> float:
    r = M @ p - mu
    return float(r @ r)


def solve_mean_matching(M, mu, p0, steps: int = 50, lr: float | None = 0.1):
    """Projected gradient descent with backtracking from ``p0``.

    ``lr=None`` starts each step at ``1 / L`` with ``L = 2 * lambda_max(M^T M)``.
    Returns ``(p, objective trace)``; the trace never increases.
    """
    M = np.asarray(M, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    p = project_to_simplex(p0)
    if lr is None:
        L = 2.0 * np.linalg.eigvalsh(M.T @ M)[-1]
        lr = 1.0 / L if L > 0 else 1.0
    obj = mean_match_objective(M, mu, p)
    trace = [obj]
    for _ in range(steps):
        grad = 2.0 * M.T @ (M @ p - mu)
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient in mean matching")
        step = lr
        for _ in range(MAX_HALVINGS + 1):
            candidate = project_to_simplex(p - step * grad)
            cand_obj = mean_match_objective(M, mu, candidate)
            if cand_obj <= obj:
                break
            step *= 0.5
        else:
            trace.append(obj)
            break
        p, obj = candidate, cand_obj
        trace.append(obj)
    return p, trace


def estimate_prior(state: MeanMatchState, steps: int = 50, lr: float | None = 0.1) -> np.ndarray:
    """Refresh ``state.estimate`` from the running means, warm-started from the last estimate.

    Identifiability is judged on the sum-to-one augmented system ``[M_s; 1^T]``,
    since the simplex constraint pins down directions that ``M_s`` alone cannot
    (one feature, two classes is solvable). When that system is (near-)singular
    the previous estimate is kept and ``state.degenerate`` is set.
    """
    if not state.ready:
        missing = np.nonzero(state.class_counts == 0)[0].tolist()
        raise WarmupError(f"classes {missing} not yet seen" if missing else "no target features yet")
    M, mu = state.class_means, state.target_mean
    if not (np.all(np.isfinite(M)) and np.all(np.isfinite(mu))):
        raise NumericalError("running means contain non-finite values")
    augmented = np.vstack([M, np.ones((1, M.shape[1]))])
    gram = augmented.T @ augmented
    cond = np.linalg.cond(gram) if np.any(gram) else np.inf
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        state.degenerate = True
        state.objective = mean_match_objective(M, mu, state.estimate)
        return state.estimate
    state.degenerate = False
    p, trace = solve_mean_matching(M, mu, state.estimate, steps=steps, lr=lr)
    state.estimate = p
    state.objective = trace[-1]
    return p


def compute_gamma(source_prior, estimate) -> np.ndarray:
    """Class balancing weights ``p_t(i) / p_s(i)``."""
    ps = check_simplex(source_prior, "source_prior")
    pt = check_simplex(estimate, "estimate")
    if ps.shape != pt.shape:
        raise DimensionError("priors have different lengths")
    if np.any(ps <= 0):
        raise ConfigurationError("source prior has an empty class; every class needs source samples")
    return pt / ps


@dataclass(frozen=True)
class FadeInSchedule:
    epoch: int
    cutoff: int = FADE_IN_EPOCHS

    @property
    def alpha(self) -> float:
        return 1.0 / (1.0 + self.epoch) if self.epoch <= self.cutoff else 0.0


def fade_in_blend(estimate, source_prior, schedule: FadeInSchedule) -> np.ndarray:
    """``(estimate + alpha * source_prior) / (1 + alpha)``."""
    pt = np.asarray(estimate, dtype=np.float64)
    ps = np.asarray(source_prior, dtype=np.float64)
    a = schedule.alpha
    return (pt + a * ps) / (1.0 + a)

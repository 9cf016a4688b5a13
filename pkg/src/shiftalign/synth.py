"""Synthetic source/target domain pairs with controllable conditional and label shift.

Each class is a Gaussian in input space. The target domain draws its labels
from its own prior and passes each class-conditional through a per-class
affine map ``x -> A_i x + b_i``, so label shift and conditional shift can be
dialled independently.

Target labels are kept in a :class:`SealedLabels` object. Training code only
ever receives a :class:`TrainingView`, which does not carry them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigurationError, DimensionError, DomainError

KL_EPS = 1e-8
SIMPLEX_TOL = 1e-9


def check_simplex(p, name="distribution") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DimensionError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ConfigurationError(f"{name} is not a probability vector: {p}")
    return p


def kl_divergence(p, q) -> float:
    """Smoothed ``sum p_i log((p_i + eps) / (q_i + eps))``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence: lengths {p.shape} and {q.shape} differ")
    return float(np.sum(p * np.log((p + KL_EPS) / (q + KL_EPS))))


def binary_prior_for_kl(kl: float, source_prior=(0.5, 0.5)) -> np.ndarray:
    """Two-class target prior ``(q, 1-q)``, q >= p_s(0), with KL(source || target) = kl."""
    ps = check_simplex(source_prior, "source_prior")
    if ps.size != 2:
        raise DimensionError("binary_prior_for_kl needs a two-class source prior")
    if kl < 0:
        raise DomainError("KL level must be non-negative")
    if kl == 0:
        return ps.copy()

    def gap(q):
        return kl_divergence(ps, np.array([q, 1.0 - q])) - kl

    hi = 1.0 - 1e-12
    if gap(hi) < 0:
        raise DomainError(f"KL level {kl} not reachable from {ps}")
    q = brentq(gap, ps[0], hi, xtol=1e-14)
    return np.array([q, 1.0 - q])


@dataclass
class ShiftSpec:
    """Everything needed to draw one domain pair.

    ``means``/``covs`` describe the source class-conditionals. ``transforms``
    holds one ``(A_i, b_i)`` per class for the target; ``None`` means identity.
    """

    means: np.ndarray
    covs: np.ndarray
    source_prior: np.ndarray
    target_prior: np.ndarray
    transforms: list | None = None
    n_source: int = 2000
    n_target: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        self.source_prior = np.asarray(self.source_prior, dtype=np.float64)
        self.target_prior = np.asarray(self.target_prior, dtype=np.float64)

    @property
    def c(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def validate(self):
        c, d = self.c, self.d
        if self.covs.shape != (c, d, d):
            raise DimensionError(f"covs shape {self.covs.shape} != {(c, d, d)}")
        check_simplex(self.source_prior, "source_prior")
        check_simplex(self.target_prior, "target_prior")
        if self.source_prior.size != c or self.target_prior.size != c:
            raise DimensionError("priors must have one entry per class")
        for A, b in self.target_affine():
            if abs(np.linalg.det(A)) < 1e-12:
                raise ConfigurationError("conditional-shift matrix A_i must be invertible")
            if b.shape != (d,):
                raise DimensionError("conditional-shift offset b_i must have length d")
        if self.n_source < 1 or self.n_target < 1:
            raise DomainError("sample counts must be positive")

    def target_affine(self):
        if self.transforms is None:
            return [(np.eye(self.d), np.zeros(self.d)) for _ in range(self.c)]
        if len(self.transforms) != self.c:
            raise DimensionError("need one (A, b) transform per class")
        return [(np.asarray(A, dtype=np.float64), np.asarray(b, dtype=np.float64))
                for A, b in self.transforms]

    def target_gaussians(self):
        """Target class means and covariances after the affine shift."""
        means, covs = [], []
        for i, (A, b) in enumerate(self.target_affine()):
            means.append(A @ self.means[i] + b)
            covs.append(A @ self.covs[i] @ A.T)
        return np.array(means), np.array(covs)


@dataclass(frozen=True)
class TrainingView:
    """What a UDA trainer is allowed to see: labelled source, unlabelled target."""

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    n_classes: int

    @property
    def source_prior(self) -> np.ndarray:
        """Empirical source label distribution (class counts / n)."""
        counts = np.bincount(self.source_y, minlength=self.n_classes)
        return counts / counts.sum()


class SealedLabels:
    """Evaluation-only channel for target labels and true priors.

    Every read is counted so tests can assert that a training run never opened it.
    """

    def __init__(self, target_y, source_prior, target_prior):
        self._target_y = np.asarray(target_y, dtype=np.int64)
        self._source_prior = np.asarray(source_prior, dtype=np.float64)
        self._target_prior = np.asarray(target_prior, dtype=np.float64)
        self.reads = 0

    @property
    def target_y(self) -> np.ndarray:
        self.reads += 1
        return self._target_y

    @property
    def target_prior(self) -> np.ndarray:
        self.reads += 1
        return self._target_prior

    @property
    def source_prior(self) -> np.ndarray:
        self.reads += 1
        return self._source_prior


@dataclass
class DomainPair:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    sealed: SealedLabels = field(repr=False)
    n_classes: int = 2

    def training_view(self) -> TrainingView:
        return TrainingView(self.source_x, self.source_y, self.target_x, self.n_classes)

    @property
    def d(self) -> int:
        return self.source_x.shape[1]


def _draw(rng, prior, means, covs, n):
    c, d = means.shape
    try:
        chols = [np.linalg.cholesky(covs[i]) for i in range(c)]
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("class covariance is not positive definite") from exc
    for cov in covs:
        if not np.allclose(cov, cov.T):
            raise ConfigurationError("class covariance is not symmetric")
    y = rng.choice(c, size=n, p=prior)
    z = rng.standard_normal((n, d))
    x = np.empty((n, d))
    for i in range(c):
        rows = y == i
        x[rows] = means[i] + z[rows] @ chols[i].T
    return x, y


def generate(spec: ShiftSpec) -> DomainPair:
    spec.validate()
    src_seq, tgt_seq = np.random.SeedSequence(spec.seed).spawn(2)
    xs, ys = _draw(np.random.default_rng(src_seq), spec.source_prior, spec.means, spec.covs,
                   spec.n_source)
    t_means, t_covs = spec.target_gaussians()
    xt, yt = _draw(np.random.default_rng(tgt_seq), spec.target_prior, t_means, t_covs,
                   spec.n_target)
    sealed = SealedLabels(yt, spec.source_prior, spec.target_prior)
    return DomainPair(xs, ys, xt, sealed, spec.c)


def shift_sweep(base: ShiftSpec, levels) -> list[DomainPair]:
    """One pair per target prior; conditionals fixed, seeds derived from ``base.seed``."""
    levels = list(levels)
    if not levels:
        raise DomainError("shift_sweep needs at least one level")
    seeds = np.random.SeedSequence(base.seed).generate_state(len(levels))
    pairs = []
    for prior, seed in zip(levels, seeds):
        prior = check_simplex(prior, "level")
        pairs.append(generate(replace(base, target_prior=prior, seed=int(seed))))
    return pairs


def gaussian_posterior(x, means, covs, prior) -> np.ndarray:
    """Exact class posterior for a Gaussian mixture, computed in log space."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    prior = np.asarray(prior, dtype=np.float64)
    c = len(prior)
    logp = np.full((x.shape[0], c), -np.inf)
    for i in range(c):
        if prior[i] == 0:
            continue
        diff = x - means[i]
        cov_inv = np.linalg.inv(covs[i])
        _, logdet = np.linalg.slogdet(covs[i])
        maha = np.einsum("nd,de,ne->n", diff, cov_inv, diff)
        logp[:, i] = np.log(prior[i]) - 0.5 * (maha + logdet)
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=1, keepdims=True)


# -- file I/O ----------------------------------------------------------------


def write_dataset(path, x, y, n_classes: int):
    """Header ``c,d,n`` then rows ``label,x_1,...,x_d``; floats written round-trip exact."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = x.shape
    if y.shape != (n,):
        raise DimensionError("one label per row required")
    lines = [f"{n_classes},{d},{n}"]
    for label, row in zip(y, x):
        lines.append(",".join([str(int(label))] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path):
    """Inverse of :func:`write_dataset`; returns ``(x, y, n_classes)``."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        c, d, n = (int(v) for v in header)
        data = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=str)
    if data.shape != (n, d + 1) and not (n == 0):
        raise DimensionError(f"{path}: expected {n} rows of {d + 1} fields, got {data.shape}")
    y = data[:, 0].astype(np.int64)
    x = np.array([[float(v) for v in row] for row in data[:, 1:]], dtype=np.float64).reshape(n, d)
    return x, y, c


def write_pair(pair: DomainPair, directory):
    """Trainer-visible ``source.csv``/``target.csv`` plus evaluator-only files under ``sealed/``."""
    directory = Path(directory)
    (directory / "sealed").mkdir(parents=True, exist_ok=True)
    c = pair.n_classes
    write_dataset(directory / "source.csv", pair.source_x, pair.source_y, c)
    write_dataset(directory / "target.csv", pair.target_x,
                  np.full(len(pair.target_x), -1), c)
    sealed = pair.sealed
    write_dataset(directory / "sealed" / "target_labels.csv", pair.target_x, sealed.target_y, c)
    priors = {"source_prior": sealed.source_prior.tolist(),
              "target_prior": sealed.target_prior.tolist()}
    (directory / "sealed" / "priors.json").write_text(json.dumps(priors, indent=2) + "\n")


def read_training_view(directory) -> TrainingView:
    directory = Path(directory)
    xs, ys, c = read_dataset(directory / "source.csv")
    xt, _, _ = read_dataset(directory / "target.csv")
    return TrainingView(xs, ys, xt, c)


def read_pair(directory) -> DomainPair:
    """Evaluator-side loader: opens the sealed files as well."""
    directory = Path(directory)
    view = read_training_view(directory)
    _, yt, _ = read_dataset(directory / "sealed" / "target_labels.csv")
    priors = json.loads((directory / "sealed" / "priors.json").read_text())
    sealed = SealedLabels(yt, priors["source_prior"], priors["target_prior"])
    return DomainPair(view.source_x, view.source_y, view.target_x, sealed, view.n_classes)

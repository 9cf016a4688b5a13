"""Adversarial training loops: DANN-style baseline, joint Dis&Cls head, and the
class-weighted variant that alternates prior estimation (Infer) with
alignment (Align).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .errors import (ConfigurationError, DomainError, InsufficientDataError, NumericalError,
                     WarmupError)
from .estimator import (FadeInSchedule, MeanMatchState, compute_gamma, estimate_prior,
                        fade_in_blend, update_means)
from .model import (JOINT, SPLIT, Architecture, ModelBundle, class_posterior, domain_prob,
                    extract, extract_graph, init_model, joint_logits_graph,
                    log_conditional_score, mlp, put_params, split_logits_graph)
from .posterior import align_posterior
from .synth import DomainPair, TrainingView, kl_divergence

log = logging.getLogger(__name__)

MODES = ("source_only", "dann_baseline", "joint_no_gamma", "cls_full", "cls_split_heads")
HEAD_FOR_MODE = {
    "source_only": SPLIT,
    "dann_baseline": SPLIT,
    "joint_no_gamma": JOINT,
    "cls_full": JOINT,
    "cls_split_heads": SPLIT,
}
GAMMA_MODES = ("cls_full", "cls_split_heads")

TRACE_COLUMNS = ("epoch", "kl_to_truth", "l1_to_truth", "objective", "alpha")
METRIC_COLUMNS = ("epoch", "src_acc", "tgt_acc", "dom_acc", "est_kl", "est_l1",
                  "loss_cls", "loss_adv_d", "loss_adv_f", "alpha")


@dataclass
class TrainConfig:
    """Training options.

    ``weight_domain_term`` also weights the discriminator's source term by
    gamma in the class-aware modes; without it the domain unit keeps matching
    the unweighted source marginal. ``correct_posterior`` reports target
    accuracy after posterior alignment. It is off by default because a
    gamma-weighted head already predicts under the estimated target prior.
    """

    mode: str = "cls_full"
    lam: float = 1.0
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-3
    momentum: float = 0.9
    fade_in: bool = True
    est_steps: int = 50
    est_lr: float = 0.1
    ema_decay: float = 0.9
    target_mean_mode: str = "ema"
    infer_every: str = "epoch"
    weight_domain_term: bool = True
    correct_posterior: bool = False
    K: int = 16
    extractor_hidden: tuple = (64, 64)
    head_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        self.extractor_hidden = tuple(self.extractor_hidden)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.infer_every not in ("epoch", "batch"):
            raise ConfigurationError("infer_every must be 'epoch' or 'batch'")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)

    def architecture(self, d: int, c: int) -> Architecture:
        return Architecture(d=d, c=c, K=self.K, extractor_hidden=self.extractor_hidden,
                            head_hidden=self.head_hidden, head=HEAD_FOR_MODE[self.mode])

    @property
    def uses_gamma(self) -> bool:
        return self.mode in GAMMA_MODES

    @property
    def uses_estimator(self) -> bool:
        return self.mode != "source_only"


class SGDMomentum:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            v = self.momentum * self.velocity.get(name, 0.0) + g
            self.velocity[name] = v
            params[name] = params[name] - self.lr * v


# -- objectives ------------------------------------------------------------------------
#
# Each builder records one forward pass on ``tape`` and returns the scalar
# objective terms (to be maximised). The step functions negate them.


def joint_terms(nodes, arch: Architecture, xs, ys, xt, weights, domain_weights=None) -> dict:
    c = arch.c
    tape = next(iter(nodes.values())).tape
    ps = ad.softmax(joint_logits_graph(extract_graph(tape.const(xs), nodes, arch), nodes, arch))
    terms = {"cls": ad.weighted_mean(log_conditional_score(ps, ys, c), weights)}
    if xt is not None:
        pt = ad.softmax(joint_logits_graph(extract_graph(tape.const(xt), nodes, arch), nodes, arch))
        dom_t = ad.column(pt, c)
        terms["src_real"] = _source_mean(ad.log(ad.one_minus(ad.column(ps, c))), domain_weights)
        terms["tgt_fake"] = ad.mean(ad.log(dom_t))
        terms["tgt_fool"] = ad.mean(ad.log(ad.one_minus(dom_t)))
    return terms


def split_terms(nodes, arch: Architecture, xs, ys, xt, weights, domain_weights=None) -> dict:
    tape = next(iter(nodes.values())).tape
    cls_s, dis_s = split_logits_graph(extract_graph(tape.const(xs), nodes, arch), nodes, arch)
    probs = ad.softmax(cls_s)
    terms = {"cls": ad.weighted_mean(ad.log(ad.take(probs, ys)), weights)}
    if xt is not None:
        _, dis_t = split_logits_graph(extract_graph(tape.const(xt), nodes, arch), nodes, arch)
        dom_s = ad.column(ad.sigmoid(dis_s), 0)
        dom_t = ad.column(ad.sigmoid(dis_t), 0)
        terms["src_real"] = _source_mean(ad.log(ad.one_minus(dom_s)), domain_weights)
        terms["tgt_fake"] = ad.mean(ad.log(dom_t))
        terms["tgt_fool"] = ad.mean(ad.log(ad.one_minus(dom_t)))
    return terms


def _source_mean(values, weights):
    return ad.mean(values) if weights is None else ad.weighted_mean(values, weights)


def head_loss(terms) -> ad.Node:
    """Negated Dis&Cls objective: class term plus the discriminator's two log terms."""
    total = terms["cls"]
    if "src_real" in terms:
        total = ad.add(total, ad.add(terms["src_real"], terms["tgt_fake"]))
    return ad.scale(total, -1.0)


def extractor_loss(terms, lam: float) -> ad.Node:
    """Negated extractor objective: class term plus lambda times the fooling term."""
    total = terms["cls"]
    if "tgt_fool" in terms and lam != 0:
        total = ad.add(total, ad.scale(terms["tgt_fool"], lam))
    return ad.scale(total, -1.0)


def sample_weights(labels, gamma) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if gamma is None:
        return np.ones(labels.shape[0])
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma < 0):
        raise DomainError(f"gamma has negative entries: {gamma}")
    return gamma[labels]


def loss_and_grads(model: ModelBundle, xs, ys, xt, weights, lam: float, role: str,
                   domain_weights=None):
    """Build one graph and differentiate the head ("head") or extractor ("extractor") loss.

    Returns ``(loss value, grads, terms as floats)``.
    """
    names = model.head_names if role == "head" else model.extractor_names
    tape = Tape()
    nodes = put_params(tape, model, names=set(names))
    build = joint_terms if model.arch.head == JOINT else split_terms
    terms = build(nodes, model.arch, xs, ys, xt, weights, domain_weights)
    loss = head_loss(terms) if role == "head" else extractor_loss(terms, lam)
    grads = tape.backward(loss)
    values = {k: float(v.value) for k, v in terms.items()}
    loss_value = float(loss.value)
    if not math.isfinite(loss_value):
        raise NumericalError(f"non-finite {role} loss; terms={values}")
    return loss_value, grads, values


def _report(head_terms, ext_terms) -> dict:
    out = {"loss_cls": -head_terms["cls"], "loss_adv_d": float("nan"), "loss_adv_f": float("nan")}
    if "src_real" in head_terms:
        out["loss_adv_d"] = -(head_terms["src_real"] + head_terms["tgt_fake"])
        out["loss_adv_f"] = -ext_terms["tgt_fool"]
    return out


def _alternating_step(model, opt_head, opt_ext, xs, ys, xt, weights, lam, domain_weights):
    _, g_head, head_terms = loss_and_grads(model, xs, ys, xt, weights, lam, "head", domain_weights)
    opt_head.step(model.params, g_head)
    _, g_ext, ext_terms = loss_and_grads(model, xs, ys, xt, weights, lam, "extractor",
                                         domain_weights)
    opt_ext.step(model.params, g_ext)
    return _report(head_terms, ext_terms)


def step_baseline(model, opt_head, opt_ext, batch_s, batch_t, lam=1.0, gamma=None,
                  weight_domain=False):
    """Split heads: Cls+Dis ascent step, then extractor ascent step. ``batch_t=None``
    drops every target term (source-only training)."""
    if model.arch.head != SPLIT:
        raise ConfigurationError("step_baseline needs split heads")
    xs, ys = batch_s
    w = sample_weights(ys, gamma)
    return _alternating_step(model, opt_head, opt_ext, xs, ys, batch_t, w, lam,
                             w if weight_domain and gamma is not None else None)


def step_joint(model, opt_head, opt_ext, batch_s, batch_t, gamma=None, lam=1.0,
               weight_domain=False):
    """Joint (c+1)-way head; ``gamma`` weights each source sample's class term by its class.

    With ``weight_domain`` the source "real" term of the discriminator is weighted too.
    """
    if model.arch.head != JOINT:
        raise ConfigurationError("step_joint needs the joint head")
    xs, ys = batch_s
    if gamma is not None and len(gamma) != model.arch.c:
        raise DomainError("gamma must have one entry per class")
    w = sample_weights(ys, gamma)
    return _alternating_step(model, opt_head, opt_ext, xs, ys, batch_t, w, lam,
                             w if weight_domain and gamma is not None else None)


# -- training loop ---------------------------------------------------------------------


class Evaluator:
    """Scores a model against the sealed target labels. Only evaluation code holds one."""

    def __init__(self, pair: DomainPair):
        self._sealed = pair.sealed
        self._target_x = pair.target_x

    def __call__(self, model, estimate=None, gamma=None) -> dict:
        """Target accuracy (after posterior correction when ``gamma`` is given) and
        estimator error against the true target prior."""
        sealed_y = self._sealed.target_y
        true_prior = self._sealed.target_prior
        post = class_posterior(model, self._target_x)
        if gamma is not None:
            post = np.nan_to_num(align_posterior(post, gamma, strict=False), nan=-1.0)
        out = {"tgt_acc": float(np.mean(post.argmax(axis=1) == sealed_y)),
               "est_kl": float("nan"), "est_l1": float("nan")}
        if estimate is not None:
            out["est_kl"] = kl_divergence(estimate, true_prior)
            out["est_l1"] = float(np.abs(estimate - true_prior).sum())
        return out


@dataclass
class TrainResult:
    model: ModelBundle
    state: MeanMatchState | None
    history: list[dict]
    events: list[str] = field(default_factory=list)
    gamma: np.ndarray | None = None
    trace: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.history[-1]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _infer_pass(model, view, state, batch_size):
    """Frozen-model sweep over both domains, folding feature means into ``state``."""
    fs_all = extract(model, view.source_x)
    ft_all = extract(model, view.target_x)
    ns, nt = len(fs_all), len(ft_all)
    n_batches = max(1, math.ceil(max(ns, nt) / batch_size))
    s_edges = np.linspace(0, ns, n_batches + 1).astype(int)
    t_edges = np.linspace(0, nt, n_batches + 1).astype(int)
    for b in range(n_batches):
        s, t = slice(s_edges[b], s_edges[b + 1]), slice(t_edges[b], t_edges[b + 1])
        update_means(state, fs_all[s], view.source_y[s], ft_all[t])


def balanced_domain_accuracy(p_source, p_target) -> float:
    """Balanced accuracy of the rule "target iff p > 0.5"."""
    return 0.5 * (float(np.mean(np.asarray(p_source) <= 0.5))
                  + float(np.mean(np.asarray(p_target) > 0.5)))


def run_training(view: TrainingView, config: TrainConfig, evaluator: Evaluator | None = None,
                 on_epoch=None) -> TrainResult:
    """Alternate Infer (prior estimate from frozen features) and Align (adversarial steps).

    ``view`` carries no target labels; truth-dependent metrics come only from
    ``evaluator`` and are NaN without one. History row 0 is the untrained model.
    """
    config.validate()
    if isinstance(view, DomainPair):
        raise ConfigurationError("pass pair.training_view(), not the pair with sealed labels")
    c = view.n_classes
    arch = config.architecture(view.source_x.shape[1], c)
    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = init_model(arch, np.random.default_rng(init_seq))
    rng = np.random.default_rng(shuffle_seq)
    ps = view.source_prior
    if np.any(ps <= 0):
        raise ConfigurationError("every class must appear in the source data")

    opt_head = SGDMomentum(config.lr, config.momentum)
    opt_ext = SGDMomentum(config.lr, config.momentum)
    state = (MeanMatchState.fresh(arch.K, c, config.ema_decay, config.target_mean_mode)
             if config.uses_estimator else None)
    events: list[str] = []
    history: list[dict] = []
    trace: list[dict] = []
    gamma = None
    fading = config.fade_in and config.uses_gamma

    def record(epoch, losses, alpha):
        row = {"epoch": epoch}
        row["src_acc"] = float(np.mean(class_posterior(model, view.source_x).argmax(1) == view.source_y))
        row["dom_acc"] = balanced_domain_accuracy(domain_prob(model, view.source_x),
                                                  domain_prob(model, view.target_x))
        estimate = state.estimate.copy() if state is not None else None
        if evaluator is not None:
            eval_gamma = (compute_gamma(ps, estimate)
                          if config.correct_posterior and config.uses_gamma else None)
            row.update(evaluator(model, estimate, eval_gamma))
        else:
            row.update({"tgt_acc": float("nan"), "est_kl": float("nan"), "est_l1": float("nan")})
        row.update(losses)
        row["alpha"] = alpha
        history.append({k: row[k] for k in METRIC_COLUMNS})
        if state is not None:
            trace.append({"epoch": epoch, "kl_to_truth": row["est_kl"],
                          "l1_to_truth": row["est_l1"], "objective": state.objective,
                          "alpha": alpha})
        if on_epoch is not None:
            on_epoch(epoch, model, state)

    nan_losses = {"loss_cls": float("nan"), "loss_adv_d": float("nan"), "loss_adv_f": float("nan")}
    record(0, nan_losses, 1.0 if fading else 0.0)

    def refresh_gamma(epoch):
        if state is None:
            return None
        try:
            estimate_prior(state, config.est_steps, config.est_lr)
        except WarmupError as exc:
            events.append(f"epoch {epoch}: estimator warm-up ({exc}); gamma=1")
            return None
        if state.degenerate:
            events.append(f"epoch {epoch}: degenerate class means; estimate held")
        if not config.uses_gamma:
            return None
        target = (fade_in_blend(state.estimate, ps, FadeInSchedule(epoch))
                  if config.fade_in else state.estimate)
        return compute_gamma(ps, target)

    ns, nt = len(view.source_x), len(view.target_x)
    for epoch in range(1, config.epochs + 1):
        alpha = FadeInSchedule(epoch).alpha if fading else 0.0
        if state is not None:
            _infer_pass(model, view, state, config.batch_size)
            gamma = refresh_gamma(epoch)

        src_batches = _batches(ns, config.batch_size, rng)
        # source_only must not even consume randomness on the target side
        tgt_order = rng.permutation(nt) if config.mode != "source_only" else None
        sums, counts = {}, 0
        for b, s_idx in enumerate(src_batches):
            xs, ys = view.source_x[s_idx], view.source_y[s_idx]
            if config.mode == "source_only":
                xt = None
            else:
                start = (b * config.batch_size) % nt
                t_idx = np.take(tgt_order, np.arange(start, start + len(s_idx)), mode="wrap")
                xt = view.target_x[t_idx]
            if state is not None and config.infer_every == "batch" and xt is not None:
                update_means(state, extract(model, xs), ys, extract(model, xt))
                gamma = refresh_gamma(epoch)
            if model.arch.head == JOINT:
                losses = step_joint(model, opt_head, opt_ext, (xs, ys), xt, gamma, config.lam,
                                    config.weight_domain_term)
            else:
                losses = step_baseline(model, opt_head, opt_ext, (xs, ys), xt, config.lam, gamma,
                                       config.weight_domain_term)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v
            counts += 1
        record(epoch, {k: v / counts for k, v in sums.items()}, alpha)

    if state is not None and config.uses_gamma:
        gamma = compute_gamma(ps, state.estimate)
    return TrainResult(model, state, history, events, gamma, trace)


def write_metrics_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in history:
            writer.writerow([_fmt(row[k]) for k in METRIC_COLUMNS])


def write_estimator_trace(path, trace, run=None):
    """Per-epoch estimator CSV; truth columns are NaN when no evaluator was supplied."""
    columns = ("run",) * (run is not None) + TRACE_COLUMNS
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in trace:
            writer.writerow([run] * (run is not None) + [_fmt(row[k]) for k in TRACE_COLUMNS])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# -- diagnostics ------------------------------------------------------------------------


def _train_probe_discriminator(fs, ft, rng, steps=300, lr=0.1, hidden=32):
    x = np.vstack([fs, ft])
    y = np.concatenate([np.zeros(len(fs), dtype=int), np.ones(len(ft), dtype=int)])
    # class-balanced weights so unequal domain sizes do not bias the probe
    w = np.where(y == 1, len(x) / (2 * len(ft)), len(x) / (2 * len(fs)))
    params = {}
    for i, (fi, fo) in enumerate([(x.shape[1], hidden), (hidden, 2)]):
        bound = np.sqrt(6.0 / (fi + fo))
        params[f"p.{i}.W"] = rng.uniform(-bound, bound, size=(fi, fo))
        params[f"p.{i}.b"] = np.zeros(fo)
    opt = SGDMomentum(lr, 0.9)
    for _ in range(steps):
        tape = Tape()
        nodes = {k: tape.param(k, v) for k, v in params.items()}
        logits = mlp(tape.const(x), nodes, "p", 2)
        loss = ad.weighted_mean(ad.softmax_cross_entropy(logits, y), w)
        opt.step(params, tape.backward(loss))
    return params


def _probe_predict(params, x):
    tape = Tape()
    nodes = {k: tape.const(v) for k, v in params.items()}
    return ad.softmax(mlp(tape.const(x), nodes, "p", 2)).value[:, 1]


def domain_confusion_diagnostic(model: ModelBundle | None, data, seed: int = 0,
                                steps: int = 300) -> float:
    """Held-out balanced accuracy of a freshly trained domain classifier on features.

    ``data`` is anything with ``source_x`` and ``target_x``; ``model=None`` probes
    the raw inputs. 0.5 means the two feature distributions look identical.
    """
    fs = data.source_x if model is None else extract(model, data.source_x)
    ft = data.target_x if model is None else extract(model, data.target_x)
    rng = np.random.default_rng(seed)
    s_perm, t_perm = rng.permutation(len(fs)), rng.permutation(len(ft))
    s_tr, s_te = s_perm[: len(fs) // 2], s_perm[len(fs) // 2:]
    t_tr, t_te = t_perm[: len(ft) // 2], t_perm[len(ft) // 2:]
    train = np.vstack([fs[s_tr], ft[t_tr]])
    mu, sd = train.mean(axis=0), train.std(axis=0) + 1e-8
    z = lambda a: (a - mu) / sd  # noqa: E731
    params = _train_probe_discriminator(z(fs[s_tr]), z(ft[t_tr]), rng, steps=steps)
    return balanced_domain_accuracy(_probe_predict(params, z(fs[s_te])),
                                    _probe_predict(params, z(ft[t_te])))


def concept_shift_probe(model: ModelBundle, pair: DomainPair, bins: int = 10,
                        min_count: int = 10) -> float:
    """Mean |p_s(y | bin) - p_t(y | bin)| over feature bins, using the sealed target labels.

    Features are projected onto their first pooled principal direction and cut
    into equal-mass bins; bins with fewer than ``min_count`` rows in either
    domain are skipped. The gap is averaged over classes and weighted by bin mass.
    """
    fs, ft = extract(model, pair.source_x), extract(model, pair.target_x)
    ys, yt = pair.source_y, pair.sealed.target_y
    c = pair.n_classes
    pooled = np.vstack([fs, ft])
    centre = pooled.mean(axis=0)
    _, _, vt = np.linalg.svd(pooled - centre, full_matrices=False)
    ps_proj, pt_proj = (fs - centre) @ vt[0], (ft - centre) @ vt[0]
    edges = np.quantile(np.concatenate([ps_proj, pt_proj]), np.linspace(0, 1, bins + 1))
    bs = np.clip(np.searchsorted(edges, ps_proj, side="right") - 1, 0, bins - 1)
    bt = np.clip(np.searchsorted(edges, pt_proj, side="right") - 1, 0, bins - 1)
    total, mass = 0.0, 0
    for b in range(bins):
        in_s, in_t = ys[bs == b], yt[bt == b]
        if len(in_s) < min_count or len(in_t) < min_count:
            continue
        freq_s = np.bincount(in_s, minlength=c) / len(in_s)
        freq_t = np.bincount(in_t, minlength=c) / len(in_t)
        weight = len(in_s) + len(in_t)
        total += weight * float(np.mean(np.abs(freq_s - freq_t)))
        mass += weight
    if mass == 0:
        raise InsufficientDataError("every feature bin had fewer than the minimum samples")
    return total / mass

"""Scenario registry and replicate runner.

A scenario maps one seed to a :class:`SeedResult`: scalar summaries, full
training histories and plot-ready series. :func:`run_scenario` runs every
seed, writes ``<outdir>/<scenario>/<seed>/{metrics,estimator,summary}.csv`` and a
``report.json`` with medians and quartiles over seeds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, IncompleteReportError
from .estimator import MeanMatchState, compute_gamma, estimate_prior, update_means
from .model import class_posterior
from .posterior import align_posterior, evaluate_posteriors
from .synth import (ShiftSpec, binary_prior_for_kl, generate, kl_divergence, shift_sweep)
from .trainer import (METRIC_COLUMNS, TRACE_COLUMNS, Evaluator, TrainConfig, concept_shift_probe,
                      domain_confusion_diagnostic, run_training)

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    scenario: str
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    outdir: str = "runs"
    train: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(
                f"unknown scenario {self.scenario!r}; available: {', '.join(sorted(SCENARIOS))}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        TrainConfig.from_dict(self.train).validate()

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - {"scenario", "seeds", "outdir", "train", "params"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "scenario" not in data:
            raise ConfigurationError("config needs a 'scenario'")
        return cls(**data)

    def digest(self) -> str:
        payload = {k: v for k, v in asdict(self).items() if k != "outdir"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SeedResult:
    summary: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)

    def add_run(self, name, result):
        self.histories[name] = result.history
        if result.trace:
            self.traces[name] = result.trace


# -- shared builders ------------------------------------------------------------------


def two_gaussians(sep, target_prior, seed, n=2000, transforms=None) -> ShiftSpec:
    return ShiftSpec(means=[[-sep, 0.0], [sep, 0.0]], covs=[np.eye(2), np.eye(2)],
                     source_prior=[0.5, 0.5], target_prior=target_prior,
                     transforms=transforms, n_source=n, n_target=n, seed=seed)


def _train(pair, cfg: ExperimentConfig, seed, **overrides):
    options = {**cfg.train, **overrides, "seed": seed}
    return run_training(pair.training_view(), TrainConfig.from_dict(options), Evaluator(pair))


VARIANTS = {
    "source_only": {"mode": "source_only"},
    "dann_baseline": {"mode": "dann_baseline"},
    "joint_no_gamma": {"mode": "joint_no_gamma"},
    "cls_full": {"mode": "cls_full"},
    "cls_split_heads": {"mode": "cls_split_heads"},
    "cls_no_fadein": {"mode": "cls_full", "fade_in": False},
}


def _variants(cfg, default):
    names = cfg.params.get("modes", default)
    for name in names:
        if name not in VARIANTS:
            raise ConfigurationError(f"unknown mode/variant {name!r}")
    return names


# -- scenarios ---------------------------------------------------------------------------


def noshift_sanity(seed, cfg):
    """Identical source and target distributions; every mode should transfer."""
    p = cfg.params
    pair = generate(two_gaussians(p.get("sep", 1.5), [0.5, 0.5], seed, p.get("n", 2000)))
    out = SeedResult()
    for name in _variants(cfg, list(VARIANTS)[:5]):
        res = _train(pair, cfg, seed, **VARIANTS[name])
        out.add_run(name, res)
        out.summary[f"src_acc[{name}]"] = res.final["src_acc"]
        out.summary[f"tgt_acc[{name}]"] = res.final["tgt_acc"]
        out.summary[f"acc_gap[{name}]"] = abs(res.final["src_acc"] - res.final["tgt_acc"])
    return out


def labelshift_sweep(seed, cfg):
    """Target accuracy as the two-class label shift grows (robustness curve)."""
    p = cfg.params
    levels = p.get("kl_levels", [0.0, 0.1, 0.3, 0.7, 1.2])
    base = two_gaussians(p.get("sep", 1.5), [0.5, 0.5], seed, p.get("n", 2000))
    priors = [binary_prior_for_kl(k, base.source_prior) for k in levels]
    pairs = shift_sweep(base, priors)
    kls = [kl_divergence(base.source_prior, pair.sealed.target_prior) for pair in pairs]
    out = SeedResult()
    for i, kl in enumerate(kls):
        out.summary[f"kl[level={i}]"] = kl
    for name in _variants(cfg, ["source_only", "dann_baseline", "cls_full"]):
        accs = []
        for i, pair in enumerate(pairs):
            res = _train(pair, cfg, seed, **VARIANTS[name])
            out.add_run(f"{name}@level{i}", res)
            accs.append(res.final["tgt_acc"])
            out.summary[f"tgt_acc[{name},level={i}]"] = res.final["tgt_acc"]
        out.series[f"accuracy_vs_kl_{name}"] = (kls, accs)
    return out


def estimator_convergence(seed, cfg):
    """KL between the running prior estimate and the true target prior, per epoch."""
    p = cfg.params
    prior = p.get("target_prior", [0.8, 0.2])
    pair = generate(two_gaussians(p.get("sep", 1.5), prior, seed, p.get("n", 2000)))
    res = _train(pair, cfg, seed, mode="cls_full")
    epochs = [row["epoch"] for row in res.history]
    kls = [row["est_kl"] for row in res.history]
    out = SeedResult()
    out.add_run("cls_full", res)
    out.series["estimator_kl"] = (epochs, kls)
    out.summary["est_kl[epoch=0]"] = kls[0]
    out.summary["est_kl[final]"] = kls[-1]
    out.summary["improved"] = float(kls[-1] < kls[0])
    out.summary["tgt_acc[final]"] = res.final["tgt_acc"]
    return out


def consistency_setup(seed, n, c=3, d=4, prior=(0.5, 0.3, 0.2)):
    """Aligned-conditional Gaussians (no conditional shift) for the consistency check."""
    means = np.array([[3.0, 0.0, 0.0, 1.0], [0.0, 3.0, 0.0, 1.0], [0.0, 0.0, 3.0, 1.0]])[:c, :d]
    spec = ShiftSpec(means=means, covs=[np.eye(d)] * c, source_prior=np.full(c, 1.0 / c),
                     target_prior=np.asarray(prior), n_source=n, n_target=n, seed=seed)
    return generate(spec)


def full_batch_estimate(view, steps=2000):
    """Mean matching on the raw inputs with whole-dataset means."""
    c = view.n_classes
    state = MeanMatchState.fresh(view.source_x.shape[1], c, ema_decay=0.0)
    update_means(state, view.source_x, view.source_y, view.target_x)
    estimate_prior(state, steps=steps, lr=None)
    return state


def consistency_curve(seed, cfg):
    """Estimator error versus sample size with exactly aligned conditionals."""
    sizes = cfg.params.get("sizes", [100, 1000, 10000])
    out = SeedResult()
    errs = []
    for n in sizes:
        pair = consistency_setup(seed, n)
        state = full_batch_estimate(pair.training_view())
        err = float(np.abs(state.estimate - pair.sealed.target_prior).sum())
        errs.append(err)
        out.summary[f"l1[n={n}]"] = err
        M = state.class_means
        out.summary[f"cond[n={n}]"] = float(np.linalg.cond(M.T @ M))
    out.series["consistency_l1"] = (list(sizes), errs)
    return out


def concept_shift_demo(seed, cfg):
    """Concept shift in feature space: no shift vs label shift, marginal vs class-aware alignment."""
    p = cfg.params
    sep, n = p.get("sep", 2.5), p.get("n", 4000)
    prior = p.get("target_prior", [0.9, 0.1])
    same = generate(two_gaussians(sep, [0.5, 0.5], seed, n))
    shifted = generate(two_gaussians(sep, prior, seed, n))
    out = SeedResult()
    for key, pair, mode in [("noshift_dann", same, "dann_baseline"),
                            ("labelshift_dann", shifted, "dann_baseline"),
                            ("labelshift_cls", shifted, "cls_full")]:
        res = _train(pair, cfg, seed, mode=mode)
        out.add_run(key, res)
        out.summary[f"probe[{key}]"] = concept_shift_probe(res.model, pair)
        out.summary[f"tgt_acc[{key}]"] = res.final["tgt_acc"]
    return out


def partial_uda(seed, cfg):
    """Three source classes, one absent from the target."""
    p = cfg.params
    prior = np.asarray(p.get("target_prior", [0.6, 0.4, 0.0]))
    means = np.array([[-2.5, 0.0], [2.5, 0.0], [0.0, 3.0]])
    spec = ShiftSpec(means=means, covs=[np.eye(2)] * 3, source_prior=np.full(3, 1 / 3),
                     target_prior=prior, n_source=p.get("n", 3000), n_target=p.get("n", 3000),
                     seed=seed)
    pair = generate(spec)
    res = _train(pair, cfg, seed, mode="cls_full")
    absent = np.nonzero(prior == 0)[0]
    post = class_posterior(res.model, pair.target_x)
    true_gamma = compute_gamma(pair.sealed.source_prior, prior)
    corrected = align_posterior(post, true_gamma, strict=False)
    est_eval = evaluate_posteriors(post, pair.sealed.target_y, res.gamma)
    out = SeedResult()
    out.add_run("cls_full", res)
    out.summary["tgt_acc"] = res.final["tgt_acc"]
    out.summary["tgt_acc_corrected"] = est_eval.corrected_accuracy
    out.summary["est_l1"] = res.final["est_l1"]
    for i in absent:
        out.summary[f"estimate[class={i}]"] = float(res.state.estimate[i])
        out.summary[f"gamma_est[class={i}]"] = float(res.gamma[i])
        out.summary[f"gamma_true[class={i}]"] = float(true_gamma[i])
        out.summary[f"corrected_mass_max[class={i}]"] = float(np.nanmax(corrected[:, i]))
    return out


def ablation(seed, cfg):
    """Ablation rows on a pair with both conditional and label shift."""
    p = cfg.params
    shift = [(np.eye(2), np.array(p.get("offset", [0.0, 1.0])))] * 2
    pair = generate(two_gaussians(p.get("sep", 2.0), p.get("target_prior", [0.8, 0.2]), seed,
                                  p.get("n", 2000), transforms=shift))
    out = SeedResult()
    for name in _variants(cfg, ["source_only", "dann_baseline", "joint_no_gamma",
                                "cls_split_heads", "cls_no_fadein", "cls_full"]):
        res = _train(pair, cfg, seed, **VARIANTS[name])
        out.add_run(name, res)
        out.summary[f"tgt_acc[{name}]"] = res.final["tgt_acc"]
        if res.gamma is not None:
            ev = evaluate_posteriors(class_posterior(res.model, pair.target_x),
                                     pair.sealed.target_y, res.gamma)
            out.summary[f"tgt_acc_corrected[{name}]"] = ev.corrected_accuracy
            out.summary[f"est_l1[{name}]"] = res.final["est_l1"]
    return out


def domain_confusion(seed, cfg):
    """Held-out domain separability of the features before and after adversarial training."""
    p = cfg.params
    shift = [(np.eye(2), np.array(p.get("offset", [0.0, 3.0])))] * 2
    pair = generate(two_gaussians(p.get("sep", 2.0), [0.5, 0.5], seed, p.get("n", 2000),
                                  transforms=shift))
    out = SeedResult()
    first = {}

    def grab(epoch, model, state):
        if epoch == 1:
            first["model"] = model.copy()

    options = {**cfg.train, "mode": "dann_baseline", "seed": seed}
    res = run_training(pair.training_view(), TrainConfig.from_dict(options), Evaluator(pair),
                       on_epoch=grab)
    src_only = _train(pair, cfg, seed, mode="source_only")
    out.add_run("dann_baseline", res)
    out.summary["confusion[source_only]"] = domain_confusion_diagnostic(src_only.model, pair, seed)
    out.summary["confusion[dann_epoch1]"] = domain_confusion_diagnostic(first["model"], pair, seed)
    out.summary["confusion[dann_final]"] = domain_confusion_diagnostic(res.model, pair, seed)
    out.summary["tgt_acc[source_only]"] = src_only.final["tgt_acc"]
    out.summary["tgt_acc[dann_baseline]"] = res.final["tgt_acc"]
    return out


SCENARIOS = {
    "noshift-sanity": (noshift_sanity, "identical domains; every mode should match source accuracy"),
    "labelshift-sweep": (labelshift_sweep, "target accuracy over increasing KL label shift"),
    "estimator-convergence": (estimator_convergence, "per-epoch KL of the prior estimate to truth"),
    "consistency-curve": (consistency_curve, "estimator L1 error versus sample size"),
    "theorem2-demo": (concept_shift_demo, "feature-space concept shift under marginal alignment"),
    "partial-uda": (partial_uda, "a source class with zero target mass"),
    "ablation": (ablation, "joint head, fade-in and class weighting switched off one at a time"),
    "domain-confusion": (domain_confusion, "domain separability of features before/after DANN"),
}


def list_scenarios() -> list[tuple[str, str]]:
    return [(name, SCENARIOS[name][1]) for name in sorted(SCENARIOS)]


# -- runner ------------------------------------------------------------------------------


def _run_seed(cfg: ExperimentConfig, seed: int):
    fn = SCENARIOS[cfg.scenario][0]
    try:
        return seed, fn(seed, cfg), None
    except Exception as exc:  # recorded as a failed replicate
        log.exception("seed %s failed", seed)
        return seed, None, "".join(traceback.format_exception_only(type(exc), exc)).strip()


def write_seed_outputs(directory: Path, result: SeedResult):
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("run",) + METRIC_COLUMNS)
        for run, history in result.histories.items():
            for row in history:
                writer.writerow([run] + [_fmt(row[k]) for k in METRIC_COLUMNS])
    with open(directory / "estimator.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("run",) + TRACE_COLUMNS)
        for run, trace in result.traces.items():
            for row in trace:
                writer.writerow([run] + [_fmt(row[k]) for k in TRACE_COLUMNS])
    with open(directory / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("metric", "value"))
        for key, value in result.summary.items():
            writer.writerow((key, _fmt(value)))


def read_summary(path) -> dict:
    with open(path, newline="") as fh:
        return {row["metric"]: float(row["value"]) for row in csv.DictReader(fh)}


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def aggregate(per_seed: dict) -> dict:
    """Median and quartiles of each summary metric across seeds (NaNs ignored)."""
    keys = []
    for summary in per_seed.values():
        keys.extend(k for k in summary if k not in keys)
    out = {}
    for key in keys:
        values = np.array([s[key] for s in per_seed.values() if key in s], dtype=float)
        values = values[~np.isnan(values)]
        if values.size == 0:
            out[key] = {"median": None, "q25": None, "q75": None, "n": 0}
            continue
        q25, med, q75 = np.percentile(values, [25, 50, 75])
        out[key] = {"median": float(med), "q25": float(q25), "q75": float(q75),
                    "n": int(values.size)}
    return out


def run_scenario(cfg: ExperimentConfig, parallel: int = 1) -> dict:
    """Run all replicates, write per-seed CSVs and ``report.json``; return the report."""
    cfg.validate()
    root = Path(cfg.outdir) / cfg.scenario
    root.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        results = [_run_seed(cfg, seed) for seed in cfg.seeds]

    per_seed, series, failures = {}, {}, []
    for seed, result, error in results:
        if error is not None:
            failures.append({"seed": seed, "error": error})
            continue
        write_seed_outputs(root / str(seed), result)
        # re-read so the aggregates are computed from exactly what was written
        per_seed[str(seed)] = read_summary(root / str(seed) / "summary.csv")
        for name, (xs, ys) in result.series.items():
            entry = series.setdefault(name, {"x": [float(x) for x in xs], "per_seed": {}})
            entry["per_seed"][str(seed)] = [float(y) for y in ys]

    report = {
        "scenario": cfg.scenario,
        "config": asdict(cfg),
        "provenance": {
            "config_hash": cfg.digest(),
            "code_version": __version__,
            "started": started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "elapsed_seconds": round(time.perf_counter() - t0, 3),
        },
        "seeds": [str(s) for s in cfg.seeds],
        "per_seed": per_seed,
        "aggregate": aggregate(per_seed),
        "series": series,
        "failures": failures,
    }
    (root / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def export_curves(report: dict, outdir) -> list[Path]:
    """One ``x,median,q25,q75`` CSV per series; refuses if any replicate is missing."""
    missing = [s for s in report["seeds"] if s not in report["per_seed"]]
    for entry in report["series"].values():
        missing.extend(s for s in report["seeds"]
                       if s not in entry["per_seed"] and s not in missing)
    if missing:
        raise IncompleteReportError(missing)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in sorted(report["series"]):
        entry = report["series"][name]
        ys = np.array([entry["per_seed"][s] for s in report["seeds"]], dtype=float)
        q25, med, q75 = np.percentile(ys, [25, 50, 75], axis=0)
        path = outdir / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("x", "median", "q25", "q75"))
            for row in zip(entry["x"], med, q25, q75):
                writer.writerow([_fmt(v) for v in row])
        paths.append(path)
    return paths

import numpy as np
import pytest

from shiftalign import autodiff as ad
from shiftalign.autodiff import Tape
from shiftalign.errors import (ConfigurationError, DomainError, InsufficientDataError,
                               NumericalError)
from shiftalign.model import JOINT, SPLIT, Architecture, init_model, put_params
from shiftalign.synth import TrainingView
from shiftalign.trainer import (MODES, TRACE_COLUMNS, Evaluator, SGDMomentum, TrainConfig,
                                concept_shift_probe, domain_confusion_diagnostic, joint_terms,
                                loss_and_grads, run_training, sample_weights, split_terms,
                                step_joint, write_estimator_trace, write_metrics_csv)

from conftest import gaussian_pair

SMALL = dict(K=4, extractor_hidden=(8,), head_hidden=6)


def _model(head, seed=0, c=2, d=2):
    return init_model(Architecture(d=d, c=c, head=head, **SMALL), np.random.default_rng(seed))


def _batch(seed=0, n=8, c=2, d=2):
    gen = np.random.default_rng(seed)
    return gen.normal(size=(n, d)), np.arange(n) % c, gen.normal(size=(n, d))


def _terms(model, xs, ys, xt, weights, domain_weights=None):
    tape = Tape()
    nodes = put_params(tape, model)
    build = joint_terms if model.arch.head == JOINT else split_terms
    return {k: float(v.value) for k, v in
            build(nodes, model.arch, xs, ys, xt, weights, domain_weights).items()}


class TestObjectives:
    def test_uninformative_discriminator(self):
        m = _model(SPLIT)
        for k in m.group("dis"):
            m.params[k] = np.zeros_like(m.params[k])
        xs, ys, xt = _batch()
        t = _terms(m, xs, ys, xt, np.ones(len(ys)))
        assert t["src_real"] + t["tgt_fake"] == pytest.approx(2 * np.log(0.5), abs=1e-12)
        assert 2 * np.log(0.5) == pytest.approx(-1.3863, abs=1e-4)

    @pytest.mark.parametrize("head", [JOINT, SPLIT])
    def test_lambda_zero_is_pure_classification(self, head):
        m = _model(head)
        xs, ys, xt = _batch()
        w = np.ones(len(ys))
        _, with_target, _ = loss_and_grads(m, xs, ys, xt, w, 0.0, "extractor")
        _, source_only, _ = loss_and_grads(m, xs, ys, None, w, 0.0, "extractor")
        for k in source_only:
            np.testing.assert_array_equal(with_target[k], source_only[k])

    @pytest.mark.parametrize("role", ["head", "extractor"])
    def test_unit_gamma_bit_identical(self, role):
        m = _model(JOINT, seed=3)
        xs, ys, xt = _batch(3)
        ones = sample_weights(ys, np.ones(2))
        la, ga, ta = loss_and_grads(m, xs, ys, xt, ones, 1.0, role, domain_weights=ones)
        lb, gb, tb = loss_and_grads(m, xs, ys, xt, sample_weights(ys, None), 1.0, role)
        assert la == lb and ta == tb
        assert all(np.array_equal(ga[k], gb[k]) for k in gb)

    def test_unit_gamma_steps_bit_identical(self):
        a, b = _model(JOINT, 5), _model(JOINT, 5)
        opts = [SGDMomentum(0.05) for _ in range(4)]
        for seed in range(3):
            xs, ys, xt = _batch(seed)
            la = step_joint(a, opts[0], opts[1], (xs, ys), xt, np.ones(2), weight_domain=True)
            lb = step_joint(b, opts[2], opts[3], (xs, ys), xt, None)
            assert la == lb
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_zero_gamma_class_contributes_nothing(self):
        m = _model(JOINT)
        xs, ys, xt = _batch()
        w = sample_weights(ys, [0.0, 2.0])
        moved = xs.copy()
        moved[ys == 0] += 100.0
        assert _terms(m, xs, ys, xt, w)["cls"] == _terms(m, moved, ys, xt, w)["cls"]

    def test_weighted_source_term_hand_example(self):
        tape = Tape()
        w = sample_weights([0, 1], [1.6, 0.4])
        out = ad.weighted_mean(tape.const([-1.0, -3.0]), w)
        assert float(out.value) == pytest.approx(-1.4, abs=1e-12)

    def test_negative_gamma(self):
        m = _model(JOINT)
        xs, ys, xt = _batch()
        with pytest.raises(DomainError):
            step_joint(m, SGDMomentum(0.1), SGDMomentum(0.1), (xs, ys), xt, [1.0, -0.5])

    def test_non_finite_batch_aborts(self):
        m = _model(JOINT)
        xs, ys, xt = _batch()
        xs[0, 0] = np.nan
        with pytest.raises(NumericalError):
            loss_and_grads(m, xs, ys, xt, np.ones(len(ys)), 1.0, "head")

    @pytest.mark.parametrize("head, prefix", [(JOINT, "h"), (SPLIT, "cls")])
    def test_class_permutation_invariance(self, head, prefix):
        c = 3
        m = _model(head, seed=2, c=c)
        xs, ys, xt = _batch(2, n=9, c=c)
        gamma = np.array([0.5, 1.2, 1.9])
        perm = np.array([2, 0, 1])  # new unit j holds old class perm[j]
        inverse = np.argsort(perm)
        p = m.copy()
        cols = np.concatenate([perm, np.arange(c, p.params[f"{prefix}.1.b"].size)])
        p.params[f"{prefix}.1.W"] = p.params[f"{prefix}.1.W"][:, cols]
        p.params[f"{prefix}.1.b"] = p.params[f"{prefix}.1.b"][cols]
        before = _terms(m, xs, ys, xt, sample_weights(ys, gamma))
        after = _terms(p, xs, inverse[ys], xt, sample_weights(inverse[ys], gamma[perm]))
        for k in before:
            assert after[k] == pytest.approx(before[k], abs=1e-9)

    def test_descent_step_reduces_head_loss(self):
        m = _model(JOINT, seed=4)
        xs, ys, xt = _batch(4)
        w = np.ones(len(ys))
        loss, grads, _ = loss_and_grads(m, xs, ys, xt, w, 1.0, "head")
        SGDMomentum(1e-3, 0.0).step(m.params, grads)
        assert loss_and_grads(m, xs, ys, xt, w, 1.0, "head")[0] < loss


FAST = dict(epochs=3, **SMALL)


class TestRunTraining:
    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(mode="bogus").validate()
        with pytest.raises(ConfigurationError):
            TrainConfig(batch_size=1).validate()
        with pytest.raises(ConfigurationError):
            TrainConfig(lam=-1).validate()
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"learning_rate": 1})

    def test_rejects_pair_with_sealed_labels(self):
        with pytest.raises(ConfigurationError):
            run_training(gaussian_pair(n=200), TrainConfig(**FAST))

    def test_determinism(self):
        pair = gaussian_pair((0.8, 0.2), n=300)
        runs = [run_training(pair.training_view(), TrainConfig(seed=4, **FAST), Evaluator(pair))
                for _ in range(2)]
        assert [repr(r) for r in runs[0].history] == [repr(r) for r in runs[1].history]
        assert all(np.array_equal(runs[0].model.params[k], runs[1].model.params[k])
                   for k in runs[0].model.params)

    def test_source_only_never_touches_target(self, rng):
        pair = gaussian_pair(n=300)
        view = pair.training_view()
        other = TrainingView(view.source_x, view.source_y, rng.normal(size=(50, 2)) + 9, 2)
        cfg = TrainConfig(mode="source_only", **FAST)
        a, b = run_training(view, cfg), run_training(other, cfg)
        assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)
        assert a.state is None and a.gamma is None

    @pytest.mark.parametrize("mode", MODES)
    def test_trainer_never_reads_sealed_labels(self, mode):
        pair = gaussian_pair((0.8, 0.2), n=300)
        res = run_training(pair.training_view(), TrainConfig(mode=mode, **FAST))
        assert pair.sealed.reads == 0
        assert np.isnan(res.final["tgt_acc"])

    def test_history_and_trace_shape(self, tmp_path):
        pair = gaussian_pair((0.8, 0.2), n=300)
        res = run_training(pair.training_view(), TrainConfig(**FAST), Evaluator(pair))
        assert [r["epoch"] for r in res.history] == [0, 1, 2, 3]
        assert [r["alpha"] for r in res.history] == [1.0, 1 / 2, 1 / 3, 1 / 4]
        # row 0 scores the uniform initial estimate against the truth
        assert res.history[0]["est_kl"] == pytest.approx(
            0.5 * np.log(0.5 / 0.8) + 0.5 * np.log(0.5 / 0.2), abs=1e-6)
        write_metrics_csv(tmp_path / "m.csv", res.history)
        write_estimator_trace(tmp_path / "e.csv", res.trace)
        assert (tmp_path / "e.csv").read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
        assert len((tmp_path / "m.csv").read_text().splitlines()) == 5
        assert res.gamma is not None and np.all(res.gamma >= 0)

    @pytest.mark.parametrize("mode", MODES)
    def test_no_shift_sanity(self, mode):
        gaps = []
        for seed in range(5):
            pair = gaussian_pair(seed=seed, n=1000)
            res = run_training(pair.training_view(), TrainConfig(mode=mode, seed=seed),
                               Evaluator(pair))
            gaps.append(abs(res.final["tgt_acc"] - res.final["src_acc"]))
        assert np.median(gaps) <= 0.02

    def test_cls_full_recovers_prior(self):
        errs = []
        for seed in range(5):
            pair = gaussian_pair((0.8, 0.2), seed=seed)
            res = run_training(pair.training_view(), TrainConfig(seed=seed), Evaluator(pair))
            errs.append(res.final["est_l1"])
        assert np.median(errs) < 0.1


class TestDiagnostics:
    def test_confusion_identical_domains(self, rng):
        x = rng.normal(size=(2000, 2))
        view = TrainingView(x[:1000], np.zeros(1000, int), x[1000:], 1)
        assert abs(domain_confusion_diagnostic(None, view) - 0.5) <= 0.05

    def test_confusion_disjoint_domains(self, rng):
        view = TrainingView(rng.normal(size=(500, 2)) - 6, np.zeros(500, int),
                            rng.normal(size=(500, 2)) + 6, 1)
        assert domain_confusion_diagnostic(None, view) >= 0.98

    def test_adversarial_training_reduces_confusion(self):
        shift = [(np.eye(2), np.array([0.0, 3.0]))] * 2
        first, last = [], []
        for seed in range(5):
            pair = gaussian_pair(seed=seed, sep=2.0, transforms=shift)
            grabbed = {}
            res = run_training(pair.training_view(), TrainConfig(mode="dann_baseline", seed=seed),
                               on_epoch=lambda e, m, s: grabbed.setdefault(e, m.copy()))
            first.append(domain_confusion_diagnostic(grabbed[1], pair, seed))
            last.append(domain_confusion_diagnostic(res.model, pair, seed))
        assert np.median(last) < np.median(first)

    def test_probe_no_shift_small(self):
        pair = gaussian_pair(n=2000, seed=1)
        res = run_training(pair.training_view(), TrainConfig(mode="dann_baseline", **FAST))
        assert concept_shift_probe(res.model, pair) < 0.05

    def test_probe_insufficient_data(self):
        pair = gaussian_pair(n=50)
        m = _model(SPLIT)
        with pytest.raises(InsufficientDataError):
            concept_shift_probe(m, pair, bins=10, min_count=100)

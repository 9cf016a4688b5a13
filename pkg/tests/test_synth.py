import numpy as np
import pytest

from shiftalign.errors import ConfigurationError, DimensionError, DomainError
from shiftalign.synth import (ShiftSpec, binary_prior_for_kl, generate, kl_divergence,
                              read_dataset, read_pair, read_training_view, shift_sweep,
                              write_dataset, write_pair)

from conftest import gaussian_pair


def _spec(**kw):
    base = dict(means=[[-1.0, 0.0], [1.0, 0.0]], covs=[np.eye(2)] * 2,
                source_prior=[0.5, 0.5], target_prior=[0.5, 0.5], n_source=1000,
                n_target=1000, seed=7)
    base.update(kw)
    return ShiftSpec(**base)


class TestKL:
    def test_identical_is_zero(self):
        assert kl_divergence([0.3, 0.7], [0.3, 0.7]) == pytest.approx(0.0, abs=1e-12)

    def test_point_mass_against_uniform(self):
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-6)

    def test_hand_value(self):
        expected = 0.8 * np.log(0.8 / 0.5) + 0.2 * np.log(0.2 / 0.5)
        assert kl_divergence([0.8, 0.2], [0.5, 0.5]) == pytest.approx(expected, abs=1e-6)
        assert kl_divergence([0.8, 0.2], [0.5, 0.5]) == pytest.approx(0.1927, abs=1e-4)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])

    @pytest.mark.parametrize("level", [0.05, 0.3, 1.2])
    def test_prior_for_kl_inverts(self, level):
        q = binary_prior_for_kl(level)
        assert kl_divergence([0.5, 0.5], q) == pytest.approx(level, abs=1e-9)


class TestGenerate:
    def test_seed_determinism(self):
        a, b = generate(_spec()), generate(_spec())
        assert np.array_equal(a.source_x, b.source_x)
        assert np.array_equal(a.target_x, b.target_x)
        assert np.array_equal(a.sealed.target_y, b.sealed.target_y)

    def test_degenerate_prior(self):
        pair = generate(_spec(target_prior=[1.0, 0.0]))
        assert set(pair.sealed.target_y.tolist()) == {0}

    def test_no_shift_means_close(self):
        pair = generate(_spec(n_source=5000, n_target=5000))
        pooled = np.vstack([pair.source_x, pair.target_x]).std(axis=0)
        gap = np.abs(pair.source_x.mean(0) - pair.target_x.mean(0))
        assert np.all(gap < 3 * pooled / np.sqrt(5000))

    def test_class_frequencies_within_four_sigma(self):
        prior = np.array([0.6, 0.3, 0.1])
        spec = ShiftSpec(means=np.eye(3), covs=[np.eye(3)] * 3, source_prior=prior,
                         target_prior=prior, n_source=10_000, n_target=10_000, seed=3)
        pair = generate(spec)
        for y in (pair.source_y, pair.sealed.target_y):
            counts = np.bincount(y, minlength=3)
            sd = np.sqrt(10_000 * prior * (1 - prior))
            assert np.all(np.abs(counts - 10_000 * prior) < 4 * sd)

    def test_identity_transforms_class_means_agree(self):
        pair = generate(_spec(n_source=4000, n_target=4000, seed=11))
        for i in range(2):
            xs = pair.source_x[pair.source_y == i]
            xt = pair.target_x[pair.sealed.target_y == i]
            bound = 4 * np.sqrt(1 / len(xs) + 1 / len(xt))
            assert np.all(np.abs(xs.mean(0) - xt.mean(0)) < bound)

    def test_affine_transform_moves_class(self):
        shift = [(np.eye(2), np.array([0.0, 3.0])), (np.eye(2), np.zeros(2))]
        pair = generate(_spec(transforms=shift, n_target=4000))
        xt0 = pair.target_x[pair.sealed.target_y == 0]
        assert xt0.mean(0)[1] == pytest.approx(3.0, abs=0.1)

    def test_non_pd_covariance(self):
        with pytest.raises(ConfigurationError):
            generate(_spec(covs=[np.eye(2), -np.eye(2)]))

    def test_sealed_reads_are_counted(self):
        pair = generate(_spec())
        view = pair.training_view()
        assert pair.sealed.reads == 0
        assert not hasattr(view, "sealed") and not hasattr(view, "target_y")
        pair.sealed.target_y
        assert pair.sealed.reads == 1


class TestSweep:
    def test_empty_levels(self):
        with pytest.raises(DomainError):
            shift_sweep(_spec(), [])

    def test_source_level_is_zero_kl(self):
        (pair,) = shift_sweep(_spec(), [[0.5, 0.5]])
        assert kl_divergence([0.5, 0.5], pair.sealed.target_prior) == 0.0

    def test_kl_increasing(self):
        levels = [[0.5 + m, 0.5 - m] for m in (0.0, 0.1, 0.2, 0.3, 0.4)]
        pairs = shift_sweep(_spec(), levels)
        kls = [kl_divergence(p.sealed.target_prior, [0.5, 0.5]) for p in pairs]
        assert np.all(np.diff(kls) > 0)

    def test_zero_entry_gives_partial_pair(self):
        (pair,) = shift_sweep(_spec(), [[0.0, 1.0]])
        assert 0 not in pair.sealed.target_y


class TestFiles:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        x = rng.normal(size=(50, 3)) * 10 ** rng.uniform(-8, 8, size=(50, 3))
        y = rng.integers(0, 4, size=50)
        write_dataset(tmp_path / "d.csv", x, y, 4)
        x2, y2, c = read_dataset(tmp_path / "d.csv")
        assert c == 4 and np.array_equal(x, x2) and np.array_equal(y, y2)
        assert (tmp_path / "d.csv").read_text().splitlines()[0] == "4,3,50"

    def test_trainer_visible_target_labels_hidden(self, tmp_path):
        pair = gaussian_pair((0.8, 0.2), n=300)
        write_pair(pair, tmp_path)
        _, yt, _ = read_dataset(tmp_path / "target.csv")
        assert np.all(yt == -1)
        view = read_training_view(tmp_path)
        assert np.array_equal(view.target_x, pair.target_x)
        full = read_pair(tmp_path)
        assert np.array_equal(full.sealed.target_y, pair.sealed.target_y)

import math

import numpy as np
import pytest

from adadetect.datasets import LabeledDataset
from adadetect.dnn import Dense, NetworkSpec, Relu, Softmax, initialize, train
from adadetect.errors import (
    ClassUnderpopulated,
    DimensionMismatch,
    NegativeInput,
    TooFewSamples,
)
from adadetect.null_models import (
    MixtureModel,
    bic_score,
    extract_activations,
    fit_gmm,
    fit_kernel_density,
    fit_lognormal_mixture,
    fit_null_bank,
    fit_pairwise_bank,
    load_bank,
    log_density,
    log_density_batch,
    n_parameters,
    ranked_feature_pairs,
    save_bank,
    select_order_bic,
)


class TestKernelDensity:
    def test_two_points_symmetric_finite_bandwidth(self):
        model = fit_kernel_density(np.array([[0.0], [1.0]]))
        var = float(model.covariances)
        assert 0.0 < var < np.inf
        # symmetric about the midpoint
        left = log_density(model, np.array([0.2]))
        right = log_density(model, np.array([0.8]))
        assert left == pytest.approx(right, rel=1e-12)

    def test_tight_cluster_gets_smaller_bandwidth(self):
        rng = np.random.default_rng(0)
        tight = fit_kernel_density(rng.normal(0.0, 0.05, size=(40, 1)))
        spread = fit_kernel_density(rng.normal(0.0, 5.0, size=(40, 1)))
        assert float(tight.covariances) < float(spread.covariances)

    def test_training_point_density_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(12, 3))
        model = fit_kernel_density(X)
        var = float(model.covariances)
        z = X[4]
        # oracle: direct (1/N) sum of isotropic Gaussians
        d = 3
        dens = np.mean(
            [
                math.exp(-0.5 * np.sum((z - x) ** 2) / var)
                / ((2 * math.pi * var) ** (d / 2))
                for x in X
            ]
        )
        assert log_density(model, z) == pytest.approx(math.log(dens), rel=1e-10)

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            fit_kernel_density(np.array([[1.0]]))
        with pytest.raises(TooFewSamples):
            fit_kernel_density(np.zeros((5, 2)))


class TestGmm:
    def test_k1_closed_form(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(60, 3))
        model = fit_gmm(X, k=1, cov="full", seed=0)
        assert np.allclose(model.means[0], X.mean(axis=0), atol=1e-8)
        assert np.allclose(model.covariances[0], np.cov(X.T, ddof=0), atol=1e-8)
        assert model.weights[0] == pytest.approx(1.0)

    def test_two_separated_clusters(self):
        rng = np.random.default_rng(3)
        a = rng.normal(0.0, 0.5, size=(70, 1))
        b = rng.normal(100.0, 0.5, size=(30, 1))
        X = np.vstack([a, b])
        model = fit_gmm(X, k=2, cov="full", seed=1)
        means = np.sort(model.means.ravel())
        assert abs(means[0] - a.mean()) < 0.1
        assert abs(means[1] - b.mean()) < 0.1
        weights = model.weights[np.argsort(model.means.ravel())]
        assert abs(weights[0] - 0.7) < 0.05
        assert abs(weights[1] - 0.3) < 0.05

    def test_loglik_nondecreasing_random_data(self):
        rng = np.random.default_rng(4)
        for trial in range(10):
            X = rng.normal(size=(50, 2)) * rng.uniform(0.5, 2.0)
            model = fit_gmm(X, k=3, cov="diag", seed=trial)
            assert np.all(np.diff(model.ll_history) >= 0.0)
            model = fit_gmm(X, k=2, cov="full", seed=trial)
            assert np.all(np.diff(model.ll_history) >= 0.0)

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            fit_gmm(np.zeros((9, 2)), k=1, cov="full", seed=0)  # needs 10

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(80, 2))
        for cov in ("full", "diag"):
            model = fit_gmm(X, k=3, cov=cov, seed=9)
            assert abs(model.weights.sum() - 1.0) <= 1e-12


class TestBic:
    def test_formula_matches_recomputation(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(100, 2))
        model = select_order_bic(X, range(1, 4), cov="diag", seed=0)
        k, d, n = model.k, model.dim, 100
        p = (k - 1) + 2 * k * d
        assert n_parameters(k, d, "diag") == p
        expect = -2.0 * model.log_likelihood + p * math.log(n)
        assert bic_score(model.log_likelihood, k, d, n, "diag") == pytest.approx(expect)

    def test_recovers_single_gaussian(self):
        hits = 0
        for trial in range(20):
            rng = np.random.default_rng(100 + trial)
            X = rng.normal(size=(200, 1))
            model = select_order_bic(X, range(1, 5), cov="full", seed=trial)
            hits += model.k == 1
        assert hits > 10

    def test_recovers_three_components(self):
        hits = 0
        for trial in range(20):
            rng = np.random.default_rng(200 + trial)
            X = np.concatenate(
                [
                    rng.normal(0.0, 1.0, size=(100, 1)),
                    rng.normal(50.0, 1.0, size=(100, 1)),
                    rng.normal(100.0, 1.0, size=(100, 1)),
                ]
            )
            model = select_order_bic(X, range(1, 6), cov="full", seed=trial)
            hits += model.k == 3
        assert hits > 10


class TestLogNormal:
    def test_zero_input_is_finite(self):
        rng = np.random.default_rng(7)
        Z = np.abs(rng.normal(size=(60, 2)))
        Z[0] = 0.0
        model = fit_lognormal_mixture(Z, [1], cov="diag", seed=0)
        val = log_density(model, np.zeros(2))
        assert np.isfinite(val)

    def test_recovers_lognormal_location(self):
        rng = np.random.default_rng(8)
        Z = np.exp(rng.standard_normal((400, 1)))
        model = fit_lognormal_mixture(Z, [1], cov="full", seed=0)
        assert abs(model.means[0, 0]) < 0.1

    def test_quadrature_integral_is_one(self):
        rng = np.random.default_rng(9)
        Z = np.exp(0.3 * rng.standard_normal((300, 1)) - 0.5)
        model = fit_lognormal_mixture(Z, [1, 2], cov="full", seed=0)
        mu = model.means[:, 0] @ model.weights
        sigma = math.sqrt(float(np.max(model.covariances)))
        ys = np.linspace(mu - 9 * sigma, mu + 9 * sigma, 40001)
        zs = np.exp(ys) - 1e-6
        zs = zs[zs >= 0.0]
        vals = np.exp(log_density_batch(model, zs[:, None]))
        total = np.trapezoid(vals, zs)
        assert abs(total - 1.0) <= 1e-3

    def test_negative_sample_rejected(self):
        with pytest.raises(NegativeInput):
            fit_lognormal_mixture(np.array([[0.5], [-0.1]]), [1], seed=0)

    def test_negative_evaluation_rejected(self):
        rng = np.random.default_rng(10)
        model = fit_lognormal_mixture(np.abs(rng.normal(size=(40, 1))), [1], seed=0)
        with pytest.raises(NegativeInput):
            log_density(model, np.array([-0.2]))


class TestLogDensity:
    def test_standard_normal_component(self):
        model = MixtureModel(
            weights=np.array([1.0]),
            means=np.zeros((1, 1)),
            covariances=np.ones((1, 1, 1)),
            cov_type="full",
            family="gmm",
        )
        assert log_density(model, np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_two_component_hand_sum(self):
        model = MixtureModel(
            weights=np.array([0.5, 0.5]),
            means=np.array([[0.0], [3.0]]),
            covariances=np.ones((2, 1, 1)),
            cov_type="full",
            family="gmm",
        )
        phi = lambda x: math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
        expect = math.log(0.5 * phi(0.0) + 0.5 * phi(3.0))
        assert log_density(model, np.zeros(1)) == pytest.approx(expect, rel=1e-12)

    def test_dimension_mismatch(self):
        model = MixtureModel(
            weights=np.array([1.0]),
            means=np.zeros((1, 2)),
            covariances=np.stack([np.eye(2)]),
            cov_type="full",
            family="gmm",
        )
        with pytest.raises(DimensionMismatch):
            log_density(model, np.zeros(3))

    def test_finite_on_support(self):
        rng = np.random.default_rng(11)
        Z = np.abs(rng.normal(size=(80, 2)))
        model = fit_lognormal_mixture(Z, [1, 2], cov="diag", seed=3)
        probes = np.abs(rng.normal(size=(50, 2))) * 10
        vals = log_density_batch(model, probes)
        assert np.all(np.isfinite(vals))


def two_class_toy():
    rng = np.random.default_rng(12)
    n = 100
    images = np.empty((n, 4, 4, 1))
    labels = np.repeat([0, 1], n // 2)
    for i in range(n):
        img = rng.uniform(0.0, 0.25, size=(4, 4))
        if labels[i] == 0:
            img[:, :2] += 0.6
        else:
            img[:, 2:] += 0.6
        images[i, :, :, 0] = np.clip(img, 0, 1)
    data = LabeledDataset(images, labels, 2)
    spec = NetworkSpec((4, 4, 1), (Dense(6), Relu(), Dense(4), Relu(), Dense(2), Softmax()), 2)
    net = train(initialize(spec, seed=0), data, epochs=20, learning_rate=0.3, batch_size=16, seed=1)
    return net, data


class TestNullBank:
    def test_structure_and_dimensions(self):
        net, data = two_class_toy()
        bank = fit_null_bank(net, data, taps=["relu1", "relu2"], seed=5)
        assert len(bank.models) == 4
        assert bank.models[("relu1", 0)].dim == 6
        assert bank.models[("relu2", 1)].dim == 4

    def test_held_in_beats_far_out(self):
        net, data = two_class_toy()
        bank = fit_null_bank(net, data, taps=["relu2"], seed=5)
        acts = extract_activations(net, data, ["relu2"])["relu2"]
        for c in (0, 1):
            Xc = acts[data.labels == c]
            model = bank.models[("relu2", c)]
            inside = log_density(model, Xc[0])
            far = log_density(model, Xc.max(axis=0) * 10.0 + 5.0)
            assert inside > far

    def test_deterministic_refit(self):
        net, data = two_class_toy()
        a = fit_null_bank(net, data, taps=["relu2"], seed=7)
        b = fit_null_bank(net, data, taps=["relu2"], seed=7)
        for key in a.models:
            assert np.array_equal(a.models[key].weights, b.models[key].weights)
            assert np.array_equal(a.models[key].means, b.models[key].means)
            assert np.array_equal(a.models[key].covariances, b.models[key].covariances)

    def test_underpopulated_class(self):
        net, data = two_class_toy()
        skewed = data.take(list(range(0, 50)) + [60])
        with pytest.raises(ClassUnderpopulated):
            fit_null_bank(net, skewed, taps=["relu2"], seed=0)


class TestPairwiseBank:
    def test_pair_count_uncapped(self):
        net, data = two_class_toy()
        bank = fit_pairwise_bank(net, data, taps=["relu2"], max_pairs_per_layer=None, k_range=[1], seed=0)
        assert len(bank.pairs["relu2"]) == 6  # width 4 -> C(4,2)
        assert len(bank.pair_models[("relu2", 0)]) == 6
        assert bank.pair_models[("relu2", 0)][(0, 1)].dim == 2

    def test_cap_keeps_top_beta_products(self):
        net, data = two_class_toy()
        bank = fit_pairwise_bank(net, data, taps=["relu2"], max_pairs_per_layer=3, k_range=[1], seed=0)
        beta = bank.betas["relu2"]
        scored = sorted(
            ((i, j) for i in range(4) for j in range(i + 1, 4)),
            key=lambda ij: (-(beta[ij[0]] * beta[ij[1]]), ij),
        )
        assert sorted(bank.pairs["relu2"]) == sorted(scored[:3])

    def test_rank_helper_orders_by_product(self):
        beta = np.array([1.0, 0.1, 0.5, 0.9])
        pairs = ranked_feature_pairs(beta, 2)
        assert pairs == [(0, 2), (0, 3)]

    def test_matches_manual_two_feature_fit(self):
        net, data = two_class_toy()
        bank = fit_pairwise_bank(net, data, taps=["relu2"], max_pairs_per_layer=None, k_range=[1, 2], seed=9)
        acts = extract_activations(net, data, ["relu2"])["relu2"]
        from adadetect.seeding import child_seed

        pairs = bank.pairs["relu2"]
        pi = pairs.index((1, 3))
        manual = fit_lognormal_mixture(
            acts[data.labels == 1][:, [1, 3]], [1, 2], cov="full",
            seed=child_seed(9, 0, 1, pi),
        )
        got = bank.pair_models[("relu2", 1)][(1, 3)]
        assert np.array_equal(manual.means, got.means)
        assert np.array_equal(manual.covariances, got.covariances)


class TestBankPersistence:
    def test_round_trip(self, tmp_path):
        net, data = two_class_toy()
        bank = fit_null_bank(net, data, taps=["relu1", "relu2"], seed=3)
        pair_bank = fit_pairwise_bank(net, data, taps=["relu2"], max_pairs_per_layer=3, k_range=[1], seed=3)
        bank.pair_models = pair_bank.pair_models
        bank.pairs = pair_bank.pairs
        bank.betas = pair_bank.betas
        prefix = str(tmp_path / "bank")
        save_bank(bank, prefix, metadata={"seed": 3})
        back = load_bank(prefix)
        assert back.layers == bank.layers
        for key, model in bank.models.items():
            other = back.models[key]
            assert np.allclose(model.weights, other.weights)
            assert np.allclose(model.means, other.means)
            assert np.allclose(np.atleast_1d(model.covariances), np.atleast_1d(other.covariances))
        for key, cell in bank.pair_models.items():
            for pair, model in cell.items():
                other = back.pair_models[key][pair]
                assert np.allclose(model.means, other.means)
                assert model.family == other.family
        z = np.abs(np.random.default_rng(0).normal(size=4))
        for key in bank.models:
            if bank.models[key].dim == 4:
                assert log_density(back.models[key], z) == pytest.approx(
                    log_density(bank.models[key], z), rel=1e-12
                )

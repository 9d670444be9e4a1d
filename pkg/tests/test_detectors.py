import io
import math

import numpy as np
import pytest

from adadetect.datasets import LabeledDataset
from adadetect.detectors import (
    ConfusionMatrix,
    Scorer,
    WhiteCountModel,
    ada_maxkl,
    ada_statistic,
    ada_statistics_batch,
    aw_ada_statistic,
    aw_ada_statistics_batch,
    baseline_density_statistic,
    baseline_statistics_batch,
    blur_image,
    blur_statistics,
    confidence_statistic,
    estimate_confusion,
    fit_white_count_histograms,
    kl_divergence,
    l_awa_statistic,
    l_awa_statistics_batch,
    maxkl_over_layers,
    null_log_densities,
    region_count_statistic,
    verdicts_to_csv,
    white_count_statistic,
)
from adadetect.dnn import Dense, NetworkSpec, Relu, Softmax, forward, initialize, train
from adadetect.errors import ClassUnderpopulated, LengthMismatch, MissingModel, NoHistograms
from adadetect.null_models import MixtureModel, NullModelBank, fit_null_bank, fit_pairwise_bank


class TestKl:
    def test_identical_is_zero(self):
        assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0

    def test_onehot_vs_uniform(self):
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2.0), rel=1e-6)

    def test_hand_value(self):
        # oracle: direct scalar evaluation of the two-term sum
        expect = 0.9 * math.log(0.9 / 0.6) + 0.1 * math.log(0.1 / 0.4)
        assert kl_divergence([0.9, 0.1], [0.6, 0.4]) == pytest.approx(expect, rel=1e-12)
        assert expect == pytest.approx(0.22628916118535044)

    def test_nonnegative_zero_iff_equal(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k = rng.integers(2, 8)
            p = rng.dirichlet(np.ones(k))
            q = rng.dirichlet(np.ones(k))
            v = kl_divergence(p, q)
            assert v >= 0.0
            assert kl_divergence(p, p) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            kl_divergence([0.5, 0.5], [1.0])


class TestAdaCore:
    def test_proportional_densities_give_zero(self):
        # null densities proportional to the posterior on {c*, c_hat}
        post = np.array([[0.7, 0.2, 0.1]])
        log_f = np.log(np.array([[0.7, 0.2, 0.1]]) * 5.0)
        stats, c_star, c_hat = ada_statistics_batch(log_f, post, "two")
        assert stats[0] == pytest.approx(0.0, abs=1e-12)
        assert c_star[0] == 0 and c_hat[0] == 1

    def test_hand_two_class_value(self):
        log_f = np.array([[-1.0, -3.0]])
        post = np.array([[0.8, 0.2]])
        stats, c_star, c_hat = ada_statistics_batch(log_f, post, "two")
        # oracle: direct evaluation of P, Q and the two-term KL
        p1 = math.exp(-1.0) / (math.exp(-1.0) + math.exp(-3.0))
        p = np.array([p1, 1 - p1])
        q = np.array([0.8, 0.2])
        expect = float(np.sum(p * np.log(p / q)))
        assert p1 == pytest.approx(0.8807970779778823)
        assert stats[0] == pytest.approx(expect, rel=1e-12)
        # frozen from a 30-digit evaluation of the same two-term sum
        assert expect == pytest.approx(0.023060034855277745, rel=1e-12)

    def test_source_follows_max_density(self):
        post = np.array([[0.6, 0.3, 0.1], [0.6, 0.3, 0.1]])
        log_f = np.array([[0.0, -1.0, -5.0], [0.0, -5.0, -1.0]])
        _, _, c_hat = ada_statistics_batch(log_f, post, "two")
        assert list(c_hat) == [1, 2]

    def test_all_class_mode(self):
        rng = np.random.default_rng(1)
        post = rng.dirichlet(np.ones(4), size=3)
        log_f = rng.normal(size=(3, 4))
        stats, _, _ = ada_statistics_batch(log_f, post, "all")
        for i in range(3):
            p = np.exp(log_f[i] - np.logaddexp.reduce(log_f[i]))
            assert stats[i] == pytest.approx(kl_divergence(p, post[i]), rel=1e-10)

    def test_density_scaling_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            k = int(rng.integers(2, 6))
            post = rng.dirichlet(np.ones(k), size=1)
            log_f = rng.normal(size=(1, k))
            base_two = ada_statistics_batch(log_f, post, "two")[0][0]
            base_all = ada_statistics_batch(log_f, post, "all")[0][0]
            c = float(rng.uniform(-50, 50))
            assert ada_statistics_batch(log_f + c, post, "two")[0][0] == pytest.approx(base_two, rel=1e-9, abs=1e-12)
            assert ada_statistics_batch(log_f + c, post, "all")[0][0] == pytest.approx(base_all, rel=1e-9, abs=1e-12)

    def test_source_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(3)
        post = rng.dirichlet(np.ones(5), size=10)
        log_f = rng.normal(size=(10, 5))
        _, c_star, base = ada_statistics_batch(log_f, post, "two")
        warped = log_f.copy()
        mask = np.ones_like(log_f, dtype=bool)
        mask[np.arange(10), c_star] = False
        warped[mask] = 2.0 * warped[mask] + 1.0  # strictly increasing in f
        _, _, after = ada_statistics_batch(warped, post, "two")
        assert np.array_equal(base, after)


class TestAwAda:
    def test_two_class_degenerate_sum(self):
        post = np.array([[0.8, 0.2]])
        log_f = np.array([[-1.0, -3.0]])
        conf = ConfusionMatrix(np.array([[0.9, 0.25], [0.1, 0.75]]), eta=1e-3)
        stats, c_star, src = aw_ada_statistics_batch(log_f, post, conf)
        two_class = ada_statistics_batch(log_f, post, "two")[0][0]
        # single term: KL / P[C*=0 | C=1]
        assert stats[0] == pytest.approx(two_class / 0.25, rel=1e-12)
        assert src[0] == 1

    def test_uniform_confusion_scales_by_k(self):
        rng = np.random.default_rng(4)
        k = 4
        post = rng.dirichlet(np.ones(k), size=5)
        log_f = rng.normal(size=(5, k))
        conf = ConfusionMatrix(np.full((k, k), 1.0 / k), eta=1e-3)
        stats, c_star, _ = aw_ada_statistics_batch(log_f, post, conf)
        ident = ConfusionMatrix(np.ones((k, k)), eta=1e-3)  # weight factor 1
        unweighted, _, _ = aw_ada_statistics_batch(log_f, post, ident)
        assert np.allclose(stats, k * unweighted)

    def test_three_class_hand_case(self):
        post = np.array([[0.5, 0.3, 0.2]])
        log_f = np.log(np.array([[0.02, 0.3, 0.1]]))
        conf = ConfusionMatrix(
            np.array([[0.90, 0.20, 0.30], [0.06, 0.70, 0.10], [0.04, 0.10, 0.60]]), eta=1e-3
        )
        stats, c_star, src = aw_ada_statistics_batch(log_f, post, conf)
        assert c_star[0] == 0
        # spreadsheet-style oracle
        f = np.array([0.02, 0.3, 0.1])
        expect = 0.0
        for c in (1, 2):
            w_src = f[c] / (f[1] + f[2])
            p = np.array([f[0], f[c]])
            p = p / p.sum()
            q = np.array([post[0, 0], post[0, c]])
            q = q / q.sum()
            expect += w_src * kl_divergence(p, q) / conf.probs[0, c]
        assert stats[0] == pytest.approx(expect, rel=1e-10)
        assert src[0] == 1


def hand_pairwise_bank(rng, d=3, k_classes=3, layer="relu1"):
    bank = NullModelBank(layers=[layer], num_classes=k_classes)
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    bank.pairs[layer] = pairs
    beta = rng.uniform(0.3, 1.0, size=d)
    beta[rng.integers(d)] = 1.0
    bank.betas[layer] = beta
    for c in range(k_classes):
        cell = {}
        for pair in pairs:
            cell[pair] = MixtureModel(
                weights=np.array([1.0]),
                means=rng.normal(size=(1, 2)),
                covariances=np.stack([np.eye(2) * rng.uniform(0.5, 2.0)]),
                cov_type="full",
                family="gmm",
            )
        bank.pair_models[(layer, c)] = cell
    return bank


class TestLAwa:
    def test_brute_force_over_pairs(self):
        rng = np.random.default_rng(5)
        bank = hand_pairwise_bank(rng)
        conf = ConfusionMatrix(rng.dirichlet(np.ones(3), size=3).T, eta=1e-3)
        Z = rng.uniform(0.0, 2.0, size=(4, 3))
        post = rng.dirichlet(np.ones(3), size=4)
        stats, c_star, _ = l_awa_statistics_batch(bank, "relu1", Z, post, conf)
        # oracle: explicit loop over pairs and source classes
        from adadetect.null_models import log_density

        beta = bank.betas["relu1"]
        for n in range(4):
            cs = int(np.argmax(post[n]))
            total = 0.0
            for (i, j) in bank.pairs["relu1"]:
                f = np.array(
                    [
                        math.exp(log_density(bank.pair_models[("relu1", c)][(i, j)], Z[n, [i, j]]))
                        for c in range(3)
                    ]
                )
                others = [c for c in range(3) if c != cs]
                denom = sum(f[c] for c in others)
                inner = 0.0
                for c in others:
                    p = np.array([f[cs], f[c]])
                    p = p / p.sum()
                    q = np.array([post[n, cs], post[n, c]])
                    q = q / q.sum()
                    inner += (f[c] / denom) * kl_divergence(p, q) / conf.probs[cs, c]
                total += beta[i] * beta[j] * inner
            total /= len(bank.pairs["relu1"])
            assert stats[n] == pytest.approx(total, rel=1e-9)
            assert c_star[n] == cs

    def test_singleton_pair_equals_aw_term(self):
        rng = np.random.default_rng(6)
        bank = hand_pairwise_bank(rng, d=2)
        bank.betas["relu1"] = np.array([1.0, 1.0])
        conf = ConfusionMatrix(np.full((3, 3), 1 / 3), eta=1e-3)
        Z = rng.uniform(0, 1, size=(2, 2))
        post = rng.dirichlet(np.ones(3), size=2)
        stats, _, _ = l_awa_statistics_batch(bank, "relu1", Z, post, conf)
        # with one pair and unit betas, the statistic is that pair's AW-ADA term
        from adadetect.null_models import log_density_batch

        log_f = np.stack(
            [log_density_batch(bank.pair_models[("relu1", c)][(0, 1)], Z) for c in range(3)], axis=1
        )
        aw, _, _ = aw_ada_statistics_batch(log_f, post, conf)
        assert np.allclose(stats, aw)

    def test_identical_pairs_cancel_normalization(self):
        rng = np.random.default_rng(7)
        bank = hand_pairwise_bank(rng, d=3)
        shared = bank.pair_models[("relu1", 0)][(0, 1)]
        for c in range(3):
            for pair in bank.pairs["relu1"]:
                bank.pair_models[("relu1", c)][pair] = MixtureModel(
                    weights=shared.weights.copy(),
                    means=shared.means + c,  # class-dependent but pair-independent
                    covariances=shared.covariances.copy(),
                    cov_type="full",
                    family="gmm",
                )
        bank.betas["relu1"] = np.ones(3)
        conf = ConfusionMatrix(np.full((3, 3), 1 / 3), eta=1e-3)
        Z = rng.uniform(0, 1, size=(1, 3))
        Z[:] = Z[0, 0]  # identical coordinates so every pair sees the same input
        post = rng.dirichlet(np.ones(3), size=1)
        stats, _, _ = l_awa_statistics_batch(bank, "relu1", Z, post, conf)
        from adadetect.null_models import log_density_batch

        log_f = np.stack(
            [log_density_batch(bank.pair_models[("relu1", c)][(0, 1)], Z[:, [0, 1]]) for c in range(3)],
            axis=1,
        )
        aw, _, _ = aw_ada_statistics_batch(log_f, post, conf)
        assert stats[0] == pytest.approx(aw[0], rel=1e-12)


class TestMaxKl:
    def test_known_layer_values(self):
        vals = {"a": 0.2, "b": 0.5, "c": 0.4}
        from adadetect.detectors import DetectorVerdict

        def per_layer(l):
            return DetectorVerdict(vals[l], math.inf, False, destination=0, winning_layer=l)

        v = maxkl_over_layers(per_layer, ["a", "b", "c"])
        assert v.statistic == 0.5
        assert v.winning_layer == "b"

    def test_two_layer_hand_case(self):
        from adadetect.detectors import DetectorVerdict

        vals = {"x": 0.1, "y": 0.7}

        def per_layer(l):
            return DetectorVerdict(vals[l], math.inf, False, destination=1)

        v = maxkl_over_layers(per_layer, ["x", "y"])
        assert v.statistic == pytest.approx(0.7)
        assert v.winning_layer == "y"

    def test_monotone_in_layer_set(self):
        rng = np.random.default_rng(8)
        from adadetect.detectors import DetectorVerdict

        vals = {f"l{i}": float(rng.uniform(0, 2)) for i in range(6)}

        def per_layer(l):
            return DetectorVerdict(vals[l], math.inf, False, destination=0)

        layers = list(vals)
        for cut in range(1, len(layers)):
            small = maxkl_over_layers(per_layer, layers[:cut]).statistic
            big = maxkl_over_layers(per_layer, layers[: cut + 1]).statistic
            assert big >= small

    def test_empty_layers(self):
        with pytest.raises(MissingModel):
            maxkl_over_layers(lambda l: None, [])


def toy_net_and_data(seed=0):
    rng = np.random.default_rng(seed)
    n = 120
    images = np.empty((n, 4, 4, 1))
    labels = np.repeat([0, 1, 2], n // 3)
    for i in range(n):
        img = rng.uniform(0.0, 0.2, size=(4, 4))
        if labels[i] == 0:
            img[:2, :] += 0.65
        elif labels[i] == 1:
            img[2:, :] += 0.65
        else:
            img[:, :2] += 0.65
        images[i, :, :, 0] = np.clip(img, 0, 1)
    data = LabeledDataset(images, labels, 3)
    spec = NetworkSpec((4, 4, 1), (Dense(8), Relu(), Dense(6), Relu(), Dense(3), Softmax()), 3)
    net = train(initialize(spec, seed=1), data, epochs=25, learning_rate=0.4, batch_size=16, seed=2)
    return net, data


class TestConfusion:
    def test_perfect_classifier_smoothed_identity(self):
        net, data = toy_net_and_data()
        conf = estimate_confusion(net, data, eta=1e-3)
        post, _ = forward(net, data.images)
        if np.all(np.argmax(post, axis=1) == data.labels):  # perfect on this toy set
            for j in range(3):
                assert conf.probs[j, j] == pytest.approx(1.0 / (1.0 + 2e-3), rel=1e-9)

    def test_matches_hand_tally(self):
        net, data = toy_net_and_data(seed=3)
        sub = data.take([0, 1, 2, 3, 40, 41, 42, 80, 81, 82])
        conf = estimate_confusion(net, sub, eta=1e-3)
        post, _ = forward(net, sub.images)
        decided = np.argmax(post, axis=1)
        counts = np.zeros((3, 3))
        for d_, t in zip(decided, sub.labels):
            counts[d_, t] += 1
        raw = counts / np.maximum(counts.sum(axis=0, keepdims=True), 1)
        floored = np.maximum(raw, 1e-3)
        expect = floored / floored.sum(axis=0, keepdims=True)
        assert np.allclose(conf.probs, expect)

    def test_columns_sum_to_one(self):
        net, data = toy_net_and_data()
        conf = estimate_confusion(net, data, eta=5e-2)
        assert np.allclose(conf.probs.sum(axis=0), 1.0)
        assert np.all(conf.probs >= 5e-2 / (1 + 3 * 5e-2))

    def test_missing_class(self):
        net, data = toy_net_and_data()
        with pytest.raises(ClassUnderpopulated):
            estimate_confusion(net, data.take(range(40)), eta=1e-3)  # only class 0


class TestPerImageOps:
    def setup_method(self):
        self.net, self.data = toy_net_and_data()
        self.bank = fit_null_bank(self.net, self.data, taps=["relu1", "relu2"], seed=4)
        self.conf = estimate_confusion(self.net, self.data, eta=1e-3)

    def activations_for(self, i):
        post, acts = forward(self.net, self.data.images[i], taps=["relu1", "relu2"])
        return post, acts

    def test_baseline_ranks_by_density(self):
        post, acts = self.activations_for(0)
        v = baseline_density_statistic(self.bank, acts, post, "relu2")
        log_f = null_log_densities(self.bank, "relu2", acts["relu2"][None, :])
        assert v.statistic == pytest.approx(-log_f[0, v.destination])
        assert v.estimated_source is None

    def test_baseline_mode_is_low(self):
        # statistic at a class's own mixture mean is below far-away probes
        model = self.bank.models[("relu2", 0)]
        zmode = model.means[np.argmax(model.weights)]
        post = np.array([0.9, 0.05, 0.05])
        low = baseline_density_statistic(self.bank, {"relu2": zmode}, post, "relu2")
        far = baseline_density_statistic(self.bank, {"relu2": zmode + 50.0}, post, "relu2")
        assert low.statistic < far.statistic

    def test_ada_matches_batch_core(self):
        post, acts = self.activations_for(5)
        v = ada_statistic(self.bank, acts, post, "relu2", classes="two")
        log_f = null_log_densities(self.bank, "relu2", acts["relu2"][None, :])
        stats, c_star, c_hat = ada_statistics_batch(log_f, post[None, :], "two")
        assert v.statistic == pytest.approx(stats[0])
        assert v.destination == c_star[0]
        assert v.estimated_source == c_hat[0]
        assert v.estimated_source != v.destination

    def test_ada_maxkl_singleton_equals_single(self):
        post, acts = self.activations_for(7)
        single = ada_statistic(self.bank, acts, post, "relu1")
        maxed = ada_maxkl(self.bank, acts, post, ["relu1"])
        assert maxed.statistic == pytest.approx(single.statistic)
        assert maxed.winning_layer == "relu1"

    def test_aw_and_lawa_run(self):
        post, acts = self.activations_for(9)
        v = aw_ada_statistic(self.bank, acts, post, self.conf, "relu2")
        assert v.statistic >= 0.0
        pair_bank = fit_pairwise_bank(self.net, self.data, taps=["relu2"], max_pairs_per_layer=5, k_range=[1], seed=0)
        v2 = l_awa_statistic(pair_bank, acts, post, self.conf, "relu2")
        assert v2.statistic >= 0.0
        assert v2.estimated_source != v2.destination

    def test_threshold_monotonicity(self):
        post, acts = self.activations_for(3)
        v1 = ada_statistic(self.bank, acts, post, "relu2", tau=0.0)
        v2 = ada_statistic(self.bank, acts, post, "relu2", tau=1e9)
        assert v1.detected or not v2.detected  # detections shrink as tau grows

    def test_missing_model(self):
        post, acts = self.activations_for(0)
        with pytest.raises(MissingModel):
            ada_statistic(self.bank, {"pool9": acts["relu2"]}, post, "pool9")


class TestConfidence:
    def test_trivial_values(self):
        assert confidence_statistic([1.0, 0.0]) == 0.0
        assert confidence_statistic(np.full(10, 0.1)) == pytest.approx(0.9)
        assert confidence_statistic([0.7, 0.2, 0.1]) == pytest.approx(0.3)


class TestWhiteCount:
    def make_model(self):
        return WhiteCountModel(
            counts_per_class=(
                np.array([10, 12, 14]),
                np.array([30, 31, 32, 33]),
                np.array([50, 55]),
            ),
            means=np.array([12.0, 31.5, 52.5]),
            binarize_threshold=0.5,
        )

    def test_central_value_has_small_statistic(self):
        model = self.make_model()
        img = np.zeros((8, 8, 1))
        img[:3, :4, 0] = 1.0  # 12 white pixels -> class 0's mean
        stat = white_count_statistic(img, model)
        # tail = #{>=12} = 2 of 3 -> p = 3/4 -> statistic 1/4
        assert stat == pytest.approx(0.25)

    def test_above_maximum_saturates(self):
        model = self.make_model()
        img = np.zeros((8, 8, 1))
        img[:4, :5, 0] = 1.0  # 20 white -> nearest class 0 (mean 12), above max 14
        stat = white_count_statistic(img, model)
        assert stat == pytest.approx(1.0 - 1.0 / 4.0)  # n=3 -> 1 - 1/(n+1)

    def test_hand_tail_sum(self):
        model = self.make_model()
        img = np.zeros((8, 8, 1))
        img[0, :, 0] = 1.0
        img[1, :, 0] = 1.0
        img[2, :4, 0] = 1.0
        img[3, :4, 0] = 1.0
        img[4, :7, 0] = 1.0  # 8+8+4+4+7 = 31 white pixels -> class 1
        stat = white_count_statistic(img, model)
        # counts >= 31 in class 1: {31,32,33} = 3; p = (3+1)/(4+1)
        assert stat == pytest.approx(1.0 - 4.0 / 5.0)

    def test_fit_from_dataset(self):
        _, data = toy_net_and_data()
        model = fit_white_count_histograms(data, binarize_threshold=0.5)
        assert len(model.counts_per_class) == 3
        stat = white_count_statistic(data.images[0], model)
        assert 0.0 <= stat < 1.0

    def test_no_histograms(self):
        with pytest.raises(NoHistograms):
            white_count_statistic(np.zeros((4, 4, 1)), None)


def flood_fill_count(mask):
    """Independent oracle: stack-based 8-connected flood fill."""
    mask = mask.copy()
    h, w = mask.shape
    count = 0
    for si in range(h):
        for sj in range(w):
            if not mask[si, sj]:
                continue
            count += 1
            stack = [(si, sj)]
            mask[si, sj] = False
            while stack:
                i, j = stack.pop()
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        ni, nj = i + di, j + dj
                        if 0 <= ni < h and 0 <= nj < w and mask[ni, nj]:
                            mask[ni, nj] = False
                            stack.append((ni, nj))
    return count


class TestRegionCount:
    def test_all_black(self):
        assert region_count_statistic(np.zeros((6, 6, 1))) == 0.0

    def test_filled_square(self):
        img = np.zeros((6, 6, 1))
        img[2:5, 2:5, 0] = 1.0
        assert region_count_statistic(img) == 1.0

    def test_three_isolated_pixels(self):
        img = np.zeros((7, 7, 1))
        for i, j in ((0, 0), (3, 3), (6, 1)):
            img[i, j, 0] = 1.0
        assert region_count_statistic(img) == 3.0
        assert flood_fill_count(img[:, :, 0] >= 0.5) == 3

    def test_matches_flood_fill_on_random_masks(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            img = (rng.uniform(size=(10, 10, 1)) > 0.6).astype(float)
            got = region_count_statistic(img)
            assert got == flood_fill_count(img[:, :, 0] >= 0.5)

    def test_diagonal_counts_as_connected(self):
        img = np.zeros((4, 4, 1))
        img[0, 0, 0] = 1.0
        img[1, 1, 0] = 1.0  # 8-neighborhood joins diagonals
        assert region_count_statistic(img) == 1.0


class TestBlur:
    def test_constant_image_fixed_point(self):
        net, _ = toy_net_and_data()
        flipped, kl = blur_statistics(net, np.full((4, 4, 1), 0.4))
        assert flipped == 0.0
        assert kl == pytest.approx(0.0, abs=1e-12)

    def test_decision_flip_detected(self):
        # net keyed to the center pixel; blurring dilutes it below the decision point
        spec = NetworkSpec((3, 3, 1), (Dense(2), Softmax()), 2)
        net = initialize(spec, seed=0)
        net.params[0]["w"][:] = 0.0
        net.params[0]["w"][4, 1] = 10.0  # class 1 iff center pixel is bright
        net.params[0]["b"] = np.array([3.0, 0.0])
        img = np.zeros((3, 3, 1))
        img[1, 1, 0] = 1.0
        flipped, kl = blur_statistics(net, img)
        assert flipped == 1.0
        assert kl > 0.0

    def test_kl_nonnegative(self):
        net, data = toy_net_and_data()
        for i in range(5):
            _, kl = blur_statistics(net, data.images[i])
            assert kl >= 0.0

    def test_blur_is_threexthree_average(self):
        img = np.zeros((3, 3, 1))
        img[1, 1, 0] = 0.9
        out = blur_image(img)
        assert out[1, 1, 0] == pytest.approx(0.1)


class TestScorer:
    def setup_method(self):
        self.net, self.data = toy_net_and_data()
        self.bank = fit_null_bank(self.net, self.data, taps=["relu1", "relu2"], seed=4)
        self.conf = estimate_confusion(self.net, self.data, eta=1e-3)
        self.pair_bank = fit_pairwise_bank(
            self.net, self.data, taps=["relu2"], max_pairs_per_layer=6, k_range=[1], seed=4
        )
        self.pair_bank.models = self.bank.models  # share joint models for mixed use
        self.white = fit_white_count_histograms(self.data)

    def scorer(self, name):
        return Scorer(
            name,
            net=self.net,
            bank=self.pair_bank if name == "l-awa-maxkl" else self.bank,
            confusion=self.conf,
            layers=["relu2"] if name in ("baseline", "ada", "ada-all", "l-awa-maxkl") else ["relu1", "relu2"],
            white_model=self.white,
        )

    @pytest.mark.parametrize(
        "name",
        ["baseline", "ada", "ada-all", "ada-maxkl", "aw-ada-maxkl", "l-awa-maxkl",
         "confidence", "white-count", "region-count", "blur"],
    )
    def test_batch_agrees_with_per_image(self, name):
        images = self.data.images[:6]
        res = self.scorer(name).score(images)
        assert res.statistics.shape == (6,)
        post, acts_all = forward(self.net, images, taps=["relu1", "relu2"])
        for i in range(6):
            acts = {t: a[i] for t, a in acts_all.items()}
            if name == "baseline":
                expect = baseline_density_statistic(self.bank, acts, post[i], "relu2").statistic
            elif name == "ada":
                expect = ada_statistic(self.bank, acts, post[i], "relu2").statistic
            elif name == "ada-all":
                expect = ada_statistic(self.bank, acts, post[i], "relu2", classes="all").statistic
            elif name == "ada-maxkl":
                expect = ada_maxkl(self.bank, acts, post[i], ["relu1", "relu2"]).statistic
            elif name == "aw-ada-maxkl":
                expect = maxkl_over_layers(
                    lambda l: aw_ada_statistic(self.bank, acts, post[i], self.conf, l),
                    ["relu1", "relu2"],
                ).statistic
            elif name == "l-awa-maxkl":
                expect = l_awa_statistic(self.pair_bank, acts, post[i], self.conf, "relu2").statistic
            elif name == "confidence":
                expect = confidence_statistic(post[i])
            elif name == "white-count":
                expect = white_count_statistic(images[i], self.white)
            elif name == "region-count":
                expect = region_count_statistic(images[i])
            else:
                expect = blur_statistics(self.net, images[i])[1]
            assert res.statistics[i] == pytest.approx(expect, rel=1e-9), name

    def test_csv_export(self):
        res = self.scorer("ada").score(self.data.images[:3])
        buf = io.StringIO()
        verdicts_to_csv(res, tau=0.5, stream=buf, header_comment="config=abc seed=1")
        lines = buf.getvalue().strip().splitlines()
        assert lines[0].startswith("# config=abc")
        assert lines[1].split(",")[0] == "image_id"
        assert len(lines) == 5

    def test_unknown_detector(self):
        with pytest.raises(MissingModel):
            Scorer("nope", net=self.net)

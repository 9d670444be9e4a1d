"""ROC evaluation, security curves, and scenario orchestration.

Detection statistics are compared with the rule "attack if statistic > tau".
AUC uses the rank (Mann-Whitney) form with half credit for ties, which equals
exhaustive pair counting. The scenario runner realizes the three experimental
protocols: clean (train and model on clean data, test batch = clean test plus
crafted attacks), noisy (noise matched to the attack perturbations is added to
training data, the classifier is retrained, null models refit, attacks
recrafted against the new classifier, and the test batch is noised), and
mismatch (clean training and models, but the test batch additionally contains
noisy non-attack images).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import attacks as attacks_mod
from .datasets import LabeledDataset, add_matched_noise, estimate_perturbation_stats
from .detectors import (
    ConfusionMatrix,
    Scorer,
    estimate_confusion,
    fit_white_count_histograms,
)
from .dnn import Network, default_taps, forward, initialize, lenet5_spec, reduced_cifar_spec, train
from .errors import AllDetected, EmptyList, NoPerturbation, Unachievable
from .null_models import fit_null_bank, fit_pairwise_bank
from .seeding import child_seed


@dataclass
class RocCurve:
    """Threshold sweep of (FPR, TPR) points from (0,0) to (1,1) plus exact AUC."""

    points: np.ndarray       # (n, 2) fpr, tpr, monotone nondecreasing
    auc: float
    thresholds: np.ndarray   # (n, 3) tau, fpr, tpr (tau descending)


@dataclass
class SecurityCurvePoint:
    strength: float
    craft_rate: float
    auc: float
    conditional_accuracy: float
    fpr_at_fixed_tpr: float


@dataclass
class Scenario:
    """clean | noisy | mismatch batch composition; ideal drops misclassified
    clean test images from the AD batch."""

    kind: str
    ideal: bool = False


@dataclass
class ConditionalAccuracyReport:
    accuracy: float
    kept: int
    detected: int
    misclassified_among_detected: float


def roc_auc(attack_stats, clean_stats) -> RocCurve:
    """Exact AUC (ties get half credit) and the threshold-sweep curve."""
    a = np.asarray(attack_stats, dtype=float)
    c = np.asarray(clean_stats, dtype=float)
    if a.size == 0 or c.size == 0:
        raise EmptyList("both statistic lists must be nonempty")
    pooled = np.concatenate([a, c])
    ranks = rankdata(pooled, method="average")
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    auc = float(u / (a.size * c.size))

    taus = np.concatenate([[np.inf], np.unique(pooled)[::-1], [-np.inf]])
    fpr = np.array([(c > t).mean() for t in taus])
    tpr = np.array([(a > t).mean() for t in taus])
    points = np.stack([fpr, tpr], axis=1)
    return RocCurve(points=points, auc=auc, thresholds=np.stack([taus, fpr, tpr], axis=1))


def roc_auc_bruteforce(attack_stats, clean_stats) -> float:
    """Independent oracle: count all attack/clean pairs directly."""
    a = np.asarray(attack_stats, dtype=float)[:, None]
    c = np.asarray(clean_stats, dtype=float)[None, :]
    wins = (a > c).sum() + 0.5 * (a == c).sum()
    return float(wins / (a.size * c.size))


def threshold_at(attack_stats, clean_stats, fpr: float | None = None, tpr: float | None = None):
    """Threshold achieving a rate target; returns (tau, achieved_fpr, achieved_tpr).

    fpr=q picks the smallest tau with FPR <= q (most detections within the
    false-positive budget); tpr=q picks the largest tau with TPR >= q.
    """
    if (fpr is None) == (tpr is None):
        raise Unachievable("specify exactly one of fpr=, tpr=")
    q = fpr if fpr is not None else tpr
    if not 0.0 <= q <= 1.0:
        raise Unachievable(f"target rate {q} outside [0, 1]")
    curve = roc_auc(attack_stats, clean_stats)
    taus, fprs, tprs = curve.thresholds.T
    if fpr is not None:
        ok = np.where(fprs <= q)[0]
        if ok.size == 0:
            raise Unachievable(f"no threshold reaches FPR <= {q}")
        # taus are descending; the smallest qualifying tau is the last one
        i = ok[-1]
    else:
        ok = np.where(tprs >= q)[0]
        if ok.size == 0:
            raise Unachievable(f"no threshold reaches TPR >= {q}")
        i = ok[0]  # largest qualifying tau
    tau = float(taus[i])
    if np.isinf(tau):
        # keep the threshold finite and usable for later scoring
        finite = taus[np.isfinite(taus)]
        pad = 1.0 if finite.size == 0 else max(1.0, 0.01 * (abs(finite[0]) + 1))
        tau = float(finite[0] + pad) if tau > 0 else float(finite[-1] - pad)
    return tau, float(fprs[i]), float(tprs[i])


def conditional_accuracy(
    net: Network, scorer: Scorer, tau: float, clean_test: LabeledDataset
) -> ConditionalAccuracyReport:
    """Classifier accuracy on clean images the detector does not flag at tau.

    Also reports the fraction of classifier-misclassified images inside the
    (falsely) detected population.
    """
    res = scorer.score(clean_test.images)
    post, _ = forward(net, clean_test.images)
    decided = np.argmax(post, axis=1)
    kept = res.statistics <= tau
    if not np.any(kept):
        raise AllDetected(f"every clean image scored above tau={tau}")
    correct = decided == clean_test.labels
    detected = ~kept
    mis_among_det = float(np.mean(~correct[detected])) if np.any(detected) else 0.0
    return ConditionalAccuracyReport(
        accuracy=float(np.mean(correct[kept])),
        kept=int(kept.sum()),
        detected=int(detected.sum()),
        misclassified_among_detected=mis_among_det,
    )


# ---------------------------------------------------------------------------
# attack crafting over datasets
# ---------------------------------------------------------------------------

ATTACK_KINDS = ("fgsm", "jsma", "cw")


def craft_attacks(
    net: Network,
    data: LabeledDataset,
    kind: str,
    strength: float,
    n_attacks: int,
    seed: int,
    max_iters: int = 1000,
    cw_step: float = 0.01,
):
    """Craft targeted attacks on up to n_attacks correctly classified images.

    Targets are drawn uniformly over the non-true classes per image. Returns
    the attack records (all attempts, successful or not).
    """
    if kind not in ATTACK_KINDS:
        raise Unachievable(f"unknown attack kind {kind!r}")
    post, _ = forward(net, data.images)
    correct = np.where(np.argmax(post, axis=1) == data.labels)[0]
    rng = np.random.default_rng(child_seed(seed, 0xA77))
    if correct.size > n_attacks:
        correct = np.sort(rng.choice(correct, size=n_attacks, replace=False))
    images = data.images[correct]
    trues = data.labels[correct]
    targets = np.array(
        [attacks_mod.select_target(int(t), data.num_classes, child_seed(seed, 0x7A6, i)) for i, t in enumerate(trues)]
    )
    if kind == "fgsm":
        return attacks_mod.fgsm_attack_batch(net, images, trues, targets, step=strength, max_iters=max_iters)
    if kind == "jsma":
        return attacks_mod.jsma_attack_batch(net, images, trues, targets, max_fraction=strength)
    return attacks_mod.cw_l2_attack_batch(net, images, trues, targets, lagrange_c=strength,
                                          step=cw_step, max_iters=max_iters)


def successful_images(records) -> np.ndarray:
    ok = [r.perturbed for r in records if r.success]
    if not ok:
        return np.empty((0,))
    return np.stack(ok)


# ---------------------------------------------------------------------------
# security curves
# ---------------------------------------------------------------------------

def security_curve(
    net: Network,
    scorer: Scorer,
    attack_kind: str,
    strengths,
    clean_test: LabeledDataset,
    fixed_tpr: float,
    seed: int,
    n_attacks: int = 200,
    max_iters: int = 1000,
    cw_step: float = 0.01,
):
    """Craft rate, AUC, and conditional accuracy per attack strength.

    The TPR stays fixed across strengths (the threshold adapts per strength)
    while the resulting FPR varies.
    """
    clean_stats = scorer.score(clean_test.images).statistics
    points = []
    for i, strength in enumerate(strengths):
        records = craft_attacks(
            net, clean_test, attack_kind, strength, n_attacks,
            seed=child_seed(seed, 0x5C, i), max_iters=max_iters, cw_step=cw_step,
        )
        craft_rate = float(np.mean([r.success for r in records])) if records else 0.0
        adv = successful_images(records)
        if len(adv) == 0:
            points.append(SecurityCurvePoint(float(strength), craft_rate, 0.5, float("nan"), float("nan")))
            continue
        attack_stats = scorer.score(adv).statistics
        curve = roc_auc(attack_stats, clean_stats)
        tau, fpr, _ = threshold_at(attack_stats, clean_stats, tpr=fixed_tpr)
        try:
            cond = conditional_accuracy(net, scorer, tau, clean_test).accuracy
        except AllDetected:
            cond = float("nan")
        points.append(SecurityCurvePoint(float(strength), craft_rate, curve.auc, cond, fpr))
    return points


# ---------------------------------------------------------------------------
# scenario orchestration
# ---------------------------------------------------------------------------

NETWORK_SPECS = {"lenet5": lenet5_spec, "cifar-reduced": reduced_cifar_spec}


@dataclass
class PipelineConfig:
    """Everything run_scenario needs beyond the datasets."""

    network: str = "lenet5"
    epochs: int = 12
    learning_rate: float = 0.1
    batch_size: int = 256
    taps: list | None = None
    family_per_tap: dict = field(default_factory=dict)
    k_range: tuple = tuple(range(1, 11))
    detector: str = "ada"
    detector_layers: list | None = None
    attack: str = "fgsm"
    strength: float = 0.002
    n_attacks: int = 500
    attack_iters: int = 1000
    cw_step: float = 0.01
    eta: float = 1e-3
    max_pairs_per_layer: int | None = 2000
    pair_k_range: tuple = tuple(range(1, 11))
    target_fpr: float | None = 0.1
    target_tpr: float | None = None
    kl_mode: str = "forward"
    binarize_threshold: float = 0.5


def build_network(config: PipelineConfig, data: LabeledDataset, seed: int) -> Network:
    spec_fn = NETWORK_SPECS[config.network]
    spec = spec_fn(input_shape=data.image_shape, num_classes=data.num_classes)
    return initialize(spec, seed=child_seed(seed, 0x11))


def train_network(config: PipelineConfig, net: Network, data: LabeledDataset, seed: int) -> Network:
    return train(
        net, data, epochs=config.epochs, learning_rate=config.learning_rate,
        batch_size=config.batch_size, seed=child_seed(seed, 0x12),
    )


def fit_models(config: PipelineConfig, net: Network, data: LabeledDataset, seed: int):
    """Null bank (+ pairwise bank and aux models when the detector needs them)."""
    taps = config.taps or default_taps(net.spec)
    needs_joint = config.detector in ("baseline", "ada", "ada-all", "ada-maxkl", "aw-ada-maxkl")
    needs_pairs = config.detector == "l-awa-maxkl"
    bank = None
    if needs_joint:
        bank = fit_null_bank(net, data, taps, family_per_tap=config.family_per_tap,
                             k_range=config.k_range, seed=child_seed(seed, 0x13))
    if needs_pairs:
        bank = fit_pairwise_bank(net, data, taps, max_pairs_per_layer=config.max_pairs_per_layer,
                                 k_range=config.pair_k_range, seed=child_seed(seed, 0x13))
    confusion = None
    if config.detector in ("aw-ada-maxkl", "l-awa-maxkl"):
        confusion = estimate_confusion(net, data, eta=config.eta)
    white = None
    if config.detector == "white-count":
        white = fit_white_count_histograms(data, config.binarize_threshold)
    return bank, confusion, white


def build_scorer(config: PipelineConfig, net: Network, bank, confusion, white) -> Scorer:
    layers = config.detector_layers
    if layers is None and bank is not None:
        layers = list(bank.layers)
        if config.detector in ("baseline", "ada", "ada-all") and len(layers) > 1:
            layers = layers[-1:]  # single-layer statistics default to the deepest tap
    return Scorer(
        config.detector,
        net=net,
        bank=bank,
        confusion=confusion,
        layers=layers,
        white_model=white,
        binarize_threshold=config.binarize_threshold,
        kl_mode=config.kl_mode,
    )


def _layer_attribution(result, n_attacks: int) -> dict:
    freqs: dict = {}
    for layer in result.winning_layers[:n_attacks]:
        if layer is not None:
            freqs[layer] = freqs.get(layer, 0) + 1
    total = sum(freqs.values())
    return {l: c / total for l, c in freqs.items()} if total else {}


def run_scenario(
    scenario: Scenario,
    config: PipelineConfig,
    train_data: LabeledDataset,
    test_data: LabeledDataset,
    seed: int,
    net: Network | None = None,
):
    """Execute one scenario end to end and return a JSON-ready report.

    Ordering for the noisy protocol: craft on the clean classifier, estimate
    perturbation moments, noise the training set, retrain, refit null models,
    recraft against the retrained classifier, then noise the test samples.
    """
    if scenario.kind not in ("clean", "noisy", "mismatch"):
        raise Unachievable(f"unknown scenario kind {scenario.kind!r}")
    noise_mode = "subset" if config.attack == "jsma" else "global"

    if net is None:
        net = train_network(config, build_network(config, train_data, seed), train_data, seed)

    records = craft_attacks(
        net, test_data, config.attack, config.strength, config.n_attacks,
        seed=child_seed(seed, 0x21), max_iters=config.attack_iters, cw_step=config.cw_step,
    )

    model_train = train_data
    active_net = net
    retrained = False
    if scenario.kind == "noisy":
        originals = np.stack([r.original for r in records if r.success])
        perturbed = np.stack([r.perturbed for r in records if r.success])
        labels = np.array([r.true_class for r in records if r.success])
        try:
            stats = estimate_perturbation_stats(
                LabeledDataset(originals, labels, test_data.num_classes),
                LabeledDataset(perturbed, labels, test_data.num_classes),
            )
        except NoPerturbation:
            raise Unachievable("noisy scenario needs at least one successful attack")
        model_train = add_matched_noise(train_data, stats, noise_mode, seed=child_seed(seed, 0x22))
        active_net = train_network(config, build_network(config, model_train, seed), model_train, seed)
        retrained = True
        records = craft_attacks(
            active_net, test_data, config.attack, config.strength, config.n_attacks,
            seed=child_seed(seed, 0x23), max_iters=config.attack_iters, cw_step=config.cw_step,
        )
        clean_batch = add_matched_noise(test_data, stats, noise_mode, seed=child_seed(seed, 0x24))
    elif scenario.kind == "mismatch":
        originals = np.stack([r.original for r in records if r.success])
        perturbed = np.stack([r.perturbed for r in records if r.success])
        labels = np.array([r.true_class for r in records if r.success])
        stats = estimate_perturbation_stats(
            LabeledDataset(originals, labels, test_data.num_classes),
            LabeledDataset(perturbed, labels, test_data.num_classes),
        )
        noisy_test = add_matched_noise(test_data, stats, noise_mode, seed=child_seed(seed, 0x25))
        clean_batch = LabeledDataset(
            np.concatenate([test_data.images, noisy_test.images]),
            np.concatenate([test_data.labels, noisy_test.labels]),
            test_data.num_classes,
        )
    else:
        clean_batch = test_data

    if scenario.ideal:
        post, _ = forward(active_net, clean_batch.images)
        clean_batch = clean_batch.take(np.where(np.argmax(post, axis=1) == clean_batch.labels)[0])

    bank, confusion, white = fit_models(config, active_net, model_train, seed=child_seed(seed, 0x26))
    scorer = build_scorer(config, active_net, bank, confusion, white)

    adv = successful_images(records)
    craft_rate = float(np.mean([r.success for r in records])) if records else 0.0
    if len(adv) == 0:
        raise Unachievable("no successful attacks; cannot evaluate detection")
    attack_res = scorer.score(adv)
    clean_res = scorer.score(clean_batch.images)
    curve = roc_auc(attack_res.statistics, clean_res.statistics)

    if config.target_tpr is not None:
        tau, ach_fpr, ach_tpr = threshold_at(attack_res.statistics, clean_res.statistics, tpr=config.target_tpr)
    else:
        tau, ach_fpr, ach_tpr = threshold_at(
            attack_res.statistics, clean_res.statistics, fpr=config.target_fpr if config.target_fpr is not None else 0.1
        )
    try:
        cond = conditional_accuracy(active_net, scorer, tau, clean_batch)
        cond_dict = {
            "accuracy": cond.accuracy,
            "kept": cond.kept,
            "detected": cond.detected,
            "misclassified_among_detected": cond.misclassified_among_detected,
        }
    except AllDetected:
        cond_dict = None

    from .dnn import loss_and_accuracy

    _, test_acc = loss_and_accuracy(active_net, test_data)
    report = {
        "scenario": scenario.kind,
        "ideal": scenario.ideal,
        "detector": config.detector,
        "attack": config.attack,
        "strength": config.strength,
        "test_accuracy": test_acc,
        "craft_rate": craft_rate,
        "n_attempts": len(records),
        "n_successful": int(len(adv)),
        "ad_batch_clean": int(len(clean_batch)),
        "ad_batch_total": int(len(clean_batch) + len(adv)),
        "retrained": retrained,
        "auc": curve.auc,
        "tau": tau,
        "achieved_fpr": ach_fpr,
        "achieved_tpr": ach_tpr,
        "conditional": cond_dict,
        "layer_attribution": _layer_attribution(attack_res, len(adv)),
    }
    artifacts = {
        "net": active_net,
        "records": records,
        "bank": bank,
        "confusion": confusion,
        "scorer": scorer,
        "roc": curve,
        "clean_statistics": clean_res.statistics,
        "attack_statistics": attack_res.statistics,
    }
    return report, artifacts

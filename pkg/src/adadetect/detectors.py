"""Decision statistics for attack detection.

The ADA family compares two class-probability vectors for a test image: P
built from the class-conditional null densities of a deep-layer activation,
and Q built from the classifier's own posterior; the statistic is the KL
divergence between them. Variants differ in which classes enter (the decided
class plus the most plausible source class, or all classes), whether several
layers compete through a max, and whether source-class uncertainty and the
classifier's confusion matrix reweight the terms. The pairwise (L-AWA) form
aggregates the same construction over 2-d feature-pair densities with
outgoing-weight scores.

Simple baselines live here too: destination-density thresholding, posterior
confidence, white-pixel count p-values, white-region counting, and the
blur-correction check.

Everything is a pure function of frozen inputs; batch variants vectorize over
images and are exactly what the per-image operations compute for N=1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import label as cc_label
from scipy.ndimage import uniform_filter

from .datasets import LabeledDataset
from .dnn import Network, forward
from .errors import (
    ClassUnderpopulated,
    LengthMismatch,
    MissingModel,
    NoHistograms,
    ShapeMismatch,
)
from .null_models import NullModelBank, log_density_batch
from .numerics import log_sum_exp_rows

PROB_FLOOR = 1e-12
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class ConfusionMatrix:
    """probs[i, j] = P(decide i | true j); columns sum to 1, entries >= eta."""

    probs: np.ndarray
    eta: float


@dataclass(frozen=True)
class DetectorVerdict:
    statistic: float
    threshold: float
    detected: bool
    destination: int
    winning_layer: str | None = None
    estimated_source: int | None = None


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------

def _floor_normalize(p: np.ndarray) -> np.ndarray:
    p = np.maximum(p, PROB_FLOOR)
    return p / p.sum(axis=-1, keepdims=True)


def kl_divergence(p, q) -> float:
    """D_KL(P || Q) with a 1e-12 floor on both arguments; >= 0, zero iff P = Q."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise LengthMismatch(f"{p.shape} vs {q.shape}")
    return float(_kl_rows(p[None, :], q[None, :])[0])


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p = _floor_normalize(p)
    q = _floor_normalize(q)
    return np.sum(p * (np.log(p) - np.log(q)), axis=-1)


def _kl_mode_rows(p, q, kl_mode: str) -> np.ndarray:
    if kl_mode == "forward":
        return _kl_rows(p, q)
    if kl_mode == "reverse":
        return _kl_rows(q, p)
    if kl_mode == "symmetric":
        return 0.5 * (_kl_rows(p, q) + _kl_rows(q, p))
    raise LengthMismatch(f"unknown kl_mode {kl_mode!r}")


# ---------------------------------------------------------------------------
# density evaluation over a bank
# ---------------------------------------------------------------------------

def null_log_densities(bank: NullModelBank, layer: str, Z: np.ndarray) -> np.ndarray:
    """(N, K) log densities of the batch under each class's model for a layer."""
    Z = np.atleast_2d(Z)
    out = np.empty((Z.shape[0], bank.num_classes))
    for c in range(bank.num_classes):
        model = bank.models.get((layer, c))
        if model is None:
            raise MissingModel(f"bank has no model for ({layer!r}, {c})")
        out[:, c] = log_density_batch(model, Z)
    return out


def pair_log_densities(bank: NullModelBank, layer: str, Z: np.ndarray, pair_indices) -> np.ndarray:
    """(N, P, K) log densities for a slice of the layer's retained feature pairs."""
    Z = np.atleast_2d(Z)
    pairs = bank.pairs.get(layer)
    if pairs is None:
        raise MissingModel(f"bank has no pairwise models for layer {layer!r}")
    out = np.empty((Z.shape[0], len(pair_indices), bank.num_classes))
    for col, pi in enumerate(pair_indices):
        i, j = pairs[pi]
        sub = Z[:, [i, j]]
        for c in range(bank.num_classes):
            cell = bank.pair_models.get((layer, c))
            if cell is None or (i, j) not in cell:
                raise MissingModel(f"bank has no pair model for ({layer!r}, {c}, {(i, j)})")
            out[:, col, c] = log_density_batch(cell[(i, j)], sub)
    return out


# ---------------------------------------------------------------------------
# batch statistic cores
# ---------------------------------------------------------------------------

def _destinations(posteriors: np.ndarray) -> np.ndarray:
    return np.argmax(posteriors, axis=1)


def _source_estimates(log_f: np.ndarray, c_star: np.ndarray) -> np.ndarray:
    masked = log_f.copy()
    masked[np.arange(len(c_star)), c_star] = -np.inf
    return np.argmax(masked, axis=1)


def baseline_statistics_batch(log_f: np.ndarray, posteriors: np.ndarray):
    """Destination-only statistic: -log f(z | c*)."""
    c_star = _destinations(posteriors)
    stats = -log_f[np.arange(len(c_star)), c_star]
    return stats, c_star


def ada_statistics_batch(
    log_f: np.ndarray,
    posteriors: np.ndarray,
    classes: str = "two",
    kl_mode: str = "forward",
):
    """Two-class or all-class ADA KL statistics; returns (stats, c_star, c_hat).

    P comes from the null densities renormalized over the participating
    classes, Q from the classifier posterior renormalized the same way; both
    are invariant to a common positive scaling of the densities.
    """
    n, k = log_f.shape
    rows = np.arange(n)
    c_star = _destinations(posteriors)
    c_hat = _source_estimates(log_f, c_star)
    if classes == "two":
        a = log_f[rows, c_star]
        b = log_f[rows, c_hat]
        m = np.maximum(a, b)
        ea, eb = np.exp(a - m), np.exp(b - m)
        p = np.stack([ea, eb], axis=1) / (ea + eb)[:, None]
        q = np.stack([posteriors[rows, c_star], posteriors[rows, c_hat]], axis=1)
        stats = _kl_mode_rows(p, q, kl_mode)
    elif classes == "all":
        p = np.exp(log_f - log_sum_exp_rows(log_f)[:, None])
        stats = _kl_mode_rows(p, posteriors, kl_mode)
    else:
        raise LengthMismatch(f"classes must be 'two' or 'all', got {classes!r}")
    return stats, c_star, c_hat


def _pairwise_two_class_kls(log_f, posteriors, c_star, kl_mode):
    """(N, K) two-class KL between [c*, c] null and posterior pairs for every c."""
    n, k = log_f.shape
    rows = np.arange(n)
    a = log_f[rows, c_star][:, None]  # log f(z|c*)
    diff = log_f - a  # log f(z|c) - log f(z|c*)
    p_star = 1.0 / (1.0 + np.exp(np.clip(diff, -700, 700)))
    p = np.stack([p_star, 1.0 - p_star], axis=2)  # (N, K, 2)
    post_star = posteriors[rows, c_star][:, None]
    denom = post_star + posteriors
    with np.errstate(invalid="ignore"):
        q_star = np.where(denom > 0, post_star / np.maximum(denom, PROB_FLOOR), 0.5)
    q = np.stack([q_star, 1.0 - q_star], axis=2)
    flat = _kl_mode_rows(p.reshape(-1, 2), q.reshape(-1, 2), kl_mode)
    return flat.reshape(n, k)


def _source_weights(log_f, c_star):
    """(N, K) posterior over candidate source classes c != c*."""
    masked = log_f.copy()
    n = len(c_star)
    masked[np.arange(n), c_star] = -np.inf
    return np.exp(masked - log_sum_exp_rows(masked)[:, None])


def aw_ada_statistics_batch(
    log_f: np.ndarray,
    posteriors: np.ndarray,
    confusion: ConfusionMatrix,
    kl_mode: str = "forward",
):
    """Source-uncertainty- and confusion-weighted ADA, summed over c != c*.

    statistic = sum_c P[C_s=c] * KL(P^(c) || Q^(c)) / P[C*=c* | C=c].
    Returns (stats, c_star, source_argmax).
    """
    n, k = log_f.shape
    rows = np.arange(n)
    c_star = _destinations(posteriors)
    w_src = _source_weights(log_f, c_star)
    kls = _pairwise_two_class_kls(log_f, posteriors, c_star, kl_mode)
    conf_w = confusion.probs[c_star, :]  # P[C*=c* | C=c] for each candidate c
    terms = w_src * kls / conf_w
    terms[rows, c_star] = 0.0
    stats = terms.sum(axis=1)
    src = np.argmax(w_src, axis=1)
    return stats, c_star, src


def l_awa_statistics_batch(
    bank: NullModelBank,
    layer: str,
    Z: np.ndarray,
    posteriors: np.ndarray,
    confusion: ConfusionMatrix,
    kl_mode: str = "forward",
    chunk: int = 256,
):
    """Pair-aggregated AW-ADA for one layer.

    statistic = (1/N_l) * sum_pairs beta_i beta_j * sum_{c != c*}
    P_ij[C_s=c] * KL(P_ij^(c) || Q^(c)) / P[C*=c* | C=c]; Q comes from the
    whole-image posterior and is shared by all pairs.
    """
    Z = np.atleast_2d(Z)
    n = Z.shape[0]
    rows = np.arange(n)
    c_star = _destinations(posteriors)
    pairs = bank.pairs.get(layer)
    beta = bank.betas.get(layer)
    if pairs is None or beta is None:
        raise MissingModel(f"bank has no pairwise models for layer {layer!r}")
    stats = np.zeros(n)
    src_mass = np.zeros((n, bank.num_classes))
    for start in range(0, len(pairs), chunk):
        idx = range(start, min(start + chunk, len(pairs)))
        log_f = pair_log_densities(bank, layer, Z, idx)  # (N, P, K)
        for col, pi in enumerate(idx):
            i, j = pairs[pi]
            bw = beta[i] * beta[j]
            lf = log_f[:, col, :]
            w_src = _source_weights(lf, c_star)
            kls = _pairwise_two_class_kls(lf, posteriors, c_star, kl_mode)
            conf_w = confusion.probs[c_star, :]
            terms = w_src * kls / conf_w
            terms[rows, c_star] = 0.0
            stats += bw * terms.sum(axis=1)
            src_mass += bw * w_src
    stats /= len(pairs)
    src_mass[rows, c_star] = -np.inf
    src = np.argmax(src_mass, axis=1)
    return stats, c_star, src


# ---------------------------------------------------------------------------
# per-image operations
# ---------------------------------------------------------------------------

def _verdict(stat, c_star, tau, layer=None, source=None) -> DetectorVerdict:
    stat = float(stat)
    return DetectorVerdict(
        statistic=stat,
        threshold=tau,
        detected=stat > tau,
        destination=int(c_star),
        winning_layer=layer,
        estimated_source=None if source is None else int(source),
    )


def baseline_density_statistic(
    bank: NullModelBank, activations: dict, posterior: np.ndarray, layer: str, tau: float = math.inf
) -> DetectorVerdict:
    """-log f(z | c*) at one layer; the destination-only baseline."""
    log_f = null_log_densities(bank, layer, activations[layer][None, :])
    stats, c_star = baseline_statistics_batch(log_f, posterior[None, :])
    return _verdict(stats[0], c_star[0], tau, layer=layer)


def ada_statistic(
    bank: NullModelBank,
    activations: dict,
    posterior: np.ndarray,
    layer: str,
    classes: str = "two",
    tau: float = math.inf,
    kl_mode: str = "forward",
) -> DetectorVerdict:
    log_f = null_log_densities(bank, layer, activations[layer][None, :])
    stats, c_star, c_hat = ada_statistics_batch(log_f, posterior[None, :], classes, kl_mode)
    return _verdict(stats[0], c_star[0], tau, layer=layer, source=c_hat[0])


def ada_maxkl(
    bank: NullModelBank,
    activations: dict,
    posterior: np.ndarray,
    layers,
    classes: str = "two",
    tau: float = math.inf,
    kl_mode: str = "forward",
) -> DetectorVerdict:
    return maxkl_over_layers(
        lambda l: ada_statistic(bank, activations, posterior, l, classes, tau, kl_mode), layers, tau
    )


def aw_ada_statistic(
    bank: NullModelBank,
    activations: dict,
    posterior: np.ndarray,
    confusion: ConfusionMatrix,
    layer: str,
    tau: float = math.inf,
    kl_mode: str = "forward",
) -> DetectorVerdict:
    log_f = null_log_densities(bank, layer, activations[layer][None, :])
    stats, c_star, src = aw_ada_statistics_batch(log_f, posterior[None, :], confusion, kl_mode)
    return _verdict(stats[0], c_star[0], tau, layer=layer, source=src[0])


def l_awa_statistic(
    bank: NullModelBank,
    activations: dict,
    posterior: np.ndarray,
    confusion: ConfusionMatrix,
    layer: str,
    tau: float = math.inf,
    kl_mode: str = "forward",
) -> DetectorVerdict:
    stats, c_star, src = l_awa_statistics_batch(
        bank, layer, activations[layer][None, :], posterior[None, :], confusion, kl_mode
    )
    return _verdict(stats[0], c_star[0], tau, layer=layer, source=src[0])


def maxkl_over_layers(per_layer_statistic, layers, tau: float = math.inf) -> DetectorVerdict:
    """Maximum of a per-layer statistic; records the first winning layer."""
    layers = list(layers)
    if not layers:
        raise MissingModel("maxkl needs at least one layer")
    verdicts = [per_layer_statistic(l) for l in layers]
    best = int(np.argmax([v.statistic for v in verdicts]))
    v = verdicts[best]
    return DetectorVerdict(
        statistic=v.statistic,
        threshold=tau,
        detected=v.statistic > tau,
        destination=v.destination,
        winning_layer=layers[best],
        estimated_source=v.estimated_source,
    )


def confidence_statistic(posterior: np.ndarray) -> float:
    """1 - max posterior; higher means more anomalous."""
    return float(1.0 - np.max(np.asarray(posterior, dtype=float)))


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------

def estimate_confusion(net: Network, validation: LabeledDataset, eta: float = 1e-3) -> ConfusionMatrix:
    """Column-conditional decision frequencies on clean data, floored at eta."""
    k = net.spec.num_classes
    counts = np.zeros((k, k))
    post, _ = forward(net, validation.images)
    decided = np.argmax(post, axis=1)
    for dec, true in zip(decided, validation.labels):
        counts[dec, true] += 1.0
    col_totals = counts.sum(axis=0)
    if np.any(col_totals == 0):
        missing = np.where(col_totals == 0)[0]
        raise ClassUnderpopulated(f"validation set has no samples of classes {missing.tolist()}")
    probs = counts / col_totals
    probs = np.maximum(probs, eta)
    probs = probs / probs.sum(axis=0, keepdims=True)
    return ConfusionMatrix(probs=probs, eta=eta)


# ---------------------------------------------------------------------------
# simple image-space baselines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WhiteCountModel:
    """Per-class training histograms of white-pixel counts."""

    counts_per_class: tuple  # tuple of sorted integer arrays
    means: np.ndarray
    binarize_threshold: float


def fit_white_count_histograms(train: LabeledDataset, binarize_threshold: float = 0.5) -> WhiteCountModel:
    if train.image_shape[2] != 1:
        raise ShapeMismatch("white-count histograms are defined for grayscale images")
    white = np.sum(train.images[..., 0] >= binarize_threshold, axis=(1, 2))
    per_class = []
    means = np.empty(train.num_classes)
    for c in range(train.num_classes):
        counts = np.sort(white[train.labels == c])
        if counts.size == 0:
            raise ClassUnderpopulated(f"no training images of class {c}")
        per_class.append(counts)
        means[c] = counts.mean()
    return WhiteCountModel(tuple(per_class), means, binarize_threshold)


def white_count_statistic(image: np.ndarray, model: WhiteCountModel | None, binarize_threshold: float | None = None) -> float:
    """1 minus the one-sided upper-tail p-value of the white-pixel count.

    The class is the one whose mean training white count is nearest; the tail
    probability uses add-one smoothing so the statistic never saturates to a
    degenerate 0/1.
    """
    if model is None:
        raise NoHistograms("white-count statistic needs fitted histograms")
    thr = model.binarize_threshold if binarize_threshold is None else binarize_threshold
    img = np.asarray(image, dtype=float)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ShapeMismatch("white-count statistic is defined for grayscale images")
        img = img[..., 0]
    n_w = int(np.sum(img >= thr))
    c = int(np.argmin(np.abs(model.means - n_w)))
    counts = model.counts_per_class[c]
    n = counts.size
    tail = n - int(np.searchsorted(counts, n_w, side="left"))  # #{counts >= n_w}
    p_value = (tail + 1.0) / (n + 1.0)
    return 1.0 - p_value


def region_count_statistic(image: np.ndarray, binarize_threshold: float = 0.5) -> float:
    """Number of 8-connected white regions after binarizing at the threshold."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ShapeMismatch("region counting is defined for grayscale images")
        img = img[..., 0]
    mask = img >= binarize_threshold
    _, n = cc_label(mask, structure=EIGHT_CONNECTED)
    return float(n)


def blur_image(image: np.ndarray, kernel_size: int = 3) -> np.ndarray:
    """Uniform average over a kernel_size x kernel_size window, per channel."""
    img = np.asarray(image, dtype=float)
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[:, :, ch] = uniform_filter(img[:, :, ch], size=kernel_size, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def blur_statistics(net: Network, image: np.ndarray, kernel_size: int = 3):
    """(decision-flip indicator, KL between the two posteriors).

    The binary value realizes detection-via-correction; the KL variant gives a
    continuous statistic for ROC sweeps.
    """
    post, _ = forward(net, image)
    post_b, _ = forward(net, blur_image(image, kernel_size))
    flipped = float(np.argmax(post) != np.argmax(post_b))
    return flipped, kl_divergence(post, post_b)


# ---------------------------------------------------------------------------
# batch scoring front end (shared by the evaluation harness and the CLI)
# ---------------------------------------------------------------------------

DETECTOR_NAMES = (
    "baseline",
    "ada",
    "ada-all",
    "ada-maxkl",
    "aw-ada-maxkl",
    "l-awa-maxkl",
    "confidence",
    "white-count",
    "region-count",
    "blur",
)


@dataclass
class ScoreResult:
    statistics: np.ndarray
    destinations: np.ndarray
    winning_layers: list
    sources: np.ndarray  # -1 where not defined


@dataclass
class Scorer:
    """Closed-name detector dispatch over image batches.

    Needs a bank for the ADA family (pairwise bank for l-awa-maxkl), a
    confusion matrix for the weighted variants, and white-count histograms for
    white-count.
    """

    name: str
    net: Network
    bank: NullModelBank | None = None
    confusion: ConfusionMatrix | None = None
    layers: list | None = None
    white_model: WhiteCountModel | None = None
    binarize_threshold: float = 0.5
    kl_mode: str = "forward"
    blur_kernel: int = 3

    def __post_init__(self):
        if self.name not in DETECTOR_NAMES:
            raise MissingModel(f"unknown detector {self.name!r}")
        needs_bank = self.name in ("baseline", "ada", "ada-all", "ada-maxkl", "aw-ada-maxkl", "l-awa-maxkl")
        if needs_bank:
            if self.bank is None:
                raise MissingModel(f"detector {self.name!r} needs a null-model bank")
            if self.layers is None:
                self.layers = list(self.bank.layers)
        if self.name in ("aw-ada-maxkl", "l-awa-maxkl") and self.confusion is None:
            raise MissingModel(f"detector {self.name!r} needs a confusion matrix")
        if self.name == "white-count" and self.white_model is None:
            raise MissingModel("white-count needs fitted histograms")

    def score(self, images: np.ndarray, batch_size: int = 512) -> ScoreResult:
        images = np.asarray(images, dtype=float)
        if images.ndim == 3:
            images = images[None]
        outs = [self._score_chunk(images[s:s + batch_size]) for s in range(0, len(images), batch_size)]
        return ScoreResult(
            statistics=np.concatenate([o.statistics for o in outs]),
            destinations=np.concatenate([o.destinations for o in outs]),
            winning_layers=sum((o.winning_layers for o in outs), []),
            sources=np.concatenate([o.sources for o in outs]),
        )

    def _score_chunk(self, images: np.ndarray) -> ScoreResult:
        n = len(images)
        taps = self.layers if self.bank is not None else []
        post, acts = forward(self.net, images, taps=taps if self.name not in ("confidence", "white-count", "region-count") else [])
        c_star = np.argmax(post, axis=1)
        layers_out = [None] * n
        sources = np.full(n, -1)
        if self.name == "confidence":
            stats = 1.0 - post.max(axis=1)
        elif self.name == "white-count":
            stats = np.array([white_count_statistic(img, self.white_model) for img in images])
        elif self.name == "region-count":
            stats = np.array([region_count_statistic(img, self.binarize_threshold) for img in images])
        elif self.name == "blur":
            blurred = np.stack([blur_image(img, self.blur_kernel) for img in images])
            post_b, _ = forward(self.net, blurred)
            stats = _kl_rows(post, post_b)
        elif self.name == "baseline":
            log_f = null_log_densities(self.bank, self.layers[0], acts[self.layers[0]])
            stats, c_star = baseline_statistics_batch(log_f, post)
            layers_out = [self.layers[0]] * n
        elif self.name in ("ada", "ada-all"):
            mode = "two" if self.name == "ada" else "all"
            log_f = null_log_densities(self.bank, self.layers[0], acts[self.layers[0]])
            stats, c_star, src = ada_statistics_batch(log_f, post, mode, self.kl_mode)
            layers_out = [self.layers[0]] * n
            sources = src
        else:
            per_layer = []
            per_src = []
            for layer in self.layers:
                if self.name == "ada-maxkl":
                    log_f = null_log_densities(self.bank, layer, acts[layer])
                    s, c_star, src = ada_statistics_batch(log_f, post, "two", self.kl_mode)
                elif self.name == "aw-ada-maxkl":
                    log_f = null_log_densities(self.bank, layer, acts[layer])
                    s, c_star, src = aw_ada_statistics_batch(log_f, post, self.confusion, self.kl_mode)
                else:  # l-awa-maxkl
                    s, c_star, src = l_awa_statistics_batch(
                        self.bank, layer, acts[layer], post, self.confusion, self.kl_mode
                    )
                per_layer.append(s)
                per_src.append(src)
            stacked = np.stack(per_layer, axis=0)  # (L, N)
            win = np.argmax(stacked, axis=0)
            stats = stacked[win, np.arange(n)]
            layers_out = [self.layers[w] for w in win]
            sources = np.stack(per_src, axis=0)[win, np.arange(n)]
        return ScoreResult(
            statistics=np.asarray(stats, dtype=float),
            destinations=c_star,
            winning_layers=layers_out,
            sources=sources,
        )


def verdicts_to_csv(result: ScoreResult, tau: float, stream, image_ids=None, header_comment: str | None = None) -> None:
    """CSV rows: image id, statistic, detected, winning layer, c*, estimated source."""
    if header_comment:
        stream.write(f"# {header_comment}\n")
    stream.write("image_id,statistic,detected,winning_layer,destination,estimated_source\n")
    n = len(result.statistics)
    ids = image_ids if image_ids is not None else range(n)
    for i, img_id in zip(range(n), ids):
        layer = result.winning_layers[i] or ""
        src = result.sources[i]
        stream.write(
            f"{img_id},{result.statistics[i]:.12g},{int(result.statistics[i] > tau)},"
            f"{layer},{result.destinations[i]},{src if src >= 0 else ''}\n"
        )

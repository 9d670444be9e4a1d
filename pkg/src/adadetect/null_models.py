"""Class-conditional null densities of deep-layer activations.

Three families: Gaussian kernel (one component per sample, shared isotropic
variance picked by leave-one-out likelihood), GMMs fit by EM with BIC order
selection, and log-normal mixtures (GMM on ln(z + eps), eps = 1e-6, with the
Jacobian folded into the density). All densities are evaluated and exchanged
as log-densities.

Seeding: every fit takes an explicit integer seed; independent cells of a
bank derive child seeds through numpy.random.SeedSequence so refits are
bit-reproducible and cells could be fit in parallel.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .datasets import LabeledDataset
from .dnn import Network, forward, outgoing_weight_scores
from .errors import (
    ClassUnderpopulated,
    DegenerateComponent,
    DimensionMismatch,
    NegativeInput,
    TooFewSamples,
    UnreadableArtifact,
)
from .numerics import LOG_2PI, cholesky_with_jitter, log_sum_exp_rows
from .seeding import child_seed

LOG_OFFSET = 1e-6
DIAG_VARIANCE_FLOOR = 1e-8
COLLAPSE_WEIGHT = 1e-8


@dataclass
class MixtureModel:
    """A Gaussian mixture, possibly on log-transformed coordinates.

    cov_type "full" stores (k,d,d) covariances, "diag" stores (k,d) variances,
    "spherical" one shared scalar variance (the kernel estimator). family
    "lognormal" means the Gaussian lives on y = ln(z + log_offset) and
    log_density accounts for the change of variables.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    cov_type: str
    family: str
    log_offset: float | None = None
    log_likelihood: float = float("nan")
    ll_history: tuple = ()
    _factors: list = field(default=None, repr=False, compare=False)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def factors(self):
        if self._factors is None:
            self._factors = [cholesky_with_jitter(c) for c in self.covariances]
        return self._factors


def _component_log_pdfs(Y, weights, means, covariances, cov_type, factors=None):
    """log(w_m) + log N(y; mu_m, Sigma_m) for all rows of Y; returns (n, k)."""
    n, d = Y.shape
    k = len(weights)
    out = np.empty((n, k))
    if cov_type == "full":
        if factors is None:
            factors = [cholesky_with_jitter(c) for c in covariances]
        for m in range(k):
            w = factors[m].solve_lower((Y - means[m]).T)
            out[:, m] = -0.5 * d * LOG_2PI - factors[m].log_det_sqrt - 0.5 * np.sum(w * w, axis=0)
    elif cov_type == "diag":
        var = covariances  # (k, d)
        inv = 1.0 / var
        quad = (Y * Y) @ inv.T - 2.0 * (Y @ (means * inv).T) + np.sum(means * means * inv, axis=1)[None, :]
        out = -0.5 * (d * LOG_2PI + np.log(var).sum(axis=1)[None, :] + np.maximum(quad, 0.0))
    elif cov_type == "spherical":
        var = float(covariances)
        sq = np.sum(Y * Y, axis=1)[:, None] - 2.0 * Y @ means.T + np.sum(means * means, axis=1)[None, :]
        out = -0.5 * (d * LOG_2PI + d * np.log(var) + np.maximum(sq, 0.0) / var)
    else:
        raise DimensionMismatch(f"unknown covariance type {cov_type!r}")
    return out + np.log(weights)[None, :]


def log_density_batch(model: MixtureModel, Z: np.ndarray) -> np.ndarray:
    """Mixture log density of each row; for log-normal models includes the Jacobian."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[1] != model.dim:
        raise DimensionMismatch(f"z dim {Z.shape[1]} vs model dim {model.dim}")
    jac = 0.0
    if model.family == "lognormal":
        if np.any(Z < 0.0):
            raise NegativeInput("log-normal density evaluated on a negative coordinate")
        shifted = Z + model.log_offset
        Y = np.log(shifted)
        jac = -np.sum(np.log(shifted), axis=1)
    else:
        Y = Z
    factors = model.factors() if model.cov_type == "full" else None
    comp = _component_log_pdfs(Y, model.weights, model.means, model.covariances, model.cov_type, factors)
    return log_sum_exp_rows(comp) + jac


def log_density(model: MixtureModel, z: np.ndarray) -> float:
    return float(log_density_batch(model, np.asarray(z, dtype=float)[None, :])[0])


# ---------------------------------------------------------------------------
# kernel density with leave-one-out bandwidth
# ---------------------------------------------------------------------------

def fit_kernel_density(samples: np.ndarray, grid_size: int = 31) -> MixtureModel:
    """One Gaussian per sample; shared isotropic variance maximizing LOO likelihood.

    The variance grid is logarithmic around the mean per-coordinate sample
    variance, spanning roughly 1e-4x to 1e2x.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = X.shape
    if n < 2:
        raise TooFewSamples(f"kernel density needs >= 2 samples, got {n}")
    sq = np.sum(X * X, axis=1)
    dist2 = np.maximum(sq[:, None] - 2.0 * X @ X.T + sq[None, :], 0.0)
    if np.all(dist2 <= 0.0):
        raise TooFewSamples("all samples identical; bandwidth selection is degenerate")
    scale = float(np.mean(np.var(X, axis=0)))
    if scale <= 0.0:
        scale = float(np.mean(dist2)) / d
    grid = scale * np.logspace(-4.0, 2.0, grid_size)
    off_diag = ~np.eye(n, dtype=bool)
    best_var, best_ll = None, -np.inf
    for var in grid:
        logk = -0.5 * (d * LOG_2PI + d * np.log(var) + dist2 / var)
        logk = np.where(off_diag, logk, -np.inf)
        loo = log_sum_exp_rows(logk) - np.log(n - 1)
        ll = float(np.sum(loo))
        if ll > best_ll:
            best_var, best_ll = var, ll
    return MixtureModel(
        weights=np.full(n, 1.0 / n),
        means=X.copy(),
        covariances=np.asarray(best_var),
        cov_type="spherical",
        family="kernel",
        log_likelihood=best_ll,
    )


# ---------------------------------------------------------------------------
# EM for Gaussian mixtures
# ---------------------------------------------------------------------------

def min_samples(k: int, d: int, cov: str) -> int:
    return 5 * k * d if cov == "full" else 5 * k


def feasible_ks(n: int, d: int, cov: str, k_range) -> list:
    return [k for k in k_range if n >= min_samples(k, d, cov)]


def _kmeanspp_means(X, k, rng):
    n = X.shape[0]
    means = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            [np.sum((X - m) ** 2, axis=1) for m in means], axis=0
        )
        total = d2.sum()
        if total <= 0.0:
            means.append(X[rng.integers(n)])
            continue
        means.append(X[rng.choice(n, p=d2 / total)])
    return np.array(means)


def _initial_covs(X, k, cov):
    if cov == "full":
        base = np.cov(X.T, ddof=0).reshape(X.shape[1], X.shape[1])
        base = base + 1e-6 * (np.trace(base) / X.shape[1] + 1e-12) * np.eye(X.shape[1])
        return np.repeat(base[None], k, axis=0)
    var = np.maximum(np.var(X, axis=0), DIAG_VARIANCE_FLOOR)
    return np.repeat(var[None], k, axis=0)


def fit_gmm(
    samples: np.ndarray,
    k: int,
    cov: str = "full",
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-6,
) -> MixtureModel:
    """EM to convergence (relative log-likelihood change < tol or max_iter).

    A collapsed component (weight < 1e-8) is re-seeded once at the worst-fit
    training point with a covariance borrowed from the surviving components;
    a component that collapses again after its retry raises
    DegenerateComponent.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = X.shape
    if cov not in ("full", "diag"):
        raise DimensionMismatch(f"cov must be 'full' or 'diag', got {cov!r}")
    if n < min_samples(k, d, cov):
        raise TooFewSamples(f"{n} samples < required {min_samples(k, d, cov)} for k={k}, d={d}, {cov}")
    rng = np.random.default_rng(seed)
    means = _kmeanspp_means(X, k, rng)
    covs = _initial_covs(X, k, cov)
    weights = np.full(k, 1.0 / k)

    history: list = []
    prev_state = None
    reseeded: set = set()
    m_steps = 0
    while True:
        comp = _component_log_pdfs(X, weights, means, covs, cov)
        row_ll = log_sum_exp_rows(comp)
        ll = float(np.mean(row_ll))
        if history and ll < history[-1]:
            # numerical decrease at convergence: keep the last recorded state
            weights, means, covs = prev_state
            break
        history.append(ll)
        converged = (
            len(history) >= 2
            and abs(history[-1] - history[-2]) < tol * abs(history[-2])
        )
        if converged or m_steps >= max_iter:
            break
        resp = np.exp(comp - row_ll[:, None])
        nk = resp.sum(axis=0)
        dead = np.where(nk / n < COLLAPSE_WEIGHT)[0]
        if dead.size:
            if any(m in reseeded for m in dead):
                raise DegenerateComponent("component collapsed again after its reseed")
            alive = [m for m in range(k) if m not in dead]
            local_cov = covs[alive].mean(axis=0) if alive else _initial_covs(X, 1, cov)[0]
            worst = int(np.argmin(row_ll))
            for m in dead:
                reseeded.add(int(m))
                means[m] = X[worst]
                covs[m] = local_cov
                weights[m] = 1.0 / n
            weights = weights / weights.sum()
            history = []  # the trajectory restarts after a reseed
            prev_state = None
            continue
        prev_state = (weights, means, covs)
        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        if cov == "full":
            newc = np.empty_like(covs)
            for m in range(k):
                diff = X - means[m]
                newc[m] = (resp[:, m][:, None] * diff).T @ diff / nk[m]
                newc[m] = 0.5 * (newc[m] + newc[m].T)
            covs = newc
        else:
            ex2 = (resp.T @ (X * X)) / nk[:, None]
            covs = np.maximum(ex2 - means * means, DIAG_VARIANCE_FLOOR)
        m_steps += 1
    return MixtureModel(
        weights=weights,
        means=means,
        covariances=covs,
        cov_type=cov,
        family="gmm",
        log_likelihood=float(history[-1] * n),
        ll_history=tuple(h * n for h in history),
    )


def n_parameters(k: int, d: int, cov: str) -> int:
    if cov == "full":
        return (k - 1) + k * d + k * (d * (d + 1) // 2)
    return (k - 1) + 2 * k * d


def bic_score(log_likelihood: float, k: int, d: int, n: int, cov: str) -> float:
    return -2.0 * log_likelihood + n_parameters(k, d, cov) * float(np.log(n))


def select_order_bic(samples: np.ndarray, k_range, cov: str, seed: int = 0) -> MixtureModel:
    """Fit each order in k_range and keep the BIC minimizer (ties favor smaller k).

    An order whose EM cannot keep all components alive counts as evidence
    against that order and is skipped; only when every candidate degenerates
    does the failure propagate.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    ks = list(k_range)
    if not ks:
        raise TooFewSamples("empty k_range")
    n = X.shape[0]
    best, best_bic = None, np.inf
    last_failure = None
    for k in sorted(ks):
        try:
            model = fit_gmm(X, k, cov=cov, seed=child_seed(seed, k))
        except DegenerateComponent as exc:
            last_failure = exc
            continue
        bic = bic_score(model.log_likelihood, k, X.shape[1], n, cov)
        if bic < best_bic:
            best, best_bic = model, bic
    if best is None:
        raise last_failure
    return best


def fit_lognormal_mixture(samples: np.ndarray, k_range, cov: str = "full", seed: int = 0) -> MixtureModel:
    """GMM on ln(z + 1e-6) with BIC order selection; density includes the Jacobian."""
    Z = np.atleast_2d(np.asarray(samples, dtype=float))
    if np.any(Z < 0.0):
        raise NegativeInput("log-normal mixture needs nonnegative samples")
    Y = np.log(Z + LOG_OFFSET)
    model = select_order_bic(Y, k_range, cov=cov, seed=seed)
    model.family = "lognormal"
    model.log_offset = LOG_OFFSET
    return model


# ---------------------------------------------------------------------------
# banks
# ---------------------------------------------------------------------------

@dataclass
class NullModelBank:
    """Per (layer, class) null models; pairwise banks hold 2-d models per feature pair."""

    layers: list
    num_classes: int
    models: dict = field(default_factory=dict)          # (layer, class) -> MixtureModel
    pair_models: dict = field(default_factory=dict)     # (layer, class) -> {(i, j) -> MixtureModel}
    pairs: dict = field(default_factory=dict)           # layer -> ordered list of (i, j)
    betas: dict = field(default_factory=dict)           # layer -> beta vector

    @property
    def is_pairwise(self) -> bool:
        return bool(self.pair_models)


DEFAULT_K_RANGE = tuple(range(1, 11))


def resolve_family(tap: str, family: str) -> tuple:
    """Map a family name to (family, cov); bare 'lognormal'/'gmm' take the
    layer-dependent default covariance (pool taps diagonal, others full)."""
    default_cov = "diag" if tap.startswith("pool") else "full"
    table = {
        "kernel": ("kernel", None),
        "gmm": ("gmm", default_cov),
        "gmm-full": ("gmm", "full"),
        "gmm-diag": ("gmm", "diag"),
        "lognormal": ("lognormal", default_cov),
        "lognormal-full": ("lognormal", "full"),
        "lognormal-diag": ("lognormal", "diag"),
    }
    if family not in table:
        raise DimensionMismatch(f"unknown density family {family!r}")
    return table[family]


def extract_activations(net: Network, data: LabeledDataset, taps, batch_size: int = 512) -> dict:
    """One forward pass over the dataset; {tap: (N, d)} plus posteriors under 'posterior'."""
    chunks = {t: [] for t in taps}
    posts = []
    for start in range(0, len(data), batch_size):
        post, acts = forward(net, data.images[start:start + batch_size], taps=taps)
        posts.append(post)
        for t in taps:
            chunks[t].append(acts[t])
    out = {t: np.concatenate(chunks[t], axis=0) for t in taps}
    out["posterior"] = np.concatenate(posts, axis=0)
    return out


def _fit_family(X, family, cov, k_range, seed):
    if family == "kernel":
        return fit_kernel_density(X)
    ks = feasible_ks(X.shape[0], X.shape[1], cov, k_range)
    if not ks:
        raise ClassUnderpopulated(
            f"{X.shape[0]} samples cannot support k={min(k_range)} {cov} in {X.shape[1]}-d"
        )
    if family == "gmm":
        return select_order_bic(X, ks, cov=cov, seed=seed)
    return fit_lognormal_mixture(X, ks, cov=cov, seed=seed)


def fit_null_bank(
    net: Network,
    train: LabeledDataset,
    taps,
    family_per_tap: dict | None = None,
    k_range=DEFAULT_K_RANGE,
    seed: int = 0,
) -> NullModelBank:
    """Fit one model per (tap, class) on that class's training activations.

    family_per_tap values come from resolve_family's table; taps not listed
    use 'gmm' with the layer-dependent default covariance.
    """
    taps = list(taps)
    acts = extract_activations(net, train, taps)
    bank = NullModelBank(layers=taps, num_classes=train.num_classes)
    for ti, tap in enumerate(taps):
        family, cov = resolve_family(tap, (family_per_tap or {}).get(tap, "gmm"))
        for c in range(train.num_classes):
            X = acts[tap][train.labels == c]
            if X.shape[0] < 2:
                raise ClassUnderpopulated(f"class {c} has {X.shape[0]} samples")
            try:
                bank.models[(tap, c)] = _fit_family(X, family, cov, k_range, child_seed(seed, ti, c))
            except TooFewSamples as exc:
                raise ClassUnderpopulated(str(exc)) from exc
    return bank


def ranked_feature_pairs(beta: np.ndarray, max_pairs: int | None) -> list:
    """All (i<j) pairs ranked by beta_i * beta_j, truncated to max_pairs."""
    d = len(beta)
    pairs = list(itertools.combinations(range(d), 2))
    if max_pairs is not None and len(pairs) > max_pairs:
        pairs.sort(key=lambda ij: (-(beta[ij[0]] * beta[ij[1]]), ij))
        pairs = sorted(pairs[:max_pairs])
    return pairs


def fit_pairwise_bank(
    net: Network,
    train: LabeledDataset,
    taps,
    max_pairs_per_layer: int | None = 2000,
    k_range=DEFAULT_K_RANGE,
    seed: int = 0,
    family: str = "lognormal-full",
) -> NullModelBank:
    """Fit 2-d models for the retained feature pairs of each tap and class.

    Pairs are ranked by the product of outgoing-weight scores when a cap
    applies. The beta vectors ride along in the bank for the aggregation
    weights.
    """
    taps = list(taps)
    acts = extract_activations(net, train, taps)
    bank = NullModelBank(layers=taps, num_classes=train.num_classes)
    for ti, tap in enumerate(taps):
        beta = outgoing_weight_scores(net, tap)
        bank.betas[tap] = beta
        pairs = ranked_feature_pairs(beta, max_pairs_per_layer)
        bank.pairs[tap] = pairs
        fam, cov = resolve_family(tap, family)
        if fam == "kernel":
            raise DimensionMismatch("pairwise banks use mixture families, not kernel")
        for c in range(train.num_classes):
            X = acts[tap][train.labels == c]
            if X.shape[0] < 2:
                raise ClassUnderpopulated(f"class {c} has {X.shape[0]} samples")
            cell = {}
            for pi, (i, j) in enumerate(pairs):
                try:
                    cell[(i, j)] = _fit_family(X[:, [i, j]], fam, cov, k_range, child_seed(seed, ti, c, pi))
                except TooFewSamples as exc:
                    raise ClassUnderpopulated(str(exc)) from exc
            bank.pair_models[(tap, c)] = cell
    return bank


# ---------------------------------------------------------------------------
# persistence: JSON manifest + little-endian f64 parameter blob
# ---------------------------------------------------------------------------

def _model_record(model: MixtureModel, blob: bytearray) -> dict:
    rec = {
        "family": model.family,
        "cov_type": model.cov_type,
        "k": model.k,
        "d": model.dim,
        "log_offset": model.log_offset,
        "log_likelihood": model.log_likelihood,
        "offset": len(blob),
    }
    for arr in (model.weights, model.means, np.atleast_1d(model.covariances)):
        blob.extend(np.asarray(arr, dtype="<f8").tobytes())
    return rec


def _model_from_record(rec: dict, blob: bytes) -> MixtureModel:
    k, d = rec["k"], rec["d"]
    cursor = rec["offset"]

    def take(shape):
        nonlocal cursor
        count = int(np.prod(shape))
        end = cursor + 8 * count
        if end > len(blob):
            raise UnreadableArtifact(f"model parameters overrun blob at offset {cursor}")
        arr = np.frombuffer(blob[cursor:end], dtype="<f8").reshape(shape).copy()
        cursor = end
        return arr

    weights = take((k,))
    means = take((k, d))
    if rec["cov_type"] == "full":
        covs = take((k, d, d))
    elif rec["cov_type"] == "diag":
        covs = take((k, d))
    else:
        covs = take((1,))[0]
    return MixtureModel(
        weights=weights,
        means=means,
        covariances=covs,
        cov_type=rec["cov_type"],
        family=rec["family"],
        log_offset=rec["log_offset"],
        log_likelihood=rec["log_likelihood"],
    )


def save_bank(bank: NullModelBank, prefix: str, metadata: dict | None = None) -> None:
    blob = bytearray()
    joint = [
        {"layer": tap, "class": c, **_model_record(m, blob)}
        for (tap, c), m in sorted(bank.models.items())
    ]
    pairwise = []
    for (tap, c), cell in sorted(bank.pair_models.items()):
        for (i, j) in bank.pairs[tap]:
            pairwise.append(
                {"layer": tap, "class": c, "pair": [int(i), int(j)], **_model_record(cell[(i, j)], blob)}
            )
    manifest = {
        "format": "adadetect-bank-v1",
        "layers": list(bank.layers),
        "num_classes": bank.num_classes,
        "betas": {t: list(map(float, b)) for t, b in bank.betas.items()},
        "pairs": {t: [list(p) for p in ps] for t, ps in bank.pairs.items()},
        "joint_models": joint,
        "pair_models": pairwise,
        "blob_bytes": len(blob),
    }
    if metadata:
        manifest["metadata"] = metadata
    with open(prefix + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(prefix + ".bin", "wb") as f:
        f.write(bytes(blob))


def load_bank(prefix: str) -> NullModelBank:
    try:
        with open(prefix + ".json") as f:
            manifest = json.load(f)
        with open(prefix + ".bin", "rb") as f:
            blob = f.read()
    except (OSError, json.JSONDecodeError) as exc:
        raise UnreadableArtifact(str(exc)) from exc
    if manifest.get("format") != "adadetect-bank-v1":
        raise UnreadableArtifact(f"unexpected manifest format {manifest.get('format')!r}")
    if manifest["blob_bytes"] != len(blob):
        raise UnreadableArtifact(f"blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    bank = NullModelBank(layers=list(manifest["layers"]), num_classes=manifest["num_classes"])
    bank.betas = {t: np.asarray(b) for t, b in manifest["betas"].items()}
    bank.pairs = {t: [tuple(p) for p in ps] for t, ps in manifest["pairs"].items()}
    for rec in manifest["joint_models"]:
        bank.models[(rec["layer"], rec["class"])] = _model_from_record(rec, blob)
    for rec in manifest["pair_models"]:
        cell = bank.pair_models.setdefault((rec["layer"], rec["class"]), {})
        cell[tuple(rec["pair"])] = _model_from_record(rec, blob)
    return bank

"""Targeted evasion attacks used to evaluate the detectors.

Four crafting strategies:
  * fgsm_attack: iterated gradient descent on the cross-entropy toward the
    target class with a fixed step, clamped to [0,1] each iteration.
  * jsma_attack: greedy saturation of dark pixels (or pixel color planes)
    ranked by the saliency of the target logit against the other logits,
    under a budget on the fraction of modified coordinates.
  * cw_l2_attack: projected gradient descent on ||delta||_2^2 + c * hinge
    margin loss, tracking the lowest-distortion success.
  * whitebox_attack: coordinate descent against classifier plus detector
    jointly, accepting +/-0.05 moves only when the total cost strictly drops.

Attacks on distinct images are independent; the *_batch forms run the same
per-image algorithm over many images at once (identical results, one
vectorized gradient pass per iteration).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets import write_idx_f32
from .dnn import Network, forward, forward_logits, input_gradient_batch
from .errors import InitiallyDetected, NotCorrectlyClassified

DARK_PIXEL_THRESHOLD = 0.5


@dataclass
class AttackRecord:
    original: np.ndarray
    perturbed: np.ndarray
    true_class: int
    target_class: int
    success: bool
    l2_distortion: float
    modified_pixels: int
    iterations: int


def _finish(original, perturbed, true_class, target, success, iterations) -> AttackRecord:
    delta = perturbed - original
    return AttackRecord(
        original=original,
        perturbed=perturbed,
        true_class=int(true_class),
        target_class=int(target),
        success=bool(success),
        l2_distortion=float(np.sqrt(np.sum(delta * delta))),
        modified_pixels=int(np.sum(delta != 0.0)),
        iterations=int(iterations),
    )


def select_target(true_class: int, num_classes: int, seed: int) -> int:
    """Uniform draw over the classes other than true_class; deterministic per seed."""
    rng = np.random.default_rng(seed)
    t = int(rng.integers(num_classes - 1))
    return t + (t >= true_class)


def _check_correct(net: Network, images: np.ndarray, true_classes: np.ndarray) -> None:
    post, _ = forward(net, images)
    decided = np.argmax(post, axis=1)
    bad = np.where(decided != true_classes)[0]
    if bad.size:
        raise NotCorrectlyClassified(
            f"{bad.size} image(s) not classified to their true class (first index {bad[0]})"
        )


# ---------------------------------------------------------------------------
# FGSM (iterated targeted gradient descent)
# ---------------------------------------------------------------------------

def fgsm_attack_batch(net, images, true_classes, targets, step, max_iters=1000):
    images = np.asarray(images, dtype=float)
    true_classes = np.asarray(true_classes, dtype=int)
    targets = np.asarray(targets, dtype=int)
    _check_correct(net, images, true_classes)
    n = len(images)
    x = images.copy()
    done = np.zeros(n, dtype=bool)
    iters = np.full(n, max_iters, dtype=int)
    if step > 0.0:
        for it in range(1, max_iters + 1):
            active = np.where(~done)[0]
            if active.size == 0:
                break
            g = input_gradient_batch(net, x[active], targets[active], "cross-entropy")
            x[active] = np.clip(x[active] - step * g, 0.0, 1.0)
            post, _ = forward(net, x[active])
            hit = np.argmax(post, axis=1) == targets[active]
            just_done = active[hit]
            done[just_done] = True
            iters[just_done] = it
    return [
        _finish(images[i], x[i], true_classes[i], targets[i], done[i], iters[i] if done[i] else (0 if step == 0.0 else max_iters))
        for i in range(n)
    ]


def fgsm_attack(net, image, true_class, target, step, max_iters=1000) -> AttackRecord:
    """Iterate x <- clamp(x - step * grad CE_target) until the decision is the target."""
    return fgsm_attack_batch(net, np.asarray(image)[None], [true_class], [target], step, max_iters)[0]


# ---------------------------------------------------------------------------
# JSMA (dark-pixel / color-plane saturation)
# ---------------------------------------------------------------------------

def jsma_saliency(net, images, targets):
    """Per-coordinate target-gradient and other-classes-gradient-sum, flattened."""
    a = input_gradient_batch(net, images, targets, "logit-target")
    s = input_gradient_batch(net, images, targets, "logit-sum")
    n = len(images)
    alpha = a.reshape(n, -1)
    beta = s.reshape(n, -1) - alpha  # sum over classes other than the target
    return alpha, beta


def jsma_attack_batch(net, images, true_classes, targets, max_fraction,
                      dark_threshold=DARK_PIXEL_THRESHOLD):
    images = np.asarray(images, dtype=float)
    true_classes = np.asarray(true_classes, dtype=int)
    targets = np.asarray(targets, dtype=int)
    _check_correct(net, images, true_classes)
    n = len(images)
    d = int(np.prod(images.shape[1:]))
    budget = int(math.floor(max_fraction * d + 0.5))
    x = images.copy()
    flat = x.reshape(n, d)
    done = np.zeros(n, dtype=bool)
    stuck = np.zeros(n, dtype=bool)
    used = np.zeros(n, dtype=int)
    iters = np.zeros(n, dtype=int)
    for it in range(1, budget + 1):
        active = np.where(~done & ~stuck)[0]
        if active.size == 0:
            break
        alpha, beta = jsma_saliency(net, x[active], targets[active])
        dark = flat[active] < dark_threshold
        eligible = dark & (alpha > 0.0) & (beta < 0.0)
        score = np.where(eligible, alpha * (-beta), -np.inf)
        # when no coordinate satisfies the strict criterion, fall back to the
        # best combined direction among the dark coordinates
        fallback = np.where(dark, alpha - beta, -np.inf)
        has_eligible = np.any(eligible, axis=1)
        score = np.where(has_eligible[:, None], score, fallback)
        pick = np.argmax(score, axis=1)
        no_candidate = ~np.isfinite(score[np.arange(active.size), pick])
        stuck[active[no_candidate]] = True
        moving = active[~no_candidate]
        if moving.size == 0:
            continue
        flat[moving, pick[~no_candidate]] = 1.0
        used[moving] += 1
        post, _ = forward(net, x[moving])
        hit = np.argmax(post, axis=1) == targets[moving]
        just_done = moving[hit]
        done[just_done] = True
        iters[just_done] = it
    iters[~done] = used[~done]
    return [
        _finish(images[i], x[i], true_classes[i], targets[i], done[i], iters[i])
        for i in range(n)
    ]


def jsma_attack(net, image, true_class, target, max_fraction,
                dark_threshold=DARK_PIXEL_THRESHOLD) -> AttackRecord:
    """Greedy dark-coordinate saturation under a round(max_fraction * d) budget.

    The saliency prefers coordinates whose increase raises the target logit
    while lowering the other logits in aggregate; each chosen coordinate is
    saturated to 1, so perturbations only brighten.
    """
    return jsma_attack_batch(net, np.asarray(image)[None], [true_class], [target],
                             max_fraction, dark_threshold)[0]


# ---------------------------------------------------------------------------
# CW-L2 (projected gradient descent with best-seen tracking)
# ---------------------------------------------------------------------------

def cw_l2_attack_batch(net, images, true_classes, targets, lagrange_c,
                       step=0.01, max_iters=1000):
    images = np.asarray(images, dtype=float)
    true_classes = np.asarray(true_classes, dtype=int)
    targets = np.asarray(targets, dtype=int)
    _check_correct(net, images, true_classes)
    n = len(images)
    rows = np.arange(n)
    x = images.copy()
    best = images.copy()
    best_l2 = np.full(n, np.inf)
    best_iter = np.zeros(n, dtype=int)

    def track_best(it):
        post, logits = forward_logits(net, x)
        masked = logits.copy()
        masked[rows, targets] = -np.inf
        f = masked.max(axis=1) - logits[rows, targets]
        succ = np.argmax(post, axis=1) == targets
        if np.any(succ):
            l2 = np.sqrt(np.sum((x - images).reshape(n, -1) ** 2, axis=1))
            improved = succ & (l2 < best_l2)
            best[improved] = x[improved]
            best_l2[improved] = l2[improved]
            best_iter[improved] = it
        return f

    for it in range(max_iters):
        f = track_best(it)
        grad = 2.0 * (x - images)
        hinge_on = np.where(f > 0.0)[0]
        if hinge_on.size and lagrange_c > 0.0:
            gm = input_gradient_batch(net, x[hinge_on], targets[hinge_on], "logit-margin")
            grad[hinge_on] += lagrange_c * gm
        x = np.clip(x - step * grad, 0.0, 1.0)
    track_best(max_iters)
    out = []
    for i in range(n):
        ok = np.isfinite(best_l2[i])
        out.append(
            _finish(images[i], best[i] if ok else x[i], true_classes[i], targets[i],
                    ok, best_iter[i] if ok else max_iters)
        )
    return out


def cw_l2_attack(net, image, true_class, target, lagrange_c,
                 step=0.01, max_iters=1000) -> AttackRecord:
    """Minimize ||delta||_2^2 + c * max(0, max_{j!=t} logit_j - logit_t).

    Projected gradient descent with a fixed step; the returned perturbation is
    the lowest-distortion iterate that achieved the target decision, or a
    failure record when none did (always when c = 0).
    """
    return cw_l2_attack_batch(net, np.asarray(image)[None], [true_class], [target],
                              lagrange_c, step, max_iters)[0]


# ---------------------------------------------------------------------------
# white-box attack on classifier + detector
# ---------------------------------------------------------------------------

def whitebox_attack(
    net: Network,
    statistic_fn,
    tau: float,
    image: np.ndarray,
    true_class: int,
    lagrange_c: float,
    step: float = 0.05,
    tol: float = 1e-4,
    max_passes: int = 50,
    require_correct: bool = True,
):
    """Coordinate descent on ||delta||_2 + c * (f + D) with detector knowledge.

    f is the hinge classification loss (positive while the decision stays at
    true_class), D = max(0, statistic - tau). Coordinates are visited in
    row-major order over all color planes; for each, +step then -step is
    tried (clamped) and the first strictly cost-decreasing move is accepted.
    Stops when the cost improvement over a full pass stays below tol for
    two consecutive passes.

    Returns (AttackRecord, accepted_costs) where accepted_costs is the
    strictly decreasing sequence of costs after each accepted move.
    """
    image = np.asarray(image, dtype=float)
    if require_correct:
        _check_correct(net, image[None], np.array([true_class]))
    s0 = float(statistic_fn(image))
    if s0 > tau:
        raise InitiallyDetected(f"statistic {s0:.6g} already above threshold {tau:.6g}")

    def cost_terms(x):
        post, logits = forward_logits(net, x[None])
        masked = logits[0].copy()
        masked[true_class] = -np.inf
        f = max(0.0, float(logits[0, true_class] - masked.max()))
        dstat = float(statistic_fn(x))
        dloss = max(0.0, dstat - tau)
        l2 = float(np.sqrt(np.sum((x - image) ** 2)))
        return l2 + lagrange_c * (f + dloss), int(np.argmax(post[0])), dstat

    x = image.copy()
    cost, _, _ = cost_terms(x)
    accepted = [cost]
    shape = x.shape
    coords = [(i, j, ch) for i in range(shape[0]) for j in range(shape[1]) for ch in range(shape[2])]
    quiet_passes = 0
    passes = 0
    while quiet_passes < 2 and passes < max_passes:
        passes += 1
        pass_start = cost
        for (i, j, ch) in coords:
            base = x[i, j, ch]
            for sign in (+1.0, -1.0):
                trial = min(1.0, max(0.0, base + sign * step))
                if trial == base:
                    continue
                x[i, j, ch] = trial
                c_new, _, _ = cost_terms(x)
                if c_new < cost:
                    cost = c_new
                    accepted.append(cost)
                    break
                x[i, j, ch] = base
        quiet_passes = quiet_passes + 1 if pass_start - cost < tol else 0
    _, decision, stat = cost_terms(x)
    success = decision != true_class and stat <= tau
    record = _finish(image, x, true_class, decision, success, passes)
    return record, accepted


# ---------------------------------------------------------------------------
# record export
# ---------------------------------------------------------------------------

def attack_records_to_csv(records, stream, header_comment: str | None = None) -> None:
    if header_comment:
        stream.write(f"# {header_comment}\n")
    stream.write("index,true_class,target_class,success,l2_distortion,modified_pixels,iterations\n")
    for i, r in enumerate(records):
        stream.write(
            f"{i},{r.true_class},{r.target_class},{int(r.success)},"
            f"{r.l2_distortion:.12g},{r.modified_pixels},{r.iterations}\n"
        )


def save_attack_images(records, prefix: str) -> None:
    """IDX-f32 dumps of the original/perturbed image stacks."""
    originals = np.stack([r.original for r in records])
    perturbed = np.stack([r.perturbed for r in records])
    with open(prefix + "_original.idx", "wb") as f:
        write_idx_f32(originals, f)
    with open(prefix + "_perturbed.idx", "wb") as f:
        write_idx_f32(perturbed, f)

"""Training objectives: weighted multi-head cross-entropy, the next-action
contrastive loss (sampled softmax over one positive and N negatives), sample
selection with in-batch or impression-based negatives, and their analytic
gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import POSITIVE_MASK, UserSequences, ValidationError, l2_normalize_rows, unit_embeddings
from .dataset import HEAD_NAMES
from .nnsearch import AssembledSequence

PROB_EPS = 1e-7

NEGATIVE_MODES = ("impression", "in_batch")
NAL_LOSS_TYPES = ("sampled_softmax", "cross_entropy")


@dataclass(frozen=True)
class HeadConfig:
    """Ordered prediction heads with per-head CE weights and the utility
    weights of the final linear ranking score."""

    names: tuple[str, ...] = HEAD_NAMES
    ce_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    utility_weights: tuple[float, ...] = (1.0, 0.5, 0.25, -2.0)

    def validate(self) -> None:
        if not (len(self.names) == len(self.ce_weights) == len(self.utility_weights)):
            raise ValidationError("head weight lengths must match head names")
        weights = self.ce_weights + self.utility_weights
        if not all(np.isfinite(w) for w in weights):
            raise ValidationError("head weights must be finite")

    def index(self, head: str) -> int:
        return self.names.index(head)


@dataclass(frozen=True)
class NALConfig:
    weight: float = 0.01
    num_negatives: int = 16
    negative_mode: str = "impression"
    loss_type: str = "sampled_softmax"

    def validate(self) -> None:
        if not (np.isfinite(self.weight) and self.weight >= 0):
            raise ValidationError("NAL weight must be finite and non-negative")
        if self.num_negatives < 1:
            raise ValidationError("need at least one negative per positive")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ValidationError(f"unknown negative mode {self.negative_mode!r}")
        if self.loss_type not in NAL_LOSS_TYPES:
            raise ValidationError(f"unknown NAL loss type {self.loss_type!r}")


# ---------------------------------------------------------------------------
# Weighted multi-head cross-entropy
# ---------------------------------------------------------------------------


def weighted_ce(probs: np.ndarray, labels: np.ndarray, cfg: HeadConfig) -> float:
    """Per-head weighted binary cross-entropy, summed over heads.

    Probabilities are clamped to [eps, 1-eps] so saturated predictions stay
    finite.
    """
    p = np.clip(np.asarray(probs, np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, np.float64)
    w = np.asarray(cfg.ce_weights, np.float64)
    return float(-np.sum(w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def weighted_ce_grad(probs: np.ndarray, labels: np.ndarray, cfg: HeadConfig) -> np.ndarray:
    """d(weighted_ce)/d(probs); zero where the clamp is active."""
    probs = np.asarray(probs, np.float64)
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, np.float64)
    w = np.asarray(cfg.ce_weights, np.float64)
    grad = w * (-y / p + (1.0 - y) / (1.0 - p))
    inside = (probs > PROB_EPS) & (probs < 1.0 - PROB_EPS)
    return np.where(inside, grad, 0.0)


# ---------------------------------------------------------------------------
# Sampled softmax
# ---------------------------------------------------------------------------


def _nal_logits(u_t: np.ndarray, pos: np.ndarray, negs: np.ndarray, proj: np.ndarray):
    v = np.asarray(u_t, np.float64) @ np.asarray(proj, np.float64)
    targets = l2_normalize_rows(np.vstack([pos, negs]).astype(np.float32)).astype(np.float64)
    return v, targets, targets @ v


def sampled_softmax(u_t: np.ndarray, pos: np.ndarray, negs: np.ndarray, proj: np.ndarray) -> float:
    """-log softmax of the positive among one positive and N negatives.

    Inner products are taken between the projected user state and the
    L2-normalized embeddings; the log-sum-exp is computed stably.
    """
    if len(negs) < 1:
        raise ValidationError("sampled softmax needs at least one negative")
    _, _, logits = _nal_logits(u_t, pos, negs, proj)
    m = logits.max()
    lse = m + np.log(np.sum(np.exp(logits - m)))
    return float(lse - logits[0])


def sampled_softmax_grad(
    u_t: np.ndarray, pos: np.ndarray, negs: np.ndarray, proj: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (d/du_t, d/dproj) of :func:`sampled_softmax`."""
    v, targets, logits = _nal_logits(u_t, pos, negs, proj)
    m = logits.max()
    soft = np.exp(logits - m)
    soft /= soft.sum()
    dlogits = soft.copy()
    dlogits[0] -= 1.0
    dv = dlogits @ targets
    du = np.asarray(proj, np.float64) @ dv
    dproj = np.outer(np.asarray(u_t, np.float64), dv)
    return du, dproj


def _binary_ce_terms(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-positive binary CE over the (positive, negatives) logit vector,
    used for the cross-entropy NAL ablation. Returns (loss, dlogits)."""
    sig = 1.0 / (1.0 + np.exp(-logits))
    p = np.clip(sig, PROB_EPS, 1.0 - PROB_EPS)
    y = np.zeros_like(logits)
    y[0] = 1.0
    loss = float(-np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    inside = (sig > PROB_EPS) & (sig < 1.0 - PROB_EPS)
    dlogits = np.where(inside, sig - y, 0.0)
    return loss, dlogits


def nal_term(
    u_t: np.ndarray, pos: np.ndarray, negs: np.ndarray, proj: np.ndarray, loss_type: str
) -> tuple[float, np.ndarray, np.ndarray]:
    """One positive's NAL contribution and its (du, dproj) gradients."""
    if loss_type == "sampled_softmax":
        loss = sampled_softmax(u_t, pos, negs, proj)
        du, dproj = sampled_softmax_grad(u_t, pos, negs, proj)
        return loss, du, dproj
    v, targets, logits = _nal_logits(u_t, pos, negs, proj)
    loss, dlogits = _binary_ce_terms(logits)
    dv = dlogits @ targets
    du = np.asarray(proj, np.float64) @ dv
    dproj = np.outer(np.asarray(u_t, np.float64), dv)
    return loss, du, dproj


# ---------------------------------------------------------------------------
# Positive / negative sample selection
# ---------------------------------------------------------------------------


@dataclass
class NALSample:
    """One next-action prediction: the user state at `predictor_pos` should
    score `target` above every row of `negatives`."""

    item: int
    predictor_pos: int
    target: np.ndarray  # unit float32 (E,)
    negatives: np.ndarray  # unit float32 (N, E)


@dataclass
class SelectionStats:
    positives: int = 0
    skipped_no_predictor: int = 0
    skipped_no_negatives: int = 0
    in_batch_fallbacks: int = 0
    impression_fallbacks: int = 0


def _draw_rows(block_len: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(block_len, size=n, replace=block_len < n)


def select_samples(
    assembled: list[AssembledSequence],
    users: list[UserSequences],
    mode: str,
    num_negatives: int,
    rng: np.random.Generator,
) -> tuple[list[NALSample], SelectionStats]:
    """Pick NAL positives and negatives for a batch.

    Positives are the recent real-time tokens carrying a positive engagement
    bit, each predicted from the user state one position earlier in that
    segment; the segment's first token has no predictor and is skipped.
    Negatives are drawn once per batch item: from the user's impressions
    (without replacement when possible) or from a random other user's
    real-time sequence. Either mode falls back to the other when its source
    is empty; with a single-item batch, in-batch mode falls back to
    impressions and the fallback is counted.
    """
    if mode not in NEGATIVE_MODES:
        raise ValidationError(f"unknown negative mode {mode!r}")
    stats = SelectionStats()
    samples: list[NALSample] = []

    for i, (seq, user) in enumerate(zip(assembled, users)):
        seg = seq.segment("recent_realtime")
        positives = []
        for j in range(seg.valid):
            pos = seg.start + j
            if not (int(seq.block.actions[pos]) & POSITIVE_MASK):
                continue
            if j == 0:
                stats.skipped_no_predictor += 1
                continue
            positives.append(pos)
        if not positives:
            continue

        negatives = _negatives_for_item(i, users, mode, num_negatives, rng, stats)
        if negatives is None:
            stats.skipped_no_negatives += len(positives)
            continue

        for pos in positives:
            target = unit_embeddings(seq.block.embeddings[pos][None, :])[0]
            samples.append(NALSample(i, pos - 1, target, negatives))
            stats.positives += 1

    return samples, stats


def _negatives_for_item(
    i: int,
    users: list[UserSequences],
    mode: str,
    n: int,
    rng: np.random.Generator,
    stats: SelectionStats,
) -> np.ndarray | None:
    imp = users[i].impression
    if mode == "in_batch" and len(users) == 1:
        stats.in_batch_fallbacks += 1
        mode = "impression"
    if mode == "impression" and len(imp) == 0:
        if len(users) == 1:
            return None
        stats.impression_fallbacks += 1
        mode = "in_batch"

    if mode == "impression":
        rows = _draw_rows(len(imp), n, rng)
        return unit_embeddings(imp.embeddings[rows])

    others = [j for j in range(len(users)) if j != i and len(users[j].realtime)]
    if not others:
        return None
    donor = users[others[int(rng.integers(len(others)))]]
    rows = _draw_rows(len(donor.realtime), n, rng)
    return unit_embeddings(donor.realtime.embeddings[rows])


# ---------------------------------------------------------------------------
# Batch-level NAL and the combined objective
# ---------------------------------------------------------------------------


def nal_loss(
    u: np.ndarray,
    samples: list[NALSample],
    proj: np.ndarray,
    cfg: NALConfig,
) -> float:
    """Mean per-positive NAL term over a batch; 0 with no positives.

    `u` is the (batch, seq_len, d_model) transformer output.
    """
    cfg.validate()
    if not samples:
        return 0.0
    total = 0.0
    for s in samples:
        u_t = u[s.item, s.predictor_pos]
        if cfg.loss_type == "sampled_softmax":
            total += sampled_softmax(u_t, s.target, s.negatives, proj)
        else:
            _, _, logits = _nal_logits(u_t, s.target, s.negatives, proj)
            total += _binary_ce_terms(logits)[0]
    return total / len(samples)


def total_loss(ce: float, nal: float, cfg: NALConfig) -> float:
    """Combined objective: ce + weight * nal."""
    cfg.validate()
    return float(ce) + cfg.weight * float(nal)

"""Candidate-anchored top-K inner-product search over user sequences, the
four-segment sequence assembly, and the de-duplicated request batch format
with its fused dequantize+normalize+search path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    EMBED_DIM,
    QUANT_MAX,
    QUANT_SCALE,
    TokenBlock,
    UserSequences,
    ValidationError,
    l2_normalize_rows,
    unit_embeddings,
)

SEGMENT_NAMES = ("nn_lifelong", "recent_realtime", "nn_realtime_tail", "nn_impression")


@dataclass(frozen=True)
class NNConfig:
    """Segment budget for assembly: recent real-time slots kept verbatim plus
    top-K slots per searched source. Lengths sum to the model sequence length."""

    recent: int = 32
    k_lifelong: int = 96
    k_realtime: int = 32
    k_impression: int = 32

    @property
    def seq_len(self) -> int:
        return self.recent + self.k_lifelong + self.k_realtime + self.k_impression

    def segment_lengths(self) -> tuple[int, int, int, int]:
        return (self.k_lifelong, self.recent, self.k_realtime, self.k_impression)

    def validate(self) -> None:
        if min(self.recent, self.k_lifelong, self.k_realtime, self.k_impression) < 0:
            raise ValidationError("segment lengths must be non-negative")
        if self.seq_len == 0:
            raise ValidationError("assembled sequence length must be positive")


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    stop: int
    valid: int  # number of real (unmasked) tokens at the front of the span


@dataclass
class AssembledSequence:
    """Fixed-length model input: padded token block, validity mask, and the
    per-segment spans recording which source each slice came from."""

    block: TokenBlock
    mask: np.ndarray  # bool (seq_len,)
    segments: tuple[Segment, ...]

    def __len__(self) -> int:
        return len(self.block)

    def segment(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def equals(self, other: "AssembledSequence") -> bool:
        return (
            self.block.equals(other.block)
            and np.array_equal(self.mask, other.mask)
            and self.segments == other.segments
        )


def similarity_scores(block: TokenBlock, candidate: np.ndarray) -> np.ndarray:
    """Dot products between unit-normalized dequantized token embeddings and
    the unit-normalized candidate. Accumulated in float64 so that rankings do
    not depend on BLAS summation order."""
    if len(block) == 0:
        return np.zeros(0, dtype=np.float64)
    unit_c = l2_normalize_rows(np.asarray(candidate, dtype=np.float32)[None, :])[0]
    return unit_embeddings(block.embeddings).astype(np.float64) @ unit_c.astype(np.float64)


def top_k_nn(
    block: TokenBlock,
    candidate: np.ndarray,
    k: int,
    return_scores: bool = False,
):
    """Indices of the k highest-similarity tokens, best first.

    Ties go to the smaller sequence index (the more recent token, given the
    newest-first storage order). Returns all indices when the sequence is
    shorter than k.
    """
    if k < 0:
        raise ValidationError("k must be non-negative")
    scores = similarity_scores(block, candidate)
    order = np.argsort(-scores, kind="stable")[:k]
    if return_scores:
        return order, scores[order]
    return order


def _nn_segment_indices(dots: np.ndarray, k: int) -> np.ndarray:
    """Top-k by score then reordered to ascending timestamp (descending
    storage index), the order segments occupy in the assembled sequence."""
    picked = np.argsort(-dots, kind="stable")[:k]
    return np.sort(picked)[::-1]


def assemble(user: UserSequences, candidate: np.ndarray, cfg: NNConfig) -> AssembledSequence:
    """Build the model input sequence for one (user, candidate) pair.

    Segment order: NN over lifelong, the most recent `recent` real-time
    actions, NN over the remaining real-time tail, NN over impressions.
    Each segment holds its tokens in ascending-timestamp order with any
    deficit zero-padded and masked out.
    """
    cfg.validate()
    candidate = np.asarray(candidate, dtype=np.float32)
    rt = user.realtime
    n_recent = min(cfg.recent, len(rt))
    rt_tail = rt.take(np.arange(cfg.recent, len(rt))) if len(rt) > cfg.recent else None

    picks: list[tuple[TokenBlock, np.ndarray]] = []
    for name, source, k in (
        ("nn_lifelong", user.lifelong, cfg.k_lifelong),
        ("recent_realtime", None, cfg.recent),
        ("nn_realtime_tail", rt_tail, cfg.k_realtime),
        ("nn_impression", user.impression, cfg.k_impression),
    ):
        if name == "recent_realtime":
            # Most recent r actions, reversed into ascending-timestamp order.
            picks.append((rt, np.arange(n_recent - 1, -1, -1)))
        elif source is None or len(source) == 0 or k == 0:
            picks.append((source or TokenBlock.empty(), np.zeros(0, np.intp)))
        else:
            dots = similarity_scores(source, candidate)
            picks.append((source, _nn_segment_indices(dots, k)))
    return _layout(picks, cfg, len(candidate))


def _layout(
    picks: list[tuple[TokenBlock, np.ndarray]], cfg: NNConfig, embed_dim: int
) -> AssembledSequence:
    """Place per-segment token selections into the fixed padded layout."""
    length = cfg.seq_len
    timestamps = np.zeros(length, np.uint32)
    actions = np.zeros(length, np.uint16)
    surfaces = np.zeros(length, np.uint8)
    embeddings = np.zeros((length, embed_dim), np.int8)
    mask = np.zeros(length, bool)

    segments = []
    start = 0
    for name, seg_len, (block, idx) in zip(SEGMENT_NAMES, cfg.segment_lengths(), picks):
        valid = len(idx)
        if valid:
            sel = block.take(idx)
            timestamps[start : start + valid] = sel.timestamps
            actions[start : start + valid] = sel.actions
            surfaces[start : start + valid] = sel.surfaces
            embeddings[start : start + valid] = sel.embeddings
            mask[start : start + valid] = True
        segments.append(Segment(name, start, start + seg_len, valid))
        start += seg_len

    return AssembledSequence(
        TokenBlock(timestamps, actions, surfaces, embeddings), mask, tuple(segments)
    )


# ---------------------------------------------------------------------------
# De-duplicated request batches
# ---------------------------------------------------------------------------


@dataclass
class DedupBatch:
    """Request-level sequence features stored once, with per-item offsets.

    `users[offsets[i]]` is the sequence block for item i; candidates and ids
    stay item-wise. Replaces broadcasting the sequences to every item.
    """

    users: list[UserSequences]
    offsets: np.ndarray  # (n_items,) int32
    candidates: np.ndarray  # (n_items, E) float32
    item_ids: np.ndarray  # (n_items,) uint64

    def __len__(self) -> int:
        return len(self.offsets)

    def validate(self) -> None:
        n = len(self.offsets)
        if not (len(self.candidates) == len(self.item_ids) == n):
            raise ValidationError("item columns disagree on length")
        if n and (self.offsets.min() < 0 or self.offsets.max() >= len(self.users)):
            raise ValidationError("offset out of range")
        if len(np.unique(self.offsets)) != len(self.users):
            raise ValidationError("every unique request must be referenced")


def build_dedup_batch(
    requests: list[tuple[UserSequences, np.ndarray, np.ndarray | None]],
) -> DedupBatch:
    """Collapse (user, candidates) requests into the sparse offset format.

    Item order within and across requests is preserved.
    """
    if not requests:
        raise ValidationError("at least one request required")
    users: list[UserSequences] = []
    offsets: list[int] = []
    cands: list[np.ndarray] = []
    ids: list[np.ndarray] = []
    for user, candidates, item_ids in requests:
        candidates = np.asarray(candidates, dtype=np.float32)
        if candidates.ndim != 2 or len(candidates) == 0:
            raise ValidationError("each request needs a non-empty (M, E) candidate array")
        if item_ids is None:
            item_ids = np.arange(len(candidates), dtype=np.uint64)
        users.append(user)
        offsets.extend([len(users) - 1] * len(candidates))
        cands.append(candidates)
        ids.append(np.asarray(item_ids, dtype=np.uint64))
    batch = DedupBatch(
        users,
        np.asarray(offsets, dtype=np.int32),
        np.concatenate(cands),
        np.concatenate(ids),
    )
    batch.validate()
    return batch


def sequence_feature_bytes(user: UserSequences, embed_dim: int = EMBED_DIM) -> int:
    """Wire size of one request's sequence features (packed token bytes)."""
    return user.total_tokens() * (7 + embed_dim)


def dedup_sequence_bytes(batch: DedupBatch) -> int:
    """Sequence-feature bytes staged under the de-duplicated layout."""
    return sum(sequence_feature_bytes(u) for u in batch.users)


def broadcast_sequence_bytes(batch: DedupBatch) -> int:
    """Sequence-feature bytes a per-item broadcast layout would stage."""
    per_user = [sequence_feature_bytes(u) for u in batch.users]
    return int(sum(per_user[o] for o in batch.offsets))


# ---------------------------------------------------------------------------
# Fused dequantize + normalize + NN assembly over a dedup batch
# ---------------------------------------------------------------------------


def _scratch(arena, shape: tuple[int, ...], dtype) -> np.ndarray:
    if arena is None:
        return np.empty(shape, dtype)
    return arena.take(shape, dtype)


def _unit_rows_into(quantized: np.ndarray, out: np.ndarray, norms: np.ndarray, zero: np.ndarray):
    """Fused dequantize + row normalize, written into preallocated buffers.

    Performs the same float32 operations as dequantize followed by row-wise
    L2 normalization, so results are bit-identical to the unfused path.
    """
    np.divide(quantized, np.float32(QUANT_MAX), out=out)
    np.multiply(out, np.float32(QUANT_SCALE), out=out)
    np.einsum("ij,ij->i", out, out, out=norms, dtype=np.float32)
    np.sqrt(norms, out=norms)
    np.equal(norms, 0.0, out=zero)
    np.copyto(norms, np.float32(1.0), where=zero)
    np.divide(out, norms[:, None], out=out)


def fused_assemble(
    batch: DedupBatch,
    cfg: NNConfig,
    arena=None,
    return_scores: bool = False,
):
    """Assemble one sequence per batch item without broadcasting requests.

    Each unique request's sequences are dequantized and normalized once in a
    single fused pass, then scored against all of that request's candidates
    in one float64 product per source. Output matches :func:`assemble` run
    item-wise on the broadcast path, token for token.
    """
    cfg.validate()
    batch.validate()
    out: list[AssembledSequence | None] = [None] * len(batch)
    scores: list[dict[str, np.ndarray]] = [dict() for _ in range(len(batch))]

    for req_idx, user in enumerate(batch.users):
        item_rows = np.nonzero(batch.offsets == req_idx)[0]
        cand = batch.candidates[item_rows]
        m = len(item_rows)
        embed_dim = cand.shape[1]

        unit_c = _scratch(arena, (m, embed_dim), np.float32)
        cnorm = _scratch(arena, (m,), np.float32)
        czero = _scratch(arena, (m,), bool)
        np.copyto(unit_c, cand)
        np.einsum("ij,ij->i", unit_c, unit_c, out=cnorm, dtype=np.float32)
        np.sqrt(cnorm, out=cnorm)
        np.equal(cnorm, 0.0, out=czero)
        np.copyto(cnorm, np.float32(1.0), where=czero)
        np.divide(unit_c, cnorm[:, None], out=unit_c)
        cand64 = _scratch(arena, (embed_dim, m), np.float64)
        cand64[...] = unit_c.T

        rt = user.realtime
        n_recent = min(cfg.recent, len(rt))
        rt_tail = rt.take(np.arange(cfg.recent, len(rt))) if len(rt) > cfg.recent else None

        sources = {
            "nn_lifelong": (user.lifelong, cfg.k_lifelong),
            "nn_realtime_tail": (rt_tail, cfg.k_realtime),
            "nn_impression": (user.impression, cfg.k_impression),
        }
        seg_dots: dict[str, np.ndarray | None] = {}
        for name, (source, k) in sources.items():
            if source is None or len(source) == 0 or k == 0:
                seg_dots[name] = None
                continue
            n = len(source)
            unit = _scratch(arena, (n, embed_dim), np.float32)
            norms = _scratch(arena, (n,), np.float32)
            zero = _scratch(arena, (n,), bool)
            _unit_rows_into(source.embeddings, unit, norms, zero)
            unit64 = _scratch(arena, (n, embed_dim), np.float64)
            unit64[...] = unit
            dots = _scratch(arena, (n, m), np.float64)
            np.matmul(unit64, cand64, out=dots)
            seg_dots[name] = dots

        for col, item_row in enumerate(item_rows):
            picks = []
            for name, seg_len in zip(SEGMENT_NAMES, cfg.segment_lengths()):
                if name == "recent_realtime":
                    picks.append((rt, np.arange(n_recent - 1, -1, -1)))
                    continue
                source, k = sources[name]
                dots = seg_dots[name]
                if dots is None:
                    picks.append((source or TokenBlock.empty(), np.zeros(0, np.intp)))
                    continue
                picked = np.argsort(-dots[:, col], kind="stable")[:k]
                if return_scores:
                    scores[item_row][name] = dots[picked, col].copy()
                picks.append((source, np.sort(picked)[::-1]))
            out[item_row] = _layout(picks, cfg, embed_dim)

    if return_scores:
        return out, scores
    return out

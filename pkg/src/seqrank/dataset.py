"""Bit-exact binary formats for sequence stores (`.tav2`) and training
examples (`.tex2`), plus a synthetic data generator that plants per-user
interest clusters so desk-scale models have real structure to learn.

See FORMATS.md for hex-annotated layout examples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    CLICK,
    CLOSEUP,
    EMBED_DIM,
    HIDE,
    IMPRESSION,
    REPIN,
    TokenBlock,
    UserSequences,
    ValidationError,
    l2_normalize,
    quantize,
)
from .nnsearch import AssembledSequence, Segment, SEGMENT_NAMES

STORE_MAGIC = b"TAV2"
EXAMPLES_MAGIC = b"TEX2"
FORMAT_VERSION = 1

HEAD_NAMES = ("repin", "click", "closeup", "hide")
HEAD_BITS = (REPIN, CLICK, CLOSEUP, HIDE)
NUM_HEADS = len(HEAD_NAMES)

_FILE_HEADER = struct.Struct("<4sHQ")  # magic, version, record count
_USER_HEADER = struct.Struct("<QHHH")  # user id, ll/rt/imp lengths
_EXAMPLE_FIXED = struct.Struct("<QQ")  # user id, chunk id


class FormatError(ValueError):
    """Raised on malformed store or example files; messages carry the byte
    offset where decoding failed."""


def _token_dtype(embed_dim: int) -> np.dtype:
    return np.dtype(
        [("ts", "<u4"), ("action", "<u2"), ("surface", "u1"), ("emb", "i1", (embed_dim,))]
    )


def token_wire_bytes(embed_dim: int = EMBED_DIM) -> int:
    """Packed size of one token on the wire: u32 + u16 + u8 + embed_dim i8."""
    return 7 + embed_dim


def pack_token_block(block: TokenBlock) -> bytes:
    packed = np.empty(len(block), dtype=_token_dtype(block.embed_dim))
    packed["ts"] = block.timestamps
    packed["action"] = block.actions
    packed["surface"] = block.surfaces
    packed["emb"] = block.embeddings
    return packed.tobytes()


def unpack_token_block(
    buf: bytes, offset: int, count: int, embed_dim: int = EMBED_DIM
) -> tuple[TokenBlock, int]:
    dtype = _token_dtype(embed_dim)
    end = offset + count * dtype.itemsize
    if end > len(buf):
        raise FormatError(f"token block truncated at byte {len(buf)} (need {end})")
    packed = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    block = TokenBlock(
        packed["ts"].copy(),
        packed["action"].copy(),
        packed["surface"].copy(),
        packed["emb"].copy(),
    )
    return block, end


# ---------------------------------------------------------------------------
# Sequence store (.tav2)
# ---------------------------------------------------------------------------


def write_store(path: str | Path, users: list[tuple[int, UserSequences]]) -> None:
    """Write user sequences to a `.tav2` store; validates every record."""
    with open(path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(STORE_MAGIC, FORMAT_VERSION, len(users)))
        for user_id, seqs in users:
            seqs.validate()
            fh.write(
                _USER_HEADER.pack(
                    user_id, len(seqs.lifelong), len(seqs.realtime), len(seqs.impression)
                )
            )
            fh.write(pack_token_block(seqs.lifelong))
            fh.write(pack_token_block(seqs.realtime))
            fh.write(pack_token_block(seqs.impression))


def read_store(path: str | Path) -> list[tuple[int, UserSequences]]:
    """Read a `.tav2` store back into (user_id, UserSequences) pairs."""
    buf = Path(path).read_bytes()
    if len(buf) < _FILE_HEADER.size:
        raise FormatError(f"store header truncated at byte {len(buf)}")
    magic, version, count = _FILE_HEADER.unpack_from(buf, 0)
    if magic != STORE_MAGIC:
        raise FormatError(f"bad store magic {magic!r} at byte 0")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported store version {version} at byte 4")

    users = []
    pos = _FILE_HEADER.size
    for _ in range(count):
        if pos + _USER_HEADER.size > len(buf):
            raise FormatError(f"user record truncated at byte {pos}")
        user_id, n_ll, n_rt, n_imp = _USER_HEADER.unpack_from(buf, pos)
        pos += _USER_HEADER.size
        ll, pos = unpack_token_block(buf, pos, n_ll)
        rt, pos = unpack_token_block(buf, pos, n_rt)
        imp, pos = unpack_token_block(buf, pos, n_imp)
        users.append((user_id, UserSequences(ll, rt, imp)))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes at byte {pos}")
    return users


# ---------------------------------------------------------------------------
# Assembled-sequence block (shared by .tex2 and the NN feature logger)
# ---------------------------------------------------------------------------

_ASSEMBLED_HEADER = struct.Struct("<HBB")  # seq len, embed dim, segment count
_SEGMENT_ENTRY = struct.Struct("<HH")  # configured length, valid count


def pack_assembled(seq: AssembledSequence) -> bytes:
    """Serialize an assembled sequence: segment table plus padded tokens."""
    out = bytearray()
    out += _ASSEMBLED_HEADER.pack(len(seq), seq.block.embed_dim, len(seq.segments))
    for seg in seq.segments:
        out += _SEGMENT_ENTRY.pack(seg.stop - seg.start, seg.valid)
    out += pack_token_block(seq.block)
    return bytes(out)


def unpack_assembled(buf: bytes, offset: int) -> tuple[AssembledSequence, int]:
    if offset + _ASSEMBLED_HEADER.size > len(buf):
        raise FormatError(f"assembled block truncated at byte {offset}")
    length, embed_dim, n_segments, = _ASSEMBLED_HEADER.unpack_from(buf, offset)
    pos = offset + _ASSEMBLED_HEADER.size
    segments = []
    start = 0
    for i in range(n_segments):
        seg_len, valid = _SEGMENT_ENTRY.unpack_from(buf, pos)
        pos += _SEGMENT_ENTRY.size
        name = SEGMENT_NAMES[i] if i < len(SEGMENT_NAMES) else f"segment_{i}"
        segments.append(Segment(name, start, start + seg_len, valid))
        start += seg_len
    if start != length:
        raise FormatError(f"segment lengths sum to {start}, expected {length}, at byte {offset}")
    block, pos = unpack_token_block(buf, pos, length, embed_dim)
    mask = np.zeros(length, bool)
    for seg in segments:
        mask[seg.start : seg.start + seg.valid] = True
    return AssembledSequence(block, mask, tuple(segments)), pos


# ---------------------------------------------------------------------------
# Training examples (.tex2)
# ---------------------------------------------------------------------------


@dataclass
class TrainingExample:
    """One labeled (user, candidate) pair, optionally carrying the
    pre-computed assembled sequence from the serving-path NN search."""

    user_id: int
    chunk_id: int
    candidate: np.ndarray  # float32 (E,)
    labels: np.ndarray  # uint8 (NUM_HEADS,), values in {0, 1}
    nn_features: AssembledSequence | None = None

    def validate(self) -> None:
        if self.labels.shape != (NUM_HEADS,) or np.any(self.labels > 1):
            raise ValidationError("labels must be one {0,1} byte per head")

    def equals(self, other: "TrainingExample") -> bool:
        if (self.nn_features is None) != (other.nn_features is None):
            return False
        nn_equal = self.nn_features is None or self.nn_features.equals(other.nn_features)
        return (
            self.user_id == other.user_id
            and self.chunk_id == other.chunk_id
            and np.array_equal(self.candidate, other.candidate)
            and np.array_equal(self.labels, other.labels)
            and nn_equal
        )


def write_examples(path: str | Path, examples: list[TrainingExample]) -> None:
    with open(path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(EXAMPLES_MAGIC, FORMAT_VERSION, len(examples)))
        for ex in examples:
            ex.validate()
            fh.write(_EXAMPLE_FIXED.pack(ex.user_id, ex.chunk_id))
            fh.write(np.ascontiguousarray(ex.candidate, dtype="<f4").tobytes())
            fh.write(ex.labels.astype(np.uint8).tobytes())
            if ex.nn_features is None:
                fh.write(b"\x00")
            else:
                fh.write(b"\x01")
                fh.write(pack_assembled(ex.nn_features))


def read_examples(path: str | Path, embed_dim: int = EMBED_DIM) -> list[TrainingExample]:
    buf = Path(path).read_bytes()
    if len(buf) < _FILE_HEADER.size:
        raise FormatError(f"examples header truncated at byte {len(buf)}")
    magic, version, count = _FILE_HEADER.unpack_from(buf, 0)
    if magic != EXAMPLES_MAGIC:
        raise FormatError(f"bad examples magic {magic!r} at byte 0")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported examples version {version} at byte 4")

    examples = []
    pos = _FILE_HEADER.size
    cand_bytes = 4 * embed_dim
    for _ in range(count):
        fixed_end = pos + _EXAMPLE_FIXED.size + cand_bytes + NUM_HEADS + 1
        if fixed_end > len(buf):
            raise FormatError(f"example record truncated at byte {pos}")
        user_id, chunk_id = _EXAMPLE_FIXED.unpack_from(buf, pos)
        pos += _EXAMPLE_FIXED.size
        candidate = np.frombuffer(buf, "<f4", embed_dim, pos).copy()
        pos += cand_bytes
        labels = np.frombuffer(buf, np.uint8, NUM_HEADS, pos).copy()
        pos += NUM_HEADS
        flag = buf[pos]
        pos += 1
        nn_features = None
        if flag:
            nn_features, pos = unpack_assembled(buf, pos)
        examples.append(TrainingExample(user_id, chunk_id, candidate, labels, nn_features))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes at byte {pos}")
    return examples


_SEQS_HEADER = struct.Struct("<HHH")  # ll/rt/imp lengths


def pack_user_sequences(seqs: UserSequences) -> bytes:
    """Pack one user's three sequences (the `.tav2` record without its id)."""
    return (
        _SEQS_HEADER.pack(len(seqs.lifelong), len(seqs.realtime), len(seqs.impression))
        + pack_token_block(seqs.lifelong)
        + pack_token_block(seqs.realtime)
        + pack_token_block(seqs.impression)
    )


def unpack_user_sequences(buf: bytes) -> UserSequences:
    if len(buf) < _SEQS_HEADER.size:
        raise FormatError(f"sequence payload truncated at byte {len(buf)}")
    n_ll, n_rt, n_imp = _SEQS_HEADER.unpack_from(buf, 0)
    pos = _SEQS_HEADER.size
    ll, pos = unpack_token_block(buf, pos, n_ll)
    rt, pos = unpack_token_block(buf, pos, n_rt)
    imp, pos = unpack_token_block(buf, pos, n_imp)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes at byte {pos}")
    return UserSequences(ll, rt, imp)


def context_features(user_id: int, dim: int = 8) -> np.ndarray:
    """Deterministic synthetic context scalars in [-1, 1] for a user.

    Stand-in for request context (time of day and similar); derived from the
    user id so training and serving agree without extra plumbing.
    """
    rng = np.random.default_rng([int(user_id), 96321])
    return rng.uniform(-1.0, 1.0, dim).astype(np.float32)


# ---------------------------------------------------------------------------
# Synthetic data with planted user interests
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    num_users: int = 100
    num_clusters: int = 8
    ll_tokens: int = 128
    rt_tokens: int = 48
    imp_tokens: int = 48
    positive_rate: float = 0.9
    hide_rate: float = 0.9
    chunks_per_user: int = 2
    chunk_size: int = 8
    seed: int = 0

    def validate(self) -> None:
        counts = (
            self.num_users,
            self.num_clusters,
            self.ll_tokens,
            self.rt_tokens,
            self.imp_tokens,
            self.chunks_per_user,
            self.chunk_size,
        )
        if min(counts) < 1:
            raise ValidationError("all synthetic counts must be >= 1")
        for rate in (self.positive_rate, self.hide_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValidationError("rates must lie in [0, 1]")


@dataclass
class SyntheticData:
    users: list[tuple[int, UserSequences]]
    examples: list[TrainingExample]
    centroids: np.ndarray  # (num_clusters, EMBED_DIM) unit rows


_LL_BASE_TS = 1_700_000_000
_RT_BASE_TS = 1_750_000_000


def _noisy(rng: np.random.Generator, centroid: np.ndarray, sigma: float = 0.08) -> np.ndarray:
    return l2_normalize(centroid + rng.normal(0.0, sigma, EMBED_DIM).astype(np.float32))


def _positive_action(rng: np.random.Generator) -> int:
    action = int(rng.choice((REPIN, CLICK, CLOSEUP)))
    if rng.random() < 0.1:  # occasional multi-hot pair (view then save)
        action |= int(rng.choice((REPIN, CLOSEUP)))
    return action


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticData:
    """Generate users, sequences, and labeled candidate chunks.

    Each user follows 1-3 interest clusters. Engaged tokens sit near those
    clusters; hide tokens and most impressions sit near other clusters.
    Candidates near a user's cluster are repin-prone, candidates near a
    foreign cluster are hide-prone, so candidate embeddings alone carry no
    label signal; only the user's history disambiguates.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    centroids = rng.normal(0.0, 1.0, (cfg.num_clusters, EMBED_DIM)).astype(np.float32)
    centroids = np.stack([l2_normalize(c) for c in centroids])

    users = []
    examples = []
    chunk_counter = 0
    for uid in range(1, cfg.num_users + 1):
        n_interests = int(rng.integers(1, min(3, cfg.num_clusters) + 1))
        interests = rng.choice(cfg.num_clusters, n_interests, replace=False)
        foreign = np.setdiff1d(np.arange(cfg.num_clusters), interests)

        def near() -> np.ndarray:
            return _noisy(rng, centroids[int(rng.choice(interests))])

        def far() -> np.ndarray:
            if len(foreign) == 0:
                return l2_normalize(rng.normal(0.0, 1.0, EMBED_DIM).astype(np.float32))
            return _noisy(rng, centroids[int(rng.choice(foreign))])

        ll = _engagement_block(rng, cfg.ll_tokens, near, far, _LL_BASE_TS, 3600)
        rt = _engagement_block(rng, cfg.rt_tokens, near, far, _RT_BASE_TS, 60)
        imp = _impression_block(rng, cfg.imp_tokens, near, far)
        seqs = UserSequences(ll, rt, imp)
        seqs.validate()
        users.append((uid, seqs))

        for _ in range(cfg.chunks_per_user):
            chunk_counter += 1
            for _ in range(cfg.chunk_size):
                labels = np.zeros(NUM_HEADS, np.uint8)
                if rng.random() < 0.5:
                    emb = near()
                    labels[0] = rng.random() < cfg.positive_rate
                    labels[1] = rng.random() < cfg.positive_rate * 0.7
                    labels[2] = rng.random() < cfg.positive_rate * 0.5
                else:
                    emb = far()
                    labels[3] = rng.random() < cfg.hide_rate
                examples.append(TrainingExample(uid, chunk_counter, emb, labels))

    return SyntheticData(users, examples, centroids)


def _engagement_block(rng, count, near, far, base_ts, step) -> TokenBlock:
    timestamps = base_ts - np.arange(count, dtype=np.int64) * step
    actions = np.zeros(count, np.uint16)
    surfaces = rng.integers(0, 4, count).astype(np.uint8)
    embeddings = np.zeros((count, EMBED_DIM), np.int8)
    for i in range(count):
        if rng.random() < 0.15:
            actions[i] = HIDE
            embeddings[i] = quantize(far())
        else:
            actions[i] = _positive_action(rng)
            embeddings[i] = quantize(near())
    return TokenBlock(timestamps, actions, surfaces, embeddings)


def _impression_block(rng, count, near, far) -> TokenBlock:
    timestamps = _RT_BASE_TS + 30 - np.arange(count, dtype=np.int64) * 60
    actions = np.full(count, IMPRESSION, np.uint16)
    surfaces = rng.integers(0, 4, count).astype(np.uint8)
    embeddings = np.zeros((count, EMBED_DIM), np.int8)
    for i in range(count):
        source = far if rng.random() < 0.75 else near
        embeddings[i] = quantize(source())
    return TokenBlock(timestamps, actions, surfaces, embeddings)

"""Domain types shared by every stage: action tokens, user sequences, and
the int8 embedding codec (quantize / dequantize / L2-normalize)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EMBED_DIM = 32
QUANT_SCALE = 0.65
QUANT_MAX = 127

# Action bitmask positions (bits 5-15 reserved).
REPIN = 1 << 0
CLICK = 1 << 1
CLOSEUP = 1 << 2
HIDE = 1 << 3
IMPRESSION = 1 << 4

ENGAGEMENT_MASK = REPIN | CLICK | CLOSEUP | HIDE
POSITIVE_MASK = REPIN | CLICK | CLOSEUP
ACTION_BITS = 16

# Surface ids; anything unknown is folded into OTHER downstream.
SURFACE_HOMEFEED = 0
SURFACE_SEARCH = 1
SURFACE_RELATED = 2
SURFACE_OTHER = 3

LIFELONG_CAP = 16384
REALTIME_CAP = 256
IMPRESSION_CAP = 256


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant."""


def quantize(e: np.ndarray) -> np.ndarray:
    """Quantize real embedding components to int8 in [-127, 127].

    Per component: clamp(round_half_away_from_zero(e / 0.65 * 127), -127, 127).
    -128 is never produced, keeping the range symmetric.
    """
    e = np.asarray(e, dtype=np.float64)
    if not np.all(np.isfinite(e)):
        raise ValidationError("embedding components must be finite")
    scaled = e / QUANT_SCALE * QUANT_MAX
    rounded = np.copysign(np.floor(np.abs(scaled) + 0.5), scaled)
    return np.clip(rounded, -QUANT_MAX, QUANT_MAX).astype(np.int8)


def dequantize(q: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quantize`: q / 127 * 0.65, as float32."""
    q = np.asarray(q)
    return (q.astype(np.float32) / np.float32(QUANT_MAX)) * np.float32(QUANT_SCALE)


def l2_normalize(e: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm; the zero vector stays zero."""
    e = np.asarray(e, dtype=np.float32)
    norm = float(np.sqrt(np.dot(e, e)))
    if norm == 0.0:
        return e.copy()
    return e / np.float32(norm)


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise :func:`l2_normalize` for a 2-D array; zero rows stay zero."""
    m = np.asarray(m, dtype=np.float32)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m, dtype=np.float32))
    safe = np.where(norms == 0.0, np.float32(1.0), norms)
    return m / safe[:, None]


def unit_embeddings(quantized: np.ndarray) -> np.ndarray:
    """Dequantize an (L, E) int8 block and normalize each row to unit norm."""
    return l2_normalize_rows(dequantize(quantized))


@dataclass(frozen=True, eq=False)
class ActionToken:
    """One user action: when it happened, what it was, where, and the item."""

    timestamp: int
    action: int
    surface: int
    embedding: np.ndarray  # int8, shape (E,)

    def __post_init__(self) -> None:
        if self.timestamp <= 0:
            raise ValidationError("timestamp must be positive")
        if self.action == 0 or self.action >> ACTION_BITS:
            raise ValidationError(f"action bitmask out of range: {self.action:#x}")
        if (self.action & IMPRESSION) and (self.action & ENGAGEMENT_MASK):
            raise ValidationError("impression bit is exclusive with engagement bits")
        if not 0 <= self.surface < 256:
            raise ValidationError(f"surface id out of range: {self.surface}")


class TokenBlock:
    """A sequence of action tokens stored column-wise (struct-of-arrays).

    Columns: timestamps u32, action bitmasks u16, surface ids u8, and
    quantized embeddings i8 of shape (len, embed_dim).
    """

    __slots__ = ("timestamps", "actions", "surfaces", "embeddings")

    def __init__(
        self,
        timestamps: np.ndarray,
        actions: np.ndarray,
        surfaces: np.ndarray,
        embeddings: np.ndarray,
    ) -> None:
        self.timestamps = np.asarray(timestamps, dtype=np.uint32)
        self.actions = np.asarray(actions, dtype=np.uint16)
        self.surfaces = np.asarray(surfaces, dtype=np.uint8)
        self.embeddings = np.asarray(embeddings, dtype=np.int8)
        n = len(self.timestamps)
        if self.embeddings.ndim != 2 or not (
            len(self.actions) == len(self.surfaces) == self.embeddings.shape[0] == n
        ):
            raise ValidationError("token block columns disagree on length")

    @classmethod
    def empty(cls, embed_dim: int = EMBED_DIM) -> "TokenBlock":
        return cls(
            np.zeros(0, np.uint32),
            np.zeros(0, np.uint16),
            np.zeros(0, np.uint8),
            np.zeros((0, embed_dim), np.int8),
        )

    @classmethod
    def from_tokens(cls, tokens: list[ActionToken], embed_dim: int = EMBED_DIM) -> "TokenBlock":
        if not tokens:
            return cls.empty(embed_dim)
        return cls(
            np.array([t.timestamp for t in tokens], np.uint32),
            np.array([t.action for t in tokens], np.uint16),
            np.array([t.surface for t in tokens], np.uint8),
            np.stack([np.asarray(t.embedding, np.int8) for t in tokens]),
        )

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def token(self, i: int) -> ActionToken:
        return ActionToken(
            int(self.timestamps[i]),
            int(self.actions[i]),
            int(self.surfaces[i]),
            self.embeddings[i].copy(),
        )

    def take(self, indices: np.ndarray) -> "TokenBlock":
        idx = np.asarray(indices, dtype=np.intp)
        return TokenBlock(
            self.timestamps[idx],
            self.actions[idx],
            self.surfaces[idx],
            self.embeddings[idx],
        )

    def equals(self, other: "TokenBlock") -> bool:
        return (
            np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.surfaces, other.surfaces)
            and np.array_equal(self.embeddings, other.embeddings)
        )

    def validate(self, *, allow_impressions: bool, impressions_only: bool = False) -> None:
        """Check token-level invariants plus recency ordering (newest first)."""
        n = len(self)
        if n == 0:
            return
        if np.any(self.timestamps == 0):
            raise ValidationError("timestamps must be positive")
        if np.any(self.actions == 0):
            raise ValidationError("every token needs at least one action bit")
        imp = (self.actions & IMPRESSION) != 0
        eng = (self.actions & ENGAGEMENT_MASK) != 0
        if np.any(imp & eng):
            raise ValidationError("impression bit is exclusive with engagement bits")
        if impressions_only:
            if not np.all(imp):
                raise ValidationError("impression sequence may only hold impression tokens")
        elif not allow_impressions and np.any(imp):
            raise ValidationError("engagement sequence may not hold impression-only tokens")
        if np.any(np.diff(self.timestamps.astype(np.int64)) > 0):
            raise ValidationError("tokens must be ordered by timestamp descending")


@dataclass
class UserSequences:
    """Per-user triple of token sequences: lifelong, real-time, impression."""

    lifelong: TokenBlock = field(default_factory=TokenBlock.empty)
    realtime: TokenBlock = field(default_factory=TokenBlock.empty)
    impression: TokenBlock = field(default_factory=TokenBlock.empty)

    def validate(
        self,
        ll_cap: int = LIFELONG_CAP,
        rt_cap: int = REALTIME_CAP,
        imp_cap: int = IMPRESSION_CAP,
    ) -> None:
        for name, block, cap in (
            ("lifelong", self.lifelong, ll_cap),
            ("realtime", self.realtime, rt_cap),
            ("impression", self.impression, imp_cap),
        ):
            if len(block) > cap:
                raise ValidationError(f"{name} sequence exceeds cap {cap}: {len(block)}")
            block.validate(
                allow_impressions=False if name != "impression" else True,
                impressions_only=name == "impression",
            )

    def total_tokens(self) -> int:
        return len(self.lifelong) + len(self.realtime) + len(self.impression)

    def equals(self, other: "UserSequences") -> bool:
        return (
            self.lifelong.equals(other.lifelong)
            and self.realtime.equals(other.realtime)
            and self.impression.equals(other.impression)
        )

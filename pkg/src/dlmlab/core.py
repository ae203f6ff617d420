"""Masked token canvases: vocabulary, sequence state, forward masking, step quotas.

A decode mutates nothing in place: every operation takes a :class:`MaskedState`
and returns a fresh one, so independent decodes can share inputs freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import InfeasibleScheduleError, ProtocolViolationError


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Vocabulary:
    """Dense content token ids ``0..size-1`` plus a reserved mask id.

    The mask id lives outside the content range so posterior arrays can index
    content tokens directly by id.
    """

    size: int
    mask_id: int | None = None
    token_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary needs at least 2 content tokens, got {self.size}")
        if self.mask_id is None:
            object.__setattr__(self, "mask_id", self.size)
        if 0 <= self.mask_id < self.size:
            raise ValueError(f"mask_id {self.mask_id} collides with content ids 0..{self.size - 1}")
        if self.token_labels is not None:
            labels = tuple(self.token_labels)
            if len(labels) != self.size:
                raise ValueError("token_labels must provide one label per content id")
            object.__setattr__(self, "token_labels", labels)

    def is_content(self, token: int) -> bool:
        return 0 <= token < self.size

    def label(self, token: int) -> str:
        if self.token_labels is not None and self.is_content(token):
            return self.token_labels[token]
        return "[MASK]" if token == self.mask_id else str(token)


@dataclass(frozen=True)
class MaskedState:
    """Fixed-length token canvas.

    ``tokens[i] == mask_id`` marks an undecided slot. ``clamped`` positions hold
    tokens that no scheduler may touch (prompt prefixes, canvas headers); they
    are never masked. ``time`` is the nominal mask ratio in [0, 1].
    """

    tokens: np.ndarray
    clamped: np.ndarray
    time: float
    mask_id: int

    def __post_init__(self):
        tokens = _frozen(self.tokens, np.int64)
        clamped = _frozen(self.clamped, bool)
        if tokens.ndim != 1 or clamped.shape != tokens.shape:
            raise ValueError("tokens and clamped must be 1-D arrays of equal length")
        if not 0.0 <= self.time <= 1.0:
            raise ValueError(f"time must lie in [0, 1], got {self.time}")
        if bool(np.any(clamped & (tokens == self.mask_id))):
            raise ValueError("clamped positions must hold content tokens, not masks")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "clamped", clamped)

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])

    def mask_flags(self) -> np.ndarray:
        return self.tokens == self.mask_id

    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.mask_flags())

    def mask_count(self) -> int:
        return int(self.mask_flags().sum())

    @property
    def is_complete(self) -> bool:
        return self.mask_count() == 0


def masked_state(length: int, vocab: Vocabulary, clamp: Mapping[int, int] | None = None) -> MaskedState:
    """All-mask state of the given length, with optional clamped positions.

    ``clamp`` maps position -> content token; those slots are written and
    protected for the lifetime of the decode.
    """
    if length < 1:
        raise ValueError("length must be positive")
    tokens = np.full(length, vocab.mask_id, dtype=np.int64)
    clamped = np.zeros(length, dtype=bool)
    for pos, tok in (clamp or {}).items():
        pos, tok = int(pos), int(tok)
        if not 0 <= pos < length:
            raise ValueError(f"clamp position {pos} outside [0, {length})")
        if not vocab.is_content(tok):
            raise ValueError(f"clamp token {tok} is not a content id")
        tokens[pos] = tok
        clamped[pos] = True
    time = float(np.count_nonzero(tokens == vocab.mask_id)) / length
    return MaskedState(tokens=tokens, clamped=clamped, time=time, mask_id=vocab.mask_id)


def forward_mask(y0, t: float, seed, vocab: Vocabulary) -> MaskedState:
    """Corrupt a clean sequence by independently masking each token with probability t.

    Exact at the endpoints for any seed: t=0 returns the sequence unchanged,
    t=1 masks every position (draws are uniform on [0, 1)).
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"mask ratio t must lie in [0, 1], got {t}")
    y0 = np.asarray(y0, dtype=np.int64)
    if y0.ndim != 1 or y0.size == 0:
        raise ValueError("y0 must be a non-empty 1-D token array")
    if bool(np.any(y0 == vocab.mask_id)):
        raise ValueError("y0 must not contain the mask id")
    if bool(np.any((y0 < 0) | (y0 >= vocab.size))):
        raise ValueError("y0 contains ids outside the content range")
    rng = np.random.default_rng(seed)
    hit = rng.random(y0.size) < t
    tokens = np.where(hit, vocab.mask_id, y0)
    return MaskedState(
        tokens=tokens,
        clamped=np.zeros(y0.size, dtype=bool),
        time=float(t),
        mask_id=vocab.mask_id,
    )


@dataclass(frozen=True)
class StepSchedule:
    """Per-step unmasking quotas: ``quotas[s]`` tokens commit at step s."""

    total_steps: int
    kind: str
    quotas: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "quotas", tuple(int(q) for q in self.quotas))
        if self.total_steps != len(self.quotas):
            raise InfeasibleScheduleError("total_steps must equal the number of quotas")
        if any(q < 1 for q in self.quotas):
            raise InfeasibleScheduleError("every step quota must be at least 1")

    @property
    def mask_budget(self) -> int:
        return sum(self.quotas)


def build_schedule(
    initial_mask_count: int,
    total_steps: int,
    kind: str = "linear",
    quotas: Iterable[int] | None = None,
) -> StepSchedule:
    """Spread ``initial_mask_count`` commits over ``total_steps`` steps.

    The linear kind assigns ceil(M*s/T) - ceil(M*(s-1)/T) at step s, so quotas
    sum to M and differ pairwise by at most one.
    """
    m, t = int(initial_mask_count), int(total_steps)
    if kind == "linear":
        if quotas is not None:
            raise InfeasibleScheduleError("linear schedules derive their own quotas")
        if t < 1 or t > m:
            raise InfeasibleScheduleError(
                f"need 1 <= total_steps <= mask count, got steps={t} masks={m}"
            )
        qs = [math.ceil(m * s / t) - math.ceil(m * (s - 1) / t) for s in range(1, t + 1)]
        return StepSchedule(total_steps=t, kind="linear", quotas=tuple(qs))
    if kind == "custom":
        if quotas is None:
            raise InfeasibleScheduleError("custom schedules require explicit quotas")
        qs = tuple(int(q) for q in quotas)
        if len(qs) != t:
            raise InfeasibleScheduleError("custom quotas must have total_steps entries")
        if sum(qs) != m:
            raise InfeasibleScheduleError(
                f"custom quotas sum to {sum(qs)}, expected the mask count {m}"
            )
        return StepSchedule(total_steps=t, kind="custom", quotas=qs)
    raise InfeasibleScheduleError(f"unknown schedule kind {kind!r}")


def apply_commits(state: MaskedState, commits) -> MaskedState:
    """Write content tokens into masked positions, returning the new state.

    ``commits`` is an iterable of (position, token) pairs or a mapping.
    Duplicate identical pairs collapse; conflicting tokens for one position,
    non-masked targets, and clamped targets are protocol violations.
    """
    if isinstance(commits, Mapping):
        pairs = [(int(p), int(tok)) for p, tok in commits.items()]
    else:
        pairs = [(int(p), int(tok)) for p, tok in commits]

    resolved: dict[int, int] = {}
    for pos, tok in pairs:
        if pos in resolved and resolved[pos] != tok:
            raise ProtocolViolationError(
                f"conflicting commits for position {pos}: {resolved[pos]} vs {tok}"
            )
        resolved[pos] = tok

    length = state.length
    tokens = state.tokens.copy()
    for pos, tok in resolved.items():
        if not 0 <= pos < length:
            raise ProtocolViolationError(f"commit position {pos} outside [0, {length})")
        if state.clamped[pos]:
            raise ProtocolViolationError(f"position {pos} is clamped")
        if tokens[pos] != state.mask_id:
            raise ProtocolViolationError(f"position {pos} is not masked")
        if tok == state.mask_id or tok < 0:
            raise ProtocolViolationError(f"token {tok} is not a content id")
        tokens[pos] = tok

    remaining = int(np.count_nonzero(tokens == state.mask_id))
    return MaskedState(
        tokens=tokens,
        clamped=state.clamped,
        time=remaining / length,
        mask_id=state.mask_id,
    )

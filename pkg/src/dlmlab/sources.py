"""Synthetic Markov sequence sources with exactly computable posteriors.

These play two roles: oracle denoisers (exact per-position conditionals stand
in for a neural mask predictor) and exact left-to-right scorers for
sequential-dependence analysis. Three independent posterior routes exist on
purpose — closed-form filtering (`chain_posterior`), brute-force enumeration
(`oracle_posterior`), and rejection sampling (`mc_posterior`) — so each can
check the others.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import MaskedState, Vocabulary, apply_commits
from .errors import CapacityError, ConfigError, EstimationError
from .types_util import derive_seed  # noqa: F401  (re-exported for callers)

NEG_INF = float("-inf")
DEFAULT_ENUMERATION_CAP = 1 << 22
FREE = -1  # unobserved slot in a scoring pattern

_ROW_TOL = 1e-9


@dataclass(frozen=True)
class MarkovSource:
    """Order-r Markov chain over content tokens.

    ``initial`` is the joint distribution of the first r tokens (a plain
    vector for r=1); ``transition`` has shape (V,)*(r+1) with the last axis
    stochastic. ``prompt_conditioning`` optionally swaps the initial
    distribution per prompt id, which is how prompts condition a decode.
    """

    order: int
    vocab: Vocabulary
    initial: np.ndarray
    transition: np.ndarray
    prompt_conditioning: Mapping[int, np.ndarray] | None = None
    name: str = "custom"

    def __post_init__(self):
        v = self.vocab.size
        if self.order < 1:
            raise ValueError("order must be a positive integer")
        initial = np.array(self.initial, dtype=float)
        transition = np.array(self.transition, dtype=float)
        if initial.shape != (v,) * self.order:
            raise ValueError(f"initial must have shape {(v,) * self.order}")
        if transition.shape != (v,) * (self.order + 1):
            raise ValueError(f"transition must have shape {(v,) * (self.order + 1)}")
        for arr, what in ((initial, "initial"), (transition, "transition")):
            if bool(np.any(arr < 0)):
                raise ValueError(f"{what} has negative entries")
        if abs(initial.sum() - 1.0) > _ROW_TOL:
            raise ValueError("initial distribution must sum to 1")
        row_sums = transition.sum(axis=-1)
        if bool(np.any(np.abs(row_sums - 1.0) > _ROW_TOL)):
            raise ValueError("every transition row must sum to 1")
        initial.setflags(write=False)
        transition.setflags(write=False)
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "transition", transition)
        if self.prompt_conditioning is not None:
            cond = {}
            for pid, vec in self.prompt_conditioning.items():
                vec = np.array(vec, dtype=float)
                if vec.shape != initial.shape:
                    raise ValueError("prompt-conditioned initial has the wrong shape")
                if abs(vec.sum() - 1.0) > _ROW_TOL or bool(np.any(vec < 0)):
                    raise ValueError("prompt-conditioned initial is not a distribution")
                vec.setflags(write=False)
                cond[int(pid)] = vec
            object.__setattr__(self, "prompt_conditioning", cond)

    def with_prompt(self, prompt_id: int | None) -> "MarkovSource":
        """Source whose initial distribution reflects the given prompt id."""
        if prompt_id is None:
            return self
        if not self.prompt_conditioning or int(prompt_id) not in self.prompt_conditioning:
            raise ConfigError(f"source {self.name!r} has no conditioning for prompt {prompt_id}")
        return replace(self, initial=self.prompt_conditioning[int(prompt_id)])


# ---------------------------------------------------------------------------
# presets


def iid_source(v: int, probs=None, name: str = "iid") -> MarkovSource:
    vocab = Vocabulary(size=v)
    p = np.full(v, 1.0 / v) if probs is None else np.asarray(probs, dtype=float)
    return MarkovSource(
        order=1, vocab=vocab, initial=p, transition=np.tile(p, (v, 1)), name=name
    )


def sticky_source(v: int, stay: float = 0.9, name: str = "sticky") -> MarkovSource:
    if not 0.0 <= stay <= 1.0:
        raise ConfigError("stay probability must lie in [0, 1]")
    vocab = Vocabulary(size=v)
    off = (1.0 - stay) / (v - 1)
    trans = np.full((v, v), off)
    np.fill_diagonal(trans, stay)
    return MarkovSource(
        order=1, vocab=vocab, initial=np.full(v, 1.0 / v), transition=trans, name=name
    )


def cycle_source(v: int, start: int | None = None, name: str = "cycle") -> MarkovSource:
    """Deterministic counter: y[i+1] = (y[i] + 1) mod V. Zero entropy given y[0]."""
    vocab = Vocabulary(size=v)
    trans = np.zeros((v, v))
    trans[np.arange(v), (np.arange(v) + 1) % v] = 1.0
    if start is None:
        initial = np.full(v, 1.0 / v)
    else:
        initial = np.zeros(v)
        initial[int(start)] = 1.0
    return MarkovSource(order=1, vocab=vocab, initial=initial, transition=trans, name=name)


def lossy_counter_source(v: int, eps: float = 0.05, name: str = "lossy_counter") -> MarkovSource:
    """Counter that increments w.p. 1-eps and resets to 0 w.p. eps.

    The forward conditional is low-entropy while positions downstream of the
    V-1 -> 0 wrap can be *more* certain than their predecessors, so greedy
    confidence decoding has a genuine left-to-right pull with occasional
    jumps — the shape needed to separate the decoding rules.
    """
    if not 0.0 < eps < 1.0:
        raise ConfigError("eps must lie in (0, 1)")
    vocab = Vocabulary(size=v)
    trans = np.zeros((v, v))
    trans[np.arange(v), (np.arange(v) + 1) % v] += 1.0 - eps
    trans[:, 0] += eps
    return MarkovSource(
        order=1, vocab=vocab, initial=np.full(v, 1.0 / v), transition=trans, name=name
    )


_PRESET_BUILDERS = {
    "iid": lambda v, params: iid_source(v, probs=params.get("probs")),
    "sticky": lambda v, params: sticky_source(v, stay=params.get("stay", 0.9)),
    "cycle": lambda v, params: cycle_source(v, start=params.get("start")),
    "lossy_counter": lambda v, params: lossy_counter_source(v, eps=params.get("eps", 0.05)),
}


def source_from_config(cfg: Mapping) -> MarkovSource:
    """Build a source from a config mapping.

    Keys: ``kind`` in {iid, sticky, cycle, lossy_counter, custom}, ``V``,
    optional ``order`` (custom only), ``parameters``, ``prompt_conditioning``,
    and an ignored bookkeeping ``seed``.
    """
    try:
        kind = cfg["kind"]
        v = int(cfg["V"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"source config needs 'kind' and 'V': {exc}") from exc
    params = dict(cfg.get("parameters") or {})
    if kind in _PRESET_BUILDERS:
        try:
            src = _PRESET_BUILDERS[kind](v, params)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"bad {kind} source parameters: {exc}") from exc
    elif kind == "custom":
        order = int(cfg.get("order", 1))
        try:
            src = MarkovSource(
                order=order,
                vocab=Vocabulary(size=v),
                initial=np.asarray(params["initial"], dtype=float),
                transition=np.asarray(params["transition"], dtype=float),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad custom source: {exc}") from exc
    else:
        raise ConfigError(f"unknown source kind {kind!r}")
    cond = cfg.get("prompt_conditioning")
    if cond:
        try:
            src = replace(
                src,
                prompt_conditioning={int(k): np.asarray(val, dtype=float) for k, val in cond.items()},
            )
        except ValueError as exc:
            raise ConfigError(f"bad prompt_conditioning: {exc}") from exc
    return replace(src, name=str(cfg.get("name", kind)))


def load_source(path) -> MarkovSource:
    with open(Path(path), "r", encoding="utf-8") as fh:
        return source_from_config(json.load(fh))


# ---------------------------------------------------------------------------
# sampling


def sample_sequence(source: MarkovSource, length: int, seed) -> np.ndarray:
    """Ancestral sample of the given length; deterministic given the seed."""
    if length < 1:
        raise ValueError("length must be positive")
    rng = np.random.default_rng(seed)
    return _sample_batch(source, length, 1, rng)[0]


def _sample_batch(source: MarkovSource, length: int, n: int, rng: np.random.Generator) -> np.ndarray:
    v, r = source.vocab.size, source.order
    out = np.empty((n, length), dtype=np.int64)
    head = min(r, length)
    init = source.initial
    if head < r:
        init = init.sum(axis=tuple(range(head, r)))
    flat = init.reshape(-1)
    cdf = np.cumsum(flat)
    u = rng.random(n)
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), flat.size - 1)
    for j, col in enumerate(np.unravel_index(idx, init.shape)):
        out[:, j] = col
    if length > r:
        trans_cdf = np.cumsum(source.transition, axis=-1)
        for i in range(r, length):
            rows = trans_cdf[tuple(out[:, i - r + k] for k in range(r))]
            u = rng.random(n)
            out[:, i] = np.minimum((rows < u[:, None]).sum(axis=1), v - 1)
    return out


def _joint_prob_batch(source: MarkovSource, ys: np.ndarray) -> np.ndarray:
    """Joint chain probability of each row of ``ys``."""
    r = source.order
    length = ys.shape[1]
    head = min(r, length)
    init = source.initial
    if head < r:
        init = init.sum(axis=tuple(range(head, r)))
    p = init[tuple(ys[:, k] for k in range(head))].astype(float).copy()
    for i in range(r, length):
        p *= source.transition[tuple(ys[:, i - r + k] for k in range(r + 1))]
    return p


# ---------------------------------------------------------------------------
# posteriors


@dataclass(frozen=True)
class Posterior:
    """Per-masked-position conditionals over content tokens.

    ``positions`` are sorted; ``probs[k]`` is the distribution at
    ``positions[k]``. Confidence defaults to the top-1 probability; the
    ``margin`` kind reports top-1 minus top-2 instead.
    """

    positions: np.ndarray
    probs: np.ndarray
    confidence_kind: str = "top1"
    support_counts: np.ndarray | None = None

    def __post_init__(self):
        positions = np.array(self.positions, dtype=np.int64)
        probs = np.array(self.probs, dtype=float)
        if positions.ndim != 1 or probs.ndim != 2 or probs.shape[0] != positions.shape[0]:
            raise ValueError("positions and probs are inconsistent")
        if positions.size and bool(np.any(np.diff(positions) <= 0)):
            raise ValueError("positions must be strictly increasing")
        if self.confidence_kind not in ("top1", "margin"):
            raise ValueError(f"unknown confidence kind {self.confidence_kind!r}")
        positions.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "probs", probs)

    @property
    def vocab_size(self) -> int:
        return int(self.probs.shape[1])

    def _row_index(self, position: int) -> int:
        idx = int(np.searchsorted(self.positions, position))
        if idx >= self.positions.size or self.positions[idx] != position:
            raise KeyError(f"no posterior row for position {position}")
        return idx

    def row(self, position: int) -> np.ndarray:
        return self.probs[self._row_index(position)]

    def confidences(self) -> np.ndarray:
        if self.probs.shape[0] == 0:
            return np.zeros(0)
        top1 = self.probs.max(axis=1)
        if self.confidence_kind == "top1":
            return top1
        if self.probs.shape[1] < 2:
            return top1
        part = np.partition(self.probs, -2, axis=1)
        return top1 - part[:, -2]

    def argmax_tokens(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    def confidence(self, position: int) -> float:
        return float(self.confidences()[self._row_index(position)])

    def argmax(self, position: int) -> int:
        return int(self.probs[self._row_index(position)].argmax())


def _initial_for(source: MarkovSource, length: int) -> np.ndarray:
    head = min(source.order, length)
    init = source.initial
    if head < source.order:
        init = init.sum(axis=tuple(range(head, source.order)))
    return init


def _run_filter(source: MarkovSource, pattern: np.ndarray, collect_alphas: bool = False):
    """Lifted-state forward filter over a token pattern (FREE = unobserved).

    Returns (alphas, logliks, zero_at). ``logliks[i]`` is
    log P(pattern[i] | pattern[:i]) for observed positions (0 for free ones);
    ``alphas[i]`` (when collected) is the normalized distribution over the
    lifted state ending at position i, defined for i >= head - 1. ``zero_at``
    flags the first position whose observation has probability zero; the
    filter stops there.
    """
    r = source.order
    length = len(pattern)
    head = min(r, length)
    state = _initial_for(source, length).copy()
    logliks = np.zeros(length)
    alphas: list[np.ndarray | None] = [None] * length if collect_alphas else []

    # joint over the first `head` positions, restricted token by token
    for i in range(head):
        tok = pattern[i]
        if tok != FREE:
            marg_axes = tuple(j for j in range(head) if j != i)
            pred = state.sum(axis=marg_axes) if marg_axes else state
            total = pred.sum()
            p = pred[tok] / total if total > 0 else 0.0
            if p <= 0.0:
                logliks[i] = NEG_INF
                return alphas, logliks, i
            logliks[i] = math.log(p)
            keep = np.zeros_like(state)
            sl = [slice(None)] * head
            sl[i] = tok
            keep[tuple(sl)] = state[tuple(sl)]
            state = keep / keep.sum()
    if collect_alphas:
        alphas[head - 1] = state / state.sum()

    for i in range(head, length):
        joint = state[..., None] * source.transition
        tok = pattern[i]
        if tok != FREE:
            pred = joint.sum(axis=tuple(range(r)))
            total = pred.sum()
            p = pred[tok] / total if total > 0 else 0.0
            if p <= 0.0:
                logliks[i] = NEG_INF
                return alphas, logliks, i
            logliks[i] = math.log(p)
            keep = np.zeros_like(joint)
            keep[..., tok] = joint[..., tok]
            joint = keep
        state = joint.sum(axis=0)
        state = state / state.sum()
        if collect_alphas:
            alphas[i] = state
    return alphas, logliks, None


def _run_backward(source: MarkovSource, pattern: np.ndarray):
    """Backward pass matching `_run_filter`; betas[i] defined for i >= head-1."""
    r = source.order
    length = len(pattern)
    head = min(r, length)
    shape = (source.vocab.size,) * head
    betas: list[np.ndarray | None] = [None] * length
    betas[length - 1] = np.ones(shape)
    for i in range(length - 2, head - 2, -1):
        tok = pattern[i + 1]
        bnext = betas[i + 1]
        if tok != FREE:
            beta = source.transition[..., tok] * bnext[..., tok][None, ...]
        else:
            beta = (source.transition * bnext[None, ...]).sum(axis=-1)
        total = beta.sum()
        betas[i] = beta / total if total > 0 else beta
    return betas


def _state_to_pattern(state: MaskedState) -> np.ndarray:
    pattern = state.tokens.copy()
    pattern[pattern == state.mask_id] = FREE
    return pattern


def chain_posterior(source: MarkovSource, state: MaskedState, confidence_kind: str = "top1") -> Posterior:
    """Exact conditional p(y_i | unmasked tokens) for every masked position.

    Forward-backward smoothing over the lifted chain; no enumeration cap, so
    it scales to full-length canvases and serves as the standard denoiser.
    """
    pattern = _state_to_pattern(state)
    masked = np.flatnonzero(pattern == FREE)
    v = source.vocab.size
    if masked.size == 0:
        return Posterior(positions=masked, probs=np.zeros((0, v)), confidence_kind=confidence_kind)
    length = state.length
    head = min(source.order, length)
    alphas, _, zero_at = _run_filter(source, pattern, collect_alphas=True)
    if zero_at is not None:
        raise ValueError(f"unmasked evidence has probability zero at position {zero_at}")
    betas = _run_backward(source, pattern)
    probs = np.empty((masked.size, v))
    gamma_head = alphas[head - 1] * betas[head - 1]
    for k, pos in enumerate(masked):
        if pos < head:
            axes = tuple(j for j in range(head) if j != pos)
            row = gamma_head.sum(axis=axes) if axes else gamma_head
        else:
            gamma = alphas[pos] * betas[pos]
            row = gamma.sum(axis=tuple(range(head - 1))) if head > 1 else gamma
        total = row.sum()
        if total <= 0:
            raise ValueError(f"unmasked evidence has probability zero (position {pos})")
        probs[k] = row / total
    return Posterior(positions=masked, probs=probs, confidence_kind=confidence_kind)


def oracle_posterior(
    source: MarkovSource,
    state: MaskedState,
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP,
    confidence_kind: str = "top1",
) -> Posterior:
    """Brute-force posterior: sum the joint over every completion of the masks.

    Deliberately naive so it can arbitrate between the other routes. Refuses
    patterns whose completion count V**m exceeds ``enumeration_cap``; reduce
    L or V, or use `mc_posterior`, for larger instances.
    """
    masked = state.masked_positions()
    m = int(masked.size)
    v = source.vocab.size
    if m == 0:
        return Posterior(positions=masked, probs=np.zeros((0, v)), confidence_kind=confidence_kind)
    total = v**m
    if total > enumeration_cap:
        raise CapacityError(
            f"{v}**{m} completions exceed the enumeration cap {enumeration_cap}; "
            "reduce L or V, or use mc_posterior"
        )
    base = state.tokens.copy()
    weights = np.zeros((m, v))
    chunk = 1 << 16
    radix = v ** np.arange(m - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        digits = (idx[:, None] // radix[None, :]) % v
        ys = np.repeat(base[None, :], idx.size, axis=0)
        ys[:, masked] = digits
        p = _joint_prob_batch(source, ys)
        for j in range(m):
            weights[j] += np.bincount(digits[:, j], weights=p, minlength=v)
    evidence = weights[0].sum()
    if evidence <= 0:
        raise ValueError("unmasked evidence has probability zero under the source")
    probs = weights / weights.sum(axis=1, keepdims=True)
    return Posterior(positions=masked, probs=probs, confidence_kind=confidence_kind)


def mc_posterior(
    source: MarkovSource,
    state: MaskedState,
    n_samples: int,
    seed,
    confidence_kind: str = "top1",
) -> Posterior:
    """Rejection-sampling posterior estimate, the independent cross-check.

    Samples full sequences, keeps those matching every unmasked position, and
    histograms the masked slots. Accepted-sample counts ride along per
    position in ``support_counts``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    masked = state.masked_positions()
    v = source.vocab.size
    if masked.size == 0:
        return Posterior(positions=masked, probs=np.zeros((0, v)), confidence_kind=confidence_kind)
    observed = np.flatnonzero(~state.mask_flags())
    target = state.tokens[observed]
    rng = np.random.default_rng(seed)
    counts = np.zeros((masked.size, v))
    accepted = 0
    chunk = 1 << 17
    remaining = int(n_samples)
    while remaining > 0:
        n = min(chunk, remaining)
        remaining -= n
        ys = _sample_batch(source, state.length, n, rng)
        keep = np.all(ys[:, observed] == target[None, :], axis=1) if observed.size else np.ones(n, bool)
        hits = ys[keep][:, masked]
        accepted += int(hits.shape[0])
        for j in range(masked.size):
            counts[j] += np.bincount(hits[:, j], minlength=v)
    if accepted == 0:
        raise EstimationError(
            f"no accepted samples out of {n_samples} (acceptance rate 0.0); "
            "evidence too unlikely for rejection sampling"
        )
    probs = counts / counts.sum(axis=1, keepdims=True)
    support = np.full(masked.size, accepted, dtype=np.int64)
    return Posterior(
        positions=masked, probs=probs, confidence_kind=confidence_kind, support_counts=support
    )


# ---------------------------------------------------------------------------
# autoregressive scoring


def _conditional_logprob(source: MarkovSource, context, continuation, gap: int = 0) -> float:
    context = [int(t) for t in context]
    continuation = [int(t) for t in continuation]
    if not continuation:
        raise ValueError("continuation must be non-empty")
    if gap < 0:
        raise ValueError("gap must be non-negative")
    for tok in context + continuation:
        if not source.vocab.is_content(tok):
            raise ValueError(f"token {tok} is not a content id")
    pattern = np.array(context + [FREE] * gap + continuation, dtype=np.int64)
    _, logliks, zero_at = _run_filter(source, pattern)
    cont_start = len(context) + gap
    if zero_at is not None and zero_at < len(context):
        raise ValueError(f"context has probability zero under the source (position {zero_at})")
    return float(logliks[cont_start:].sum())


def ar_logprob(source: MarkovSource, context, continuation) -> float:
    """Exact log p(continuation | context) in nats, -inf for impossible ones.

    The context may be empty; the continuation is scored at the positions
    immediately following it, marginalizing nothing.
    """
    return _conditional_logprob(source, context, continuation, gap=0)


def ar_logprob_after_gap(source: MarkovSource, context, gap: int, continuation) -> float:
    """log p(continuation | context) with ``gap`` unobserved tokens between.

    The intervening chain states are summed out (matrix-power marginalization),
    so this is the exact conditional given the context alone.
    """
    return _conditional_logprob(source, context, continuation, gap=gap)


def conditional_sample(source: MarkovSource, state: MaskedState, seed) -> np.ndarray:
    """Sample a completion of the masked slots from the exact conditional."""
    rng = np.random.default_rng(seed)
    cur = state
    v = source.vocab.size
    while not cur.is_complete:
        pos = int(cur.masked_positions()[0])
        row = chain_posterior(source, cur).row(pos)
        tok = int(rng.choice(v, p=row / row.sum()))
        cur = apply_commits(cur, [(pos, tok)])
    return cur.tokens.copy()


# ---------------------------------------------------------------------------
# denoiser factories

Denoiser = Callable[[MaskedState], Posterior]


def exact_denoiser(
    source: MarkovSource, prompt_id: int | None = None, confidence_kind: str = "top1"
) -> Denoiser:
    """Closed-form exact denoiser; the default model-under-test."""
    src = source.with_prompt(prompt_id)

    def denoise(state: MaskedState) -> Posterior:
        return chain_posterior(src, state, confidence_kind=confidence_kind)

    return denoise


def enumeration_denoiser(
    source: MarkovSource,
    prompt_id: int | None = None,
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP,
    confidence_kind: str = "top1",
) -> Denoiser:
    """Brute-force denoiser; capacity-limited, for verification runs."""
    src = source.with_prompt(prompt_id)

    def denoise(state: MaskedState) -> Posterior:
        return oracle_posterior(
            src, state, enumeration_cap=enumeration_cap, confidence_kind=confidence_kind
        )

    return denoise


def uniform_denoiser(vocab: Vocabulary) -> Denoiser:
    """Constant uniform posteriors; handy when only the schedule matters."""

    def denoise(state: MaskedState) -> Posterior:
        masked = state.masked_positions()
        probs = np.full((masked.size, vocab.size), 1.0 / vocab.size)
        return Posterior(positions=masked, probs=probs)

    return denoise

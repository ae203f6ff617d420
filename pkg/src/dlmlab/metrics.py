"""Trajectory and corpus metrics: left-to-right bias and sequential dependence.

The bias score asks, commit by commit, whether the chosen position was among
the k leftmost still-masked slots. Sequential dependence asks how many nats a
segment gains from conditioning on its predecessors versus the prompt alone.
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .errors import InvalidTrajectoryError, LineProtocolError
from .lineproto import SubprocessLineClient
from .schedulers import Trajectory
from .sources import MarkovSource, ar_logprob, ar_logprob_after_gap

DEFAULT_K_LIST = (1, 8, 32)


# ---------------------------------------------------------------------------
# global left-to-right bias


@dataclass(frozen=True)
class ARnessReport:
    """Per-k scores plus the raw per-commit indicator series."""

    scores: Mapping[int, float]
    hits: Mapping[int, int]
    indicators: Mapping[int, tuple[int, ...]]
    total_commits: int
    scheduler: str
    seed: int | None
    length: int

    def score(self, k: int) -> float:
        return self.scores[k]

    def to_json(self) -> dict:
        return {
            "scores": {str(k): v for k, v in sorted(self.scores.items())},
            "hits": {str(k): v for k, v in sorted(self.hits.items())},
            "total_commits": self.total_commits,
            "scheduler": self.scheduler,
            "seed": self.seed,
            "length": self.length,
        }


def _ordered_commits(trajectory: Trajectory) -> list:
    ordered = []
    for step in trajectory.steps:
        ordered.extend(sorted(step, key=lambda c: c.position))
    return ordered


def arness_report(trajectory: Trajectory, k_list: Sequence[int] = DEFAULT_K_LIST) -> ARnessReport:
    """Evaluate the left-to-right bias of a trajectory for each k.

    Commits are replayed in step order, ascending position within a step and
    shrinking the masked set after each one, so a block of simultaneous
    left-to-right commits scores as sequential. Normalization is by the total
    number of commits (canvas headers never enter the masked set).
    """
    ks = sorted(set(int(k) for k in k_list))
    if not ks or ks[0] < 1:
        raise ValueError("k values must be positive integers")
    ordered = _ordered_commits(trajectory)
    if not ordered:
        raise InvalidTrajectoryError("trajectory has no commits")
    positions = [c.position for c in ordered]
    if len(set(positions)) != len(positions):
        raise InvalidTrajectoryError("trajectory commits a position more than once")
    if min(positions) < 0 or max(positions) >= trajectory.length:
        raise InvalidTrajectoryError("trajectory commits a position outside the canvas")

    remaining = sorted(positions)
    indicators: dict[int, list[int]] = {k: [] for k in ks}
    for commit in ordered:
        rank = bisect_left(remaining, commit.position)
        for k in ks:
            indicators[k].append(1 if rank < k else 0)
        del remaining[rank]

    total = len(ordered)
    hits = {k: sum(series) for k, series in indicators.items()}
    scores = {k: hits[k] / total for k in ks}
    return ARnessReport(
        scores=scores,
        hits=hits,
        indicators={k: tuple(series) for k, series in indicators.items()},
        total_commits=total,
        scheduler=trajectory.scheduler,
        seed=trajectory.seed,
        length=trajectory.length,
    )


def global_arness(trajectory: Trajectory, k: int) -> float:
    return arness_report(trajectory, (k,)).score(int(k))


# ---------------------------------------------------------------------------
# segmentations


@dataclass(frozen=True)
class Segmentation:
    """Consecutive segments whose concatenation is exactly the output region."""

    segments: tuple[tuple[int, ...], ...]
    kind: str

    def __post_init__(self):
        segs = tuple(tuple(int(t) for t in s) for s in self.segments)
        if not segs or any(len(s) == 0 for s in segs):
            raise ValueError("segmentation needs non-empty segments")
        object.__setattr__(self, "segments", segs)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def output_length(self) -> int:
        return sum(len(s) for s in self.segments)

    def output_tokens(self) -> list[int]:
        return [t for s in self.segments for t in s]


def segment_fixed(tokens: Sequence[int], window: int) -> Segmentation:
    if window < 1:
        raise ValueError("window must be positive")
    toks = [int(t) for t in tokens]
    segs = [tuple(toks[i : i + window]) for i in range(0, len(toks), window)]
    return Segmentation(segments=tuple(segs), kind=f"fixed_window({window})")


def segment_delimiter(tokens: Sequence[int], delimiter: int) -> Segmentation:
    """Split after each delimiter token; the delimiter stays with its segment."""
    segs: list[tuple[int, ...]] = []
    cur: list[int] = []
    for t in tokens:
        cur.append(int(t))
        if int(t) == int(delimiter):
            segs.append(tuple(cur))
            cur = []
    if cur:
        segs.append(tuple(cur))
    return Segmentation(segments=tuple(segs), kind=f"delimiter({delimiter})")


def segment_think_blocks(traces: Sequence[Sequence[int]]) -> Segmentation:
    """One segment per reasoning trace of a parallel training instance."""
    return Segmentation(segments=tuple(tuple(int(t) for t in tr) for tr in traces), kind="think_blocks")


# ---------------------------------------------------------------------------
# scorers


class SourceScorer:
    """Exact left-to-right scorer backed by a Markov source.

    ``logprob_after_gap`` sums out the unobserved tokens between the context
    and the continuation, so prompt-only conditionals are exact rather than
    adjacency approximations.
    """

    def __init__(self, source: MarkovSource, prompt_id: int | None = None):
        self.source = source.with_prompt(prompt_id)

    def logprob(self, context: Sequence[int], continuation: Sequence[int]) -> float:
        return ar_logprob(self.source, context, continuation)

    def logprob_after_gap(self, context: Sequence[int], gap: int, continuation: Sequence[int]) -> float:
        return ar_logprob_after_gap(self.source, context, gap, continuation)


class ExternalScorerClient:
    """Adapter for an out-of-process scorer speaking the line-JSON protocol.

    Request: ``{"id", "context_tokens", "continuation_tokens"}``; response:
    ``{"id", "logprob_nats"}``. The endpoint scores the continuation as
    immediately following the context, so prompt-only terms fall back to the
    adjacency reading (what a real left-to-right language model computes).
    """

    def __init__(self, command: Sequence[str], timeout: float = 10.0, retries: int = 3):
        self._client = SubprocessLineClient(command, timeout=timeout, retries=retries)

    def logprob(self, context: Sequence[int], continuation: Sequence[int]) -> float:
        response = self._client.request(
            {
                "context_tokens": [int(t) for t in context],
                "continuation_tokens": [int(t) for t in continuation],
            }
        )
        value = response.get("logprob_nats")
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise LineProtocolError(
                f"scorer response lacks a numeric logprob_nats: {response!r}",
                payload=repr(response),
            )
        return float(value)

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# sequential dependence


@dataclass(frozen=True)
class SeqDepReport:
    """Per-boundary log-probability gains and their mean.

    Non-finite gains (impossible continuations under the scorer) never enter
    the mean; they are counted in ``non_finite_count``.
    """

    gains: tuple[float, ...]
    mean: float | None
    non_finite_count: int
    n_segments: int
    output_length: int
    segmenter: str

    def to_json(self) -> dict:
        return {
            "gains": list(self.gains),
            "mean": self.mean,
            "boundaries": len(self.gains),
            "neg_inf_count": self.non_finite_count,
            "n_segments": self.n_segments,
            "output_length": self.output_length,
            "segmenter": self.segmenter,
        }


def seqdep(scorer, prompt: Sequence[int], segmentation: Segmentation) -> SeqDepReport:
    """Mean log-probability gain each segment receives from its prefix.

    For boundary n the gain is log p(s_n | x, s_<n) - log p(s_n | x), with the
    prompt-only term gap-marginalized when the scorer supports it. Scorer
    failures propagate annotated with the failing boundary.
    """
    if segmentation.n_segments < 2:
        raise ValueError("sequential dependence needs at least 2 segments")
    prompt = [int(t) for t in prompt]
    gapped: Callable | None = getattr(scorer, "logprob_after_gap", None)
    gains: list[float] = []
    prefix: list[int] = []
    for n, segment in enumerate(segmentation.segments, start=1):
        if n == 1:
            prefix.extend(segment)
            continue
        try:
            with_prefix = scorer.logprob(prompt + prefix, list(segment))
            if gapped is not None:
                prompt_only = gapped(prompt, len(prefix), list(segment))
            else:
                prompt_only = scorer.logprob(prompt, list(segment))
        except Exception as exc:
            raise type(exc)(f"scorer failed at boundary {n}: {exc}") from exc
        if math.isfinite(with_prefix) and math.isfinite(prompt_only):
            gains.append(with_prefix - prompt_only)
        else:
            gains.append(float("-inf") if with_prefix == float("-inf") else float("nan"))
        prefix.extend(segment)

    finite = [g for g in gains if math.isfinite(g)]
    mean = sum(finite) / len(finite) if finite else None
    return SeqDepReport(
        gains=tuple(gains),
        mean=mean,
        non_finite_count=len(gains) - len(finite),
        n_segments=segmentation.n_segments,
        output_length=segmentation.output_length,
        segmenter=segmentation.kind,
    )


@dataclass(frozen=True)
class SeqDepProfile:
    """Length-binned means of per-instance sequential-dependence scores."""

    bin_edges: tuple[int, ...]
    means: tuple[float | None, ...]
    counts: tuple[int, ...]
    non_finite_instances: int
    segmenter: str

    def to_json(self) -> dict:
        bins = []
        for i in range(len(self.counts)):
            bins.append(
                {
                    "bin_low": self.bin_edges[i],
                    "bin_high": self.bin_edges[i + 1],
                    "mean": self.means[i],
                    "count": self.counts[i],
                }
            )
        return {
            "bins": bins,
            "neg_inf_instances": self.non_finite_instances,
            "segmenter": self.segmenter,
        }


def seqdep_profile(
    items: Iterable[tuple[Sequence[int], Segmentation]],
    scorer,
    bins: Sequence[int],
) -> SeqDepProfile:
    """Bin per-instance scores by output length; deterministic in input order.

    ``items`` yields (prompt, segmentation) pairs. Bins are half-open
    ``[edges[i], edges[i+1])`` and must cover every observed length. Instances
    whose every boundary is non-finite count separately and contribute to no
    bin mean.
    """
    edges = [int(b) for b in bins]
    if len(edges) < 2 or any(edges[i] >= edges[i + 1] for i in range(len(edges) - 1)):
        raise ValueError("bins must be at least two strictly increasing edges")
    sums = [0.0] * (len(edges) - 1)
    counts = [0] * (len(edges) - 1)
    non_finite = 0
    segmenter = "mixed"
    seen_kinds: set[str] = set()
    for prompt, segmentation in items:
        report = seqdep(scorer, prompt, segmentation)
        seen_kinds.add(report.segmenter)
        length = report.output_length
        bin_idx = bisect_right(edges, length) - 1
        if bin_idx < 0 or length >= edges[-1]:
            raise ValueError(f"instance length {length} falls outside the bins {edges}")
        if report.mean is None:
            non_finite += 1
            continue
        sums[bin_idx] += report.mean
        counts[bin_idx] += 1
    if len(seen_kinds) == 1:
        segmenter = seen_kinds.pop()
    means = tuple(sums[i] / counts[i] if counts[i] else None for i in range(len(counts)))
    return SeqDepProfile(
        bin_edges=tuple(edges),
        means=means,
        counts=tuple(counts),
        non_finite_instances=non_finite,
        segmenter=segmenter,
    )


def metrics_report_json(
    arness: Mapping[int, float] | None = None, seqdep_report: SeqDepReport | None = None
) -> dict:
    """Combined report layout: {"arness": {k: score}, "seqdep": {...}}."""
    out: dict = {}
    if arness is not None:
        out["arness"] = {str(k): v for k, v in sorted(arness.items())}
    if seqdep_report is not None:
        out["seqdep"] = seqdep_report.to_json()
    return out

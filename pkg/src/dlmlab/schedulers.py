"""Decoding rules: which masked positions commit at each refinement step.

Selector functions implement the individual rules; thin scheduler objects
adapt them to the shared decode loop. A decode pairs a denoiser with one rule
under a fixed step schedule and records the full commit trajectory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import MaskedState, StepSchedule, apply_commits
from .errors import (
    ConfigError,
    InfeasibleScheduleError,
    ProtocolViolationError,
    StallError,
)
from .sources import Denoiser, Posterior

TIE_BREAKS = ("lowest_position", "highest_confidence_then_lowest_position")


@dataclass(frozen=True)
class Commit:
    position: int
    token: int
    confidence: float


@dataclass(frozen=True)
class Trajectory:
    """Ordered record of commits, grouped by decoding step.

    ``block_of`` optionally maps committed positions to canvas block ids for
    structured decodes (reasoning blocks 0..m-1, summary m); plain decodes
    leave it None and export block_id -1.
    """

    steps: tuple[tuple[Commit, ...], ...]
    length: int
    scheduler: str
    seed: int | None = None
    prompt_id: int | None = None
    block_of: Mapping[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(tuple(s) for s in self.steps))

    def commits(self) -> list[Commit]:
        return [c for step in self.steps for c in step]

    def positions(self) -> list[int]:
        return [c.position for c in self.commits()]

    @property
    def n_commits(self) -> int:
        return sum(len(s) for s in self.steps)

    def block_id(self, position: int) -> int:
        if self.block_of is None:
            return -1
        return int(self.block_of.get(position, -1))


# ---------------------------------------------------------------------------
# candidate handling


def _candidate_positions(state: MaskedState, candidates: np.ndarray | None) -> np.ndarray:
    flags = state.mask_flags() & ~state.clamped
    if candidates is not None:
        flags = flags & candidates
    return np.flatnonzero(flags)


def _check_quota(quota: int, available: int) -> int:
    quota = int(quota)
    if quota < 1:
        raise ProtocolViolationError(f"step quota must be at least 1, got {quota}")
    if quota > available:
        raise ProtocolViolationError(f"quota {quota} exceeds the {available} available masks")
    return quota


def _commit(posterior: Posterior, pos: int) -> Commit:
    return Commit(position=int(pos), token=posterior.argmax(pos), confidence=posterior.confidence(pos))


# ---------------------------------------------------------------------------
# selection rules


def select_ar(
    state: MaskedState,
    posterior: Posterior,
    quota: int,
    candidates: np.ndarray | None = None,
) -> list[Commit]:
    """Commit the leftmost masked positions, argmax tokens."""
    cands = _candidate_positions(state, candidates)
    quota = _check_quota(quota, cands.size)
    return [_commit(posterior, p) for p in cands[:quota]]


def select_confidence(
    state: MaskedState,
    posterior: Posterior,
    quota: int,
    tie_break: str = "lowest_position",
    candidates: np.ndarray | None = None,
) -> list[Commit]:
    """Commit the most certain masked positions first, wherever they sit.

    Both declared tie-break styles realize the same ordering here: sort by
    descending confidence, then ascending position among equals.
    """
    if tie_break not in TIE_BREAKS:
        raise ConfigError(f"unknown tie_break {tie_break!r}")
    cands = _candidate_positions(state, candidates)
    quota = _check_quota(quota, cands.size)
    conf = np.array([posterior.confidence(p) for p in cands])
    order = np.lexsort((cands, -conf))
    chosen = sorted(int(cands[i]) for i in order[:quota])
    return [_commit(posterior, p) for p in chosen]


def select_random(
    state: MaskedState,
    posterior: Posterior,
    quota: int,
    rng: np.random.Generator,
    candidates: np.ndarray | None = None,
) -> list[Commit]:
    """Commit a uniformly random subset of the masked positions."""
    cands = _candidate_positions(state, candidates)
    quota = _check_quota(quota, cands.size)
    chosen = sorted(int(p) for p in rng.choice(cands, size=quota, replace=False))
    return [_commit(posterior, p) for p in chosen]


def select_threshold(
    state: MaskedState,
    posterior: Posterior,
    theta: float,
    candidates: np.ndarray | None = None,
) -> list[Commit]:
    """Commit every candidate whose confidence clears theta in one step.

    When nothing qualifies, the single most confident candidate commits so the
    decode always progresses. Quotas do not apply: parallelism here is purely
    confidence-gated.
    """
    if not 0.0 < theta <= 1.0:
        raise ConfigError(f"theta must lie in (0, 1], got {theta}")
    cands = _candidate_positions(state, candidates)
    if cands.size == 0:
        return []
    conf = np.array([posterior.confidence(p) for p in cands])
    qualifying = cands[conf >= theta]
    if qualifying.size == 0:
        best = int(cands[np.lexsort((cands, -conf))[0]])
        qualifying = np.array([best])
    return [_commit(posterior, p) for p in sorted(int(p) for p in qualifying)]


def select_nap(
    state: MaskedState,
    posterior: Posterior,
    regions,
    per_block_quota: int,
    summary_phase: str = "after",
) -> list[Commit]:
    """Macro-parallel, micro-confidence selection over a structured canvas.

    Every reasoning block with remaining masks receives commits each step
    (confidence-ranked within the block). When a block exhausts early its
    quota is redistributed evenly across the surviving blocks. The summary
    region decodes under the same quota — strictly after the reasoning blocks
    with ``summary_phase="after"``, or as an extra parallel stream with
    ``"interleaved"``.
    """
    if per_block_quota < 1:
        raise ProtocolViolationError("per_block_quota must be at least 1")
    if summary_phase not in ("after", "interleaved"):
        raise ConfigError(f"unknown summary_phase {summary_phase!r}")
    if regions.length != state.length:
        raise ProtocolViolationError(
            f"layout length {regions.length} does not match state length {state.length}"
        )
    mask_flags = state.mask_flags()

    def region_masks(region) -> np.ndarray:
        return np.flatnonzero(mask_flags[region.start : region.stop]) + region.start

    block_masks = [region_masks(r) for r in regions.block_contents]
    summary_masks = region_masks(regions.summary_content)

    streams = [m for m in block_masks if m.size > 0]
    reasoning_active = len(streams) > 0
    if summary_phase == "interleaved" and summary_masks.size > 0:
        streams = streams + [summary_masks]
    elif not reasoning_active:
        streams = [summary_masks] if summary_masks.size > 0 else []
    if not streams:
        return []

    n_streams = len(regions.block_contents) + (1 if summary_phase == "interleaved" else 0)
    total_quota = per_block_quota * n_streams if reasoning_active else per_block_quota
    # even water-fill across surviving streams, remainder to the earliest
    alloc = [0] * len(streams)
    capacity = [int(m.size) for m in streams]
    budget = min(total_quota, sum(capacity))
    while budget > 0:
        open_streams = [i for i in range(len(streams)) if alloc[i] < capacity[i]]
        share, rem = divmod(budget, len(open_streams))
        budget = 0
        for rank, i in enumerate(open_streams):
            give = min(share + (1 if rank < rem else 0), capacity[i] - alloc[i])
            alloc[i] += give
            budget += share + (1 if rank < rem else 0) - give

    commits: list[Commit] = []
    for i, masks in enumerate(streams):
        if alloc[i] == 0:
            continue
        conf = np.array([posterior.confidence(p) for p in masks])
        order = np.lexsort((masks, -conf))
        commits.extend(_commit(posterior, int(masks[j])) for j in order[: alloc[i]])
    commits.sort(key=lambda c: c.position)
    return commits


# ---------------------------------------------------------------------------
# scheduler objects


class Scheduler:
    """Adapter contract for the decode loop."""

    name: str = "base"
    uses_quota: bool = True

    def select(
        self,
        state: MaskedState,
        posterior: Posterior,
        rng: np.random.Generator,
        quota: int | None = None,
        candidates: np.ndarray | None = None,
    ) -> list[Commit]:
        raise NotImplementedError


class ArScheduler(Scheduler):
    name = "ar"

    def select(self, state, posterior, rng, quota=None, candidates=None):
        return select_ar(state, posterior, quota, candidates=candidates)


class ConfidenceScheduler(Scheduler):
    name = "confidence_ao"

    def __init__(self, tie_break: str = "lowest_position"):
        if tie_break not in TIE_BREAKS:
            raise ConfigError(f"unknown tie_break {tie_break!r}")
        self.tie_break = tie_break

    def select(self, state, posterior, rng, quota=None, candidates=None):
        return select_confidence(state, posterior, quota, tie_break=self.tie_break, candidates=candidates)


class RandomScheduler(Scheduler):
    name = "random"

    def select(self, state, posterior, rng, quota=None, candidates=None):
        return select_random(state, posterior, quota, rng, candidates=candidates)


class ThresholdScheduler(Scheduler):
    name = "threshold"
    uses_quota = False

    def __init__(self, theta: float):
        if not 0.0 < theta <= 1.0:
            raise ConfigError(f"theta must lie in (0, 1], got {theta}")
        self.theta = float(theta)

    def select(self, state, posterior, rng, quota=None, candidates=None):
        return select_threshold(state, posterior, self.theta, candidates=candidates)


class BlockwiseScheduler(Scheduler):
    """Restrict an inner rule to the earliest block still containing masks.

    Blocks tile the maskable (non-clamped) region in fixed chunks of
    ``block_len``; the candidate set advances only once a block is fully
    unmasked. The tiling depends only on the clamp pattern, so it is stable
    across the whole decode.
    """

    def __init__(self, inner: Scheduler, block_len: int):
        if block_len < 1:
            raise ConfigError("block_len must be at least 1")
        self.inner = inner
        self.block_len = int(block_len)
        self.name = f"blockwise({inner.name},{block_len})"
        self.uses_quota = inner.uses_quota

    def _active_block(self, state: MaskedState) -> np.ndarray | None:
        maskable = np.flatnonzero(~state.clamped)
        mask_flags = state.mask_flags()
        for start in range(0, maskable.size, self.block_len):
            block = maskable[start : start + self.block_len]
            if bool(mask_flags[block].any()):
                sel = np.zeros(state.length, dtype=bool)
                sel[block] = True
                return sel
        return None

    def select(self, state, posterior, rng, quota=None, candidates=None):
        block = self._active_block(state)
        if block is None:
            return []
        if candidates is not None:
            block = block & candidates
        if self.uses_quota:
            available = int((state.mask_flags() & block & ~state.clamped).sum())
            quota = min(int(quota), available)
        return self.inner.select(state, posterior, rng, quota=quota, candidates=block)


class NapScheduler(Scheduler):
    uses_quota = False

    def __init__(self, regions, per_block_quota: int = 1, summary_phase: str = "after"):
        if per_block_quota < 1:
            raise ConfigError("per_block_quota must be at least 1")
        if summary_phase not in ("after", "interleaved"):
            raise ConfigError(f"unknown summary_phase {summary_phase!r}")
        self.regions = regions
        self.per_block_quota = int(per_block_quota)
        self.summary_phase = summary_phase
        self.name = f"nap(m={len(regions.block_contents)},q={per_block_quota})"

    def select(self, state, posterior, rng, quota=None, candidates=None):
        return select_nap(
            state,
            posterior,
            self.regions,
            self.per_block_quota,
            summary_phase=self.summary_phase,
        )


def wrap_blockwise(inner: Scheduler, block_len: int) -> Scheduler:
    return BlockwiseScheduler(inner, block_len)


# ---------------------------------------------------------------------------
# declarative configuration


@dataclass(frozen=True)
class SchedulerConfig:
    """Declarative scheduler description, as found in run config files."""

    kind: str
    tie_break: str = "lowest_position"
    seed: int | None = None
    block_len: int | None = None
    inner: str | None = None
    theta: float | None = None
    per_block_quota: int = 1
    summary_phase: str = "after"

    def __post_init__(self):
        if self.tie_break not in TIE_BREAKS:
            raise ConfigError(f"unknown tie_break {self.tie_break!r}")
        if self.theta is not None and not 0.0 < self.theta <= 1.0:
            raise ConfigError(f"theta must lie in (0, 1], got {self.theta}")
        if self.block_len is not None and self.block_len < 1:
            raise ConfigError("block_len must be at least 1")


_BASE_KINDS = ("ar", "confidence_ao", "random", "threshold")
SCHEDULER_KINDS = _BASE_KINDS + ("blockwise", "nap_parallel")


def build_scheduler(config: SchedulerConfig, regions=None) -> Scheduler:
    def base(kind: str) -> Scheduler:
        if kind == "ar":
            return ArScheduler()
        if kind == "confidence_ao":
            return ConfidenceScheduler(tie_break=config.tie_break)
        if kind == "random":
            return RandomScheduler()
        if kind == "threshold":
            if config.theta is None:
                raise ConfigError("threshold scheduler requires theta")
            return ThresholdScheduler(config.theta)
        raise ConfigError(f"unknown scheduler kind {kind!r}")

    if config.kind in _BASE_KINDS:
        return base(config.kind)
    if config.kind == "blockwise":
        if config.block_len is None or config.inner is None:
            raise ConfigError("blockwise scheduler requires inner and block_len")
        return BlockwiseScheduler(base(config.inner), config.block_len)
    if config.kind == "nap_parallel":
        if regions is None:
            raise ConfigError("nap_parallel requires a canvas layout")
        return NapScheduler(
            regions, per_block_quota=config.per_block_quota, summary_phase=config.summary_phase
        )
    raise ConfigError(f"unknown scheduler kind {config.kind!r}")


def scheduler_config_from_dict(cfg: Mapping) -> SchedulerConfig:
    known = {
        "kind", "tie_break", "seed", "block_len", "inner", "theta",
        "per_block_quota", "summary_phase",
    }
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown scheduler config keys: {sorted(unknown)}")
    if "kind" not in cfg:
        raise ConfigError("scheduler config needs a 'kind'")
    return SchedulerConfig(**{k: cfg[k] for k in cfg})


# ---------------------------------------------------------------------------
# decode loop


@dataclass(frozen=True)
class DecodeResult:
    tokens: np.ndarray
    trajectory: Trajectory

    def __post_init__(self):
        arr = np.array(self.tokens, dtype=np.int64)
        arr.setflags(write=False)
        object.__setattr__(self, "tokens", arr)


def decode(
    denoiser: Denoiser,
    scheduler: Scheduler | SchedulerConfig,
    schedule: StepSchedule | None,
    init: MaskedState,
    *,
    seed: int | None = None,
    prompt_id: int | None = None,
    block_of: Mapping[int, int] | None = None,
    regions=None,
) -> DecodeResult:
    """Run one decode to completion, recording every commit.

    Quota-driven rules consume the schedule step by step; unspent quota (a
    block boundary can cap a step) carries into the next step so the schedule
    stays feasible. Threshold and structured-canvas rules ignore schedules by
    design. Identical (denoiser, scheduler, schedule, init, seed) inputs give
    bit-identical trajectories.
    """
    if isinstance(scheduler, SchedulerConfig):
        if seed is None:
            seed = scheduler.seed
        scheduler = build_scheduler(scheduler, regions=regions)

    initial_masks = init.mask_count()
    if scheduler.uses_quota and initial_masks > 0:
        if schedule is None:
            raise InfeasibleScheduleError(f"scheduler {scheduler.name!r} requires a step schedule")
        if schedule.mask_budget != initial_masks:
            raise InfeasibleScheduleError(
                f"schedule covers {schedule.mask_budget} commits but the state has "
                f"{initial_masks} masks"
            )

    rng = np.random.default_rng(seed)
    state = init
    steps: list[tuple[Commit, ...]] = []
    carry = 0
    step_index = 0
    while not state.is_complete:
        posterior = denoiser(state)
        if scheduler.uses_quota:
            base = schedule.quotas[step_index] if step_index < schedule.total_steps else 0
            requested = base + carry
            quota = min(requested, state.mask_count())
            commits = scheduler.select(state, posterior, rng, quota=quota)
            carry = requested - len(commits)
        else:
            commits = scheduler.select(state, posterior, rng)
        if not commits:
            raise StallError(
                f"scheduler {scheduler.name!r} returned no commits with "
                f"{state.mask_count()} masks remaining"
            )
        state = apply_commits(state, [(c.position, c.token) for c in commits])
        steps.append(tuple(commits))
        step_index += 1

    trajectory = Trajectory(
        steps=tuple(steps),
        length=init.length,
        scheduler=scheduler.name,
        seed=seed,
        prompt_id=prompt_id,
        block_of=dict(block_of) if block_of is not None else None,
    )
    return DecodeResult(tokens=state.tokens, trajectory=trajectory)


# ---------------------------------------------------------------------------
# trajectory artifacts

TRAJECTORY_COLUMNS = ("step", "position", "token", "confidence", "block_id")


def write_trajectory_csv(trajectory: Trajectory, path) -> None:
    """One row per commit, bit-exact column order; floats use shortest repr."""
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for step_idx, step in enumerate(trajectory.steps):
            for c in step:
                writer.writerow(
                    [step_idx, c.position, c.token, repr(c.confidence), trajectory.block_id(c.position)]
                )


def read_trajectory_csv(path) -> Trajectory:
    """Rebuild a trajectory from its CSV export.

    Scheduler metadata is not stored in the CSV; the length is recovered as a
    lower bound (max position + 1), which is all the trajectory metrics need.
    """
    path = Path(path)
    steps: dict[int, list[Commit]] = {}
    block_of: dict[int, int] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRAJECTORY_COLUMNS:
            raise ConfigError(f"{path} is not a trajectory CSV (header {header})")
        for row in reader:
            step, pos, tok, conf, block = int(row[0]), int(row[1]), int(row[2]), float(row[3]), int(row[4])
            steps.setdefault(step, []).append(Commit(position=pos, token=tok, confidence=conf))
            if block >= 0:
                block_of[pos] = block
    ordered = tuple(tuple(steps[k]) for k in sorted(steps))
    length = max((c.position for grp in ordered for c in grp), default=-1) + 1
    return Trajectory(
        steps=ordered,
        length=length,
        scheduler=path.stem,
        block_of=block_of or None,
    )


def write_plot_csv(trajectory: Trajectory, path) -> None:
    """Position-vs-step data for decoding-dynamics plots."""
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step", "position", "block_id"))
        for step_idx, step in enumerate(trajectory.steps):
            for c in step:
                writer.writerow([step_idx, c.position, trajectory.block_id(c.position)])

"""Structured decoding canvas: clamped headers, reasoning slots, summary region.

The canvas is a fixed layout of m header+content block pairs followed by a
header+content summary pair. Headers are written and clamped at construction;
every content slot starts masked. The prompt is conditioning context for the
denoiser, never canvas positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .core import MaskedState, Vocabulary, apply_commits
from .errors import IncompleteDecodeError, LayoutError
from .sources import Denoiser, MarkovSource, conditional_sample
from .types_util import derive_seed


class Region(NamedTuple):
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class CanvasLayout:
    """Block structure: headers B_1..B_m, budgets L_1..L_m, then B_S and L_S.

    Budgets count content slots only; header lengths are extra. The derived
    total length is sum(|B_j| + L_j) + |B_S| + L_S.
    """

    headers: tuple[tuple[int, ...], ...]
    budgets: tuple[int, ...]
    summary_header: tuple[int, ...]
    summary_budget: int
    pad_id: int | None = None

    def __post_init__(self):
        headers = tuple(tuple(int(t) for t in h) for h in self.headers)
        budgets = tuple(int(b) for b in self.budgets)
        summary_header = tuple(int(t) for t in self.summary_header)
        object.__setattr__(self, "headers", headers)
        object.__setattr__(self, "budgets", budgets)
        object.__setattr__(self, "summary_header", summary_header)
        if len(headers) < 1:
            raise LayoutError("a canvas needs at least one reasoning block")
        if len(budgets) != len(headers):
            raise LayoutError("need exactly one budget per reasoning block")
        all_headers = headers + (summary_header,)
        if any(len(h) == 0 for h in all_headers):
            raise LayoutError("headers must be non-empty token arrays")
        if len(set(all_headers)) != len(all_headers):
            raise LayoutError("headers must be mutually distinct")
        if any(b < 1 for b in budgets) or self.summary_budget < 1:
            raise LayoutError("budgets must be positive")

    @property
    def m(self) -> int:
        return len(self.headers)

    @property
    def total_length(self) -> int:
        blocks = sum(len(h) + b for h, b in zip(self.headers, self.budgets))
        return blocks + len(self.summary_header) + self.summary_budget


@dataclass(frozen=True)
class CanvasRegions:
    """Half-open position intervals tiling a canvas of length ``length``."""

    block_headers: tuple[Region, ...]
    block_contents: tuple[Region, ...]
    summary_header: Region
    summary_content: Region

    @property
    def length(self) -> int:
        return self.summary_content.stop

    @property
    def m(self) -> int:
        return len(self.block_contents)

    def block_map(self) -> dict[int, int]:
        """Content position -> block id (0..m-1 reasoning, m summary)."""
        mapping: dict[int, int] = {}
        for j, region in enumerate(self.block_contents):
            for pos in range(region.start, region.stop):
                mapping[pos] = j
        for pos in range(self.summary_content.start, self.summary_content.stop):
            mapping[pos] = self.m
        return mapping

    def all_regions(self) -> list[Region]:
        out: list[Region] = []
        for h, c in zip(self.block_headers, self.block_contents):
            out.extend((h, c))
        out.extend((self.summary_header, self.summary_content))
        return out


def default_headers(vocab: Vocabulary, m: int) -> tuple[tuple[tuple[int, ...], ...], tuple[int, ...]]:
    """Fixed rendering of the "<think #j>" / "<summary>" tags as token arrays.

    Block j maps to the single token ``j % V`` (1-indexed) and the summary tag
    to ``(m + 1) % V``. Small vocabularies that cannot keep the arrays
    distinct must supply custom headers.
    """
    if m < 1:
        raise LayoutError("need at least one reasoning block")
    headers = tuple((j % vocab.size,) for j in range(1, m + 1))
    summary = ((m + 1) % vocab.size,)
    if len(set(headers + (summary,))) != m + 1:
        raise LayoutError(
            f"default single-token headers collide for m={m}, V={vocab.size}; supply custom headers"
        )
    return headers, summary


def make_layout(
    vocab: Vocabulary,
    m: int = 3,
    budgets: int | Sequence[int] = 330,
    summary_budget: int = 32,
    headers: Sequence[Sequence[int]] | None = None,
    summary_header: Sequence[int] | None = None,
    pad_id: int | None = None,
) -> CanvasLayout:
    if isinstance(budgets, int):
        budgets = (budgets,) * m
    if headers is None or summary_header is None:
        default_h, default_s = default_headers(vocab, m)
        headers = headers if headers is not None else default_h
        summary_header = summary_header if summary_header is not None else default_s
    layout = CanvasLayout(
        headers=tuple(tuple(h) for h in headers),
        budgets=tuple(budgets),
        summary_header=tuple(summary_header),
        summary_budget=int(summary_budget),
        pad_id=pad_id,
    )
    for header in layout.headers + (layout.summary_header,):
        for tok in header:
            if not vocab.is_content(tok):
                raise LayoutError(f"header token {tok} is not a content id")
    return layout


def layout_from_config(cfg: Mapping, vocab: Vocabulary) -> CanvasLayout:
    """Layout from config keys m, budgets (scalar or list), summary_budget."""
    m = int(cfg.get("m", 3))
    budgets = cfg.get("budgets", 330)
    if not isinstance(budgets, int):
        budgets = tuple(int(b) for b in budgets)
    style = cfg.get("header_style", "tagged")
    if style != "tagged" and "headers" not in cfg:
        raise LayoutError(f"unknown header_style {style!r}")
    return make_layout(
        vocab,
        m=m,
        budgets=budgets,
        summary_budget=int(cfg.get("summary_budget", 32)),
        headers=cfg.get("headers"),
        summary_header=cfg.get("summary_header"),
        pad_id=cfg.get("pad_id"),
    )


def build_canvas(
    layout: CanvasLayout, vocab: Vocabulary, prompt: Sequence[int] = ()
) -> tuple[MaskedState, CanvasRegions]:
    """Materialize the layout: headers written and clamped, contents masked.

    The prompt is validated but not placed on the canvas; pass it to the
    denoiser (e.g. as a prompt id selecting the source conditioning).
    """
    for tok in prompt:
        if not vocab.is_content(int(tok)):
            raise LayoutError(f"prompt token {tok} is not a content id")
    tokens: list[int] = []
    clamped: list[bool] = []
    block_headers: list[Region] = []
    block_contents: list[Region] = []

    def emit(header: tuple[int, ...], budget: int) -> tuple[Region, Region]:
        h_start = len(tokens)
        tokens.extend(header)
        clamped.extend([True] * len(header))
        c_start = len(tokens)
        tokens.extend([vocab.mask_id] * budget)
        clamped.extend([False] * budget)
        return Region(h_start, c_start), Region(c_start, len(tokens))

    for header, budget in zip(layout.headers, layout.budgets):
        h, c = emit(header, budget)
        block_headers.append(h)
        block_contents.append(c)
    summary_header, summary_content = emit(layout.summary_header, layout.summary_budget)

    regions = CanvasRegions(
        block_headers=tuple(block_headers),
        block_contents=tuple(block_contents),
        summary_header=summary_header,
        summary_content=summary_content,
    )
    if regions.length != layout.total_length:
        raise LayoutError("canvas construction does not match the layout arithmetic")
    token_arr = np.array(tokens, dtype=np.int64)
    state = MaskedState(
        tokens=token_arr,
        clamped=np.array(clamped, dtype=bool),
        time=float(np.count_nonzero(token_arr == vocab.mask_id)) / len(tokens),
        mask_id=vocab.mask_id,
    )
    return state, regions


def extract_summary(state: MaskedState, regions: CanvasRegions, pad_id: int | None = None) -> np.ndarray:
    """Tokens of the summary content interval, the only answer-bearing region."""
    region = regions.summary_content
    window = state.tokens[region.start : region.stop]
    if bool(np.any(window == state.mask_id)):
        raise IncompleteDecodeError("summary region still holds masks")
    if pad_id is not None:
        end = window.size
        while end > 0 and window[end - 1] == pad_id:
            end -= 1
        window = window[:end]
    return window.copy()


def conditional_independence_probe(
    denoiser: Denoiser,
    layout: CanvasLayout,
    vocab: Vocabulary,
    source: MarkovSource,
    n_seeds: int = 8,
    seed: int = 0,
) -> dict[tuple[int, int], float]:
    """Cross-block posterior leakage table.

    For sampled canvas fillings and each ordered block pair (i, j), reports
    the largest L-inf distance between the posterior over block j's slots with
    block i revealed versus masked. Zero entries mean block j cannot see block
    i through the denoiser.
    """
    state0, regions = build_canvas(layout, vocab)
    m = regions.m
    table = {(i, j): 0.0 for i in range(m) for j in range(m) if i != j}
    for trial in range(n_seeds):
        filled = conditional_sample(source, state0, derive_seed(seed, trial))
        base_post = denoiser(state0)
        for i in range(m):
            block_i = regions.block_contents[i]
            reveal = [(pos, int(filled[pos])) for pos in range(block_i.start, block_i.stop)]
            revealed_post = denoiser(apply_commits(state0, reveal))
            for j in range(m):
                if i == j:
                    continue
                block_j = regions.block_contents[j]
                for pos in range(block_j.start, block_j.stop):
                    gap = float(np.max(np.abs(revealed_post.row(pos) - base_post.row(pos))))
                    if gap > table[(i, j)]:
                        table[(i, j)] = gap
    return table

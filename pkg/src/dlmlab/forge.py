"""Curation, serialization, and validation of parallel-reasoning instances.

An instance groups P independently sampled reasoning traces for one query with
a summary that always carries the ground-truth answer, rendered in a
line-oriented ASCII tag grammar that round-trips byte-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import CurationError, InstanceParseError, LineProtocolError
from .lineproto import SubprocessLineClient
from .sources import MarkovSource, sample_sequence
from .types_util import config_hash, derive_seed

SUMMARY_PREFIX = "By analyzing multiple reasoning processes above, I concluded that: The final answer is \\boxed{"
SUMMARY_SUFFIX = "}."


@dataclass(frozen=True)
class TrainingInstance:
    """One query, P parallel reasoning traces, and the ground-truth answer.

    ``metadata`` is sidecar bookkeeping (per-trace seeds, correctness flags);
    it travels in the corpus records but not in the rendered text.
    """

    query: str
    traces: tuple[tuple[int, ...], ...]
    answer: str
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(tuple(int(t) for t in tr) for tr in self.traces))

    @property
    def p(self) -> int:
        return len(self.traces)

    def summary_text(self) -> str:
        return f"{SUMMARY_PREFIX}{self.answer}{SUMMARY_SUFFIX}"

    def same_fields(self, other: "TrainingInstance") -> bool:
        return (
            self.query == other.query
            and self.traces == other.traces
            and self.answer == other.answer
        )


def validate_instance(instance: TrainingInstance) -> None:
    if instance.p < 1:
        raise ValueError("an instance needs at least one reasoning trace")
    if not instance.query or "\n" in instance.query:
        raise ValueError("query must be a non-empty single line")
    if any(len(tr) == 0 for tr in instance.traces):
        raise ValueError("traces must be non-empty")
    if any(t < 0 for tr in instance.traces for t in tr):
        raise ValueError("trace tokens must be non-negative ids")
    if not instance.answer or "\n" in instance.answer or "}" in instance.answer:
        raise ValueError("answer must be a single line without '}'")


def render_instance(instance: TrainingInstance) -> str:
    """Deterministic tagged text: query, numbered think blocks, then summary."""
    validate_instance(instance)
    lines = ["<query>", instance.query, "</query>"]
    for j, trace in enumerate(instance.traces, start=1):
        lines.append(f"<think {j}>")
        lines.append(" ".join(str(t) for t in trace))
        lines.append(f"</think {j}>")
    lines.extend(["<summary>", instance.summary_text(), "</summary>"])
    return "\n".join(lines) + "\n"


class _LineCursor:
    def __init__(self, text: str):
        self.text = text
        self.offset = 0

    def next_line(self) -> str | None:
        if self.offset >= len(self.text):
            return None
        end = self.text.find("\n", self.offset)
        if end == -1:
            raise InstanceParseError("text does not end with a newline", offset=self.offset)
        line = self.text[self.offset : end]
        self.line_offset = self.offset
        self.offset = end + 1
        return line

    def expect(self, literal: str) -> None:
        line = self.next_line()
        if line != literal:
            raise InstanceParseError(
                f"expected {literal!r}, found {line!r}", offset=self.line_offset
            )

    def content(self) -> str:
        line = self.next_line()
        if line is None:
            raise InstanceParseError("unexpected end of text", offset=self.offset)
        if line.startswith("<"):
            raise InstanceParseError(f"expected content, found tag {line!r}", offset=self.line_offset)
        return line


def parse_instance(text: str) -> TrainingInstance:
    """Inverse of `render_instance`; rejects unknown, reordered or unbalanced tags."""
    cursor = _LineCursor(text)
    cursor.expect("<query>")
    query = cursor.content()
    cursor.expect("</query>")

    traces: list[tuple[int, ...]] = []
    while True:
        line = cursor.next_line()
        if line is None:
            raise InstanceParseError("missing <summary> section", offset=len(text))
        if line == "<summary>":
            break
        expected = f"<think {len(traces) + 1}>"
        if line != expected:
            raise InstanceParseError(
                f"expected {expected!r} or '<summary>', found {line!r}", offset=cursor.line_offset
            )
        body = cursor.content()
        try:
            trace = tuple(int(t) for t in body.split())
        except ValueError as exc:
            raise InstanceParseError(
                f"trace {len(traces) + 1} is not a token id list: {exc}", offset=cursor.line_offset
            ) from exc
        if not trace:
            raise InstanceParseError(f"trace {len(traces) + 1} is empty", offset=cursor.line_offset)
        cursor.expect(f"</think {len(traces) + 1}>")
        traces.append(trace)

    if not traces:
        raise InstanceParseError("instance has no think blocks", offset=0)
    summary = cursor.content()
    cursor.expect("</summary>")
    if cursor.next_line() is not None:
        raise InstanceParseError("trailing content after </summary>", offset=cursor.line_offset)
    if not summary.startswith(SUMMARY_PREFIX) or not summary.endswith(SUMMARY_SUFFIX):
        raise InstanceParseError("summary sentence does not match the canonical scaffold", offset=0)
    answer = summary[len(SUMMARY_PREFIX) : -len(SUMMARY_SUFFIX)]
    instance = TrainingInstance(query=query, traces=tuple(traces), answer=answer)
    validate_instance(instance)
    return instance


# ---------------------------------------------------------------------------
# teachers


@dataclass(frozen=True)
class CurationConfig:
    """How to assemble instances: trace count P and sampling temperature."""

    p: int
    temperature: float = 1.0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("P must be at least 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


class SyntheticTeacher:
    """Deterministic stand-in teacher: independent source rollouts per trace.

    Each trace is a fresh sample of ``trace_len`` tokens from the trace
    source, annealed by the sampling temperature (rows proportional to
    p**(1/tau)). A per-trace corruption probability flips one token and flags
    the path wrong in metadata; the answer is a pure function of the query, so
    the summary stays correct regardless.
    """

    def __init__(
        self,
        source: MarkovSource,
        trace_len: int = 12,
        corruption_rate: float = 0.0,
    ):
        if trace_len < 1:
            raise ValueError("trace_len must be positive")
        if not 0.0 <= corruption_rate <= 1.0:
            raise ValueError("corruption_rate must lie in [0, 1]")
        self.source = source
        self.trace_len = int(trace_len)
        self.corruption_rate = float(corruption_rate)

    @staticmethod
    def make_query(query_id: int) -> str:
        return f"Reduce job {int(query_id)} to its terminal value."

    @staticmethod
    def query_id(query: str) -> int:
        try:
            return int(query.split("job ")[1].split(" ")[0])
        except (IndexError, ValueError) as exc:
            raise CurationError(f"query {query!r} does not carry a job id") from exc

    def answer(self, query: str) -> str:
        qid = self.query_id(query)
        return str((qid * 31 + 7) % 97)

    def _annealed(self, temperature: float) -> MarkovSource:
        if temperature == 1.0:
            return self.source
        powered_init = self.source.initial ** (1.0 / temperature)
        powered_trans = self.source.transition ** (1.0 / temperature)
        from dataclasses import replace

        return replace(
            self.source,
            initial=powered_init / powered_init.sum(),
            transition=powered_trans / powered_trans.sum(axis=-1, keepdims=True),
        )

    def trace(self, query: str, temperature: float, seed: int) -> tuple[tuple[int, ...], bool]:
        """Sample one trace; returns (tokens, path_correct)."""
        self.query_id(query)  # validates the query shape
        src = self._annealed(temperature)
        tokens = [int(t) for t in sample_sequence(src, self.trace_len, seed)]
        rng = np.random.default_rng(derive_seed(seed, 1))
        correct = True
        if self.corruption_rate > 0 and rng.random() < self.corruption_rate:
            pos = int(rng.integers(0, len(tokens)))
            tokens[pos] = int((tokens[pos] + 1 + rng.integers(0, self.source.vocab.size - 1)) % self.source.vocab.size)
            correct = False
        return tuple(tokens), correct


class ExternalTeacher:
    """Out-of-process teacher over the line-JSON protocol.

    Request: ``{"id", "query", "temperature", "seed"}``; response:
    ``{"id", "trace"}`` with a token id list. Answers stay with the caller's
    ground truth: the endpoint only produces traces.
    """

    def __init__(self, command: Sequence[str], timeout: float = 10.0, retries: int = 3):
        self._client = SubprocessLineClient(command, timeout=timeout, retries=retries)

    def trace(self, query: str, temperature: float, seed: int) -> tuple[tuple[int, ...], bool]:
        response = self._client.request(
            {"query": query, "temperature": float(temperature), "seed": int(seed)}
        )
        trace = response.get("trace")
        if not isinstance(trace, list) or not trace or not all(isinstance(t, int) for t in trace):
            raise LineProtocolError(
                f"teacher response lacks a token id trace: {response!r}", payload=repr(response)
            )
        return tuple(int(t) for t in trace), True

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# curation


def curate_instance(query: str, answer: str, teacher, config: CurationConfig, seed: int) -> TrainingInstance:
    """Assemble one instance: P teacher traces conditioned only on the query.

    Trace j samples with the derived seed (seed, j), so reseeding one trace
    never changes its siblings. Byte-identical trace sets get a
    ``duplicate_traces`` warning flag rather than an error.
    """
    traces: list[tuple[int, ...]] = []
    flags: list[bool] = []
    seeds: list[int] = []
    for j in range(config.p):
        trace_seed = derive_seed(seed, j)
        seeds.append(trace_seed)
        try:
            trace, correct = teacher.trace(query, config.temperature, trace_seed)
        except CurationError:
            raise
        except Exception as exc:
            raise CurationError(f"teacher failed on trace {j}: {exc}", trace_index=j) from exc
        traces.append(tuple(trace))
        flags.append(bool(correct))
    metadata = {
        "trace_seeds": seeds,
        "path_correct": flags,
        "duplicate_traces": len(set(traces)) == 1 and config.p > 1,
        "config_hash": config_hash({"P": config.p, "temperature": config.temperature}),
    }
    instance = TrainingInstance(query=query, traces=tuple(traces), answer=answer, metadata=metadata)
    validate_instance(instance)
    return instance


# ---------------------------------------------------------------------------
# corpus persistence (one JSON object per line)


def instance_record(instance: TrainingInstance) -> dict:
    return {
        "query": instance.query,
        "traces": [list(tr) for tr in instance.traces],
        "answer": instance.answer,
        "rendered": render_instance(instance),
        "metadata": dict(instance.metadata),
    }


def write_corpus(instances: Iterable[TrainingInstance], path) -> int:
    count = 0
    with open(Path(path), "w", encoding="utf-8") as fh:
        for instance in instances:
            fh.write(json.dumps(instance_record(instance), sort_keys=True, ensure_ascii=True))
            fh.write("\n")
            count += 1
    return count


def iter_corpus(path) -> Iterator[TrainingInstance]:
    with open(Path(path), "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InstanceParseError(f"line {line_no}: not valid JSON: {exc}") from exc
            yield TrainingInstance(
                query=record["query"],
                traces=tuple(tuple(tr) for tr in record["traces"]),
                answer=record["answer"],
                metadata=record.get("metadata", {}),
            )


@dataclass(frozen=True)
class CorpusReport:
    total: int
    passed: int
    failures: tuple[tuple[int, str], ...]
    duplicate_flagged: int

    @property
    def all_passed(self) -> bool:
        return self.passed == self.total and self.total > 0

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "passed": self.passed,
            "failed": self.total - self.passed,
            "duplicate_flagged": self.duplicate_flagged,
            "failures": [{"line": ln, "reason": why} for ln, why in self.failures],
        }


def validate_corpus(path, config: CurationConfig | None = None) -> CorpusReport:
    """Line-by-line corpus check: JSON shape, tag grammar, round-trip, P bounds."""
    total = 0
    passed = 0
    duplicates = 0
    failures: list[tuple[int, str]] = []
    with open(Path(path), "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            total += 1
            try:
                record = json.loads(line)
                instance = TrainingInstance(
                    query=record["query"],
                    traces=tuple(tuple(tr) for tr in record["traces"]),
                    answer=record["answer"],
                    metadata=record.get("metadata", {}),
                )
                validate_instance(instance)
                rendered = record["rendered"]
                if rendered != render_instance(instance):
                    raise ValueError("stored rendering differs from the canonical one")
                if not parse_instance(rendered).same_fields(instance):
                    raise ValueError("rendered text does not round-trip to the fields")
                if config is not None and instance.p != config.p:
                    raise ValueError(f"expected P={config.p}, found {instance.p}")
                if instance.metadata.get("duplicate_traces"):
                    duplicates += 1
                passed += 1
            except (KeyError, ValueError, TypeError, InstanceParseError, json.JSONDecodeError) as exc:
                failures.append((line_no, str(exc)))
    return CorpusReport(
        total=total, passed=passed, failures=tuple(failures), duplicate_flagged=duplicates
    )

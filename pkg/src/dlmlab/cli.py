"""Reproducible experiment runner.

Subcommands: decode | arness | seqdep | sweep | curate. Every run expands a
single root seed through a fixed derivation (root -> run index -> trace
index), writes a manifest describing its inputs, and emits artifacts that
re-running the same manifest reproduces byte for byte.

Exit codes: 0 success, 2 config error, 3 infeasible schedule, 4 external
scorer/teacher unavailable, 5 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .canvas import CanvasRegions, build_canvas, layout_from_config
from .core import MaskedState, StepSchedule, build_schedule, masked_state
from .errors import (
    CapacityError,
    ConfigError,
    CurationError,
    DlmLabError,
    EndpointUnavailableError,
    EstimationError,
    IncompleteDecodeError,
    InfeasibleScheduleError,
    InstanceParseError,
    InvalidTrajectoryError,
    LayoutError,
    LineProtocolError,
    ProtocolViolationError,
    StallError,
)
from .forge import (
    CurationConfig,
    ExternalTeacher,
    SyntheticTeacher,
    curate_instance,
    iter_corpus,
    validate_corpus,
    write_corpus,
)
from .metrics import (
    ExternalScorerClient,
    Segmentation,
    SourceScorer,
    arness_report,
    segment_delimiter,
    segment_fixed,
    segment_think_blocks,
    seqdep_profile,
)
from .schedulers import (
    SchedulerConfig,
    Trajectory,
    build_scheduler,
    decode,
    read_trajectory_csv,
    scheduler_config_from_dict,
    write_plot_csv,
    write_trajectory_csv,
)
from .sources import chain_posterior, exact_denoiser, source_from_config
from .types_util import config_hash, derive_seed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_UNAVAILABLE = 4
EXIT_INVARIANT = 5

_INVARIANT_ERRORS = (
    ProtocolViolationError,
    StallError,
    InvalidTrajectoryError,
    CapacityError,
    EstimationError,
    LayoutError,
    IncompleteDecodeError,
    LineProtocolError,
    CurationError,
)


def _load_json(path) -> dict:
    try:
        with open(Path(path), "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _dump_json(obj, path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _text_table(rows: Sequence[Sequence[str]], header: Sequence[str]) -> str:
    table = [list(header)] + [list(r) for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = []
    for idx, row in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if idx == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(header))))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# decode


def _build_run(config: Mapping):
    """Resolve a decode config into (source, init state, regions, scheduler cfg, schedule)."""
    for key in ("source", "scheduler"):
        if key not in config:
            raise ConfigError(f"decode config needs a {key!r} section")
    source = source_from_config(config["source"])
    vocab = source.vocab

    regions: CanvasRegions | None = None
    if "canvas" in config:
        layout = layout_from_config(config["canvas"], vocab)
        init, regions = build_canvas(layout, vocab)
    else:
        if "length" not in config:
            raise ConfigError("decode config needs either 'canvas' or 'length'")
        clamp = {int(k): int(v) for k, v in (config.get("clamp") or {}).items()}
        init = masked_state(int(config["length"]), vocab, clamp=clamp)

    sched_cfg = scheduler_config_from_dict(config["scheduler"])
    scheduler = build_scheduler(sched_cfg, regions=regions)

    schedule: StepSchedule | None = None
    if scheduler.uses_quota:
        mask_count = init.mask_count()
        spec = config.get("schedule") or {}
        total_steps = int(spec.get("total_steps", mask_count))
        kind = spec.get("kind", "linear")
        schedule = build_schedule(mask_count, total_steps, kind=kind, quotas=spec.get("quotas"))
    return source, init, regions, sched_cfg, schedule


def _run_decodes(config: Mapping, seeds: Sequence[int], out_dir: Path) -> dict:
    source, init, regions, sched_cfg, schedule = _build_run(config)
    prompt_id = config.get("prompt_id")
    denoiser = exact_denoiser(source, prompt_id=prompt_id)
    block_of = regions.block_map() if regions is not None else None

    artifacts: list[str] = []
    for run_idx, seed in enumerate(seeds):
        result = decode(
            denoiser,
            build_scheduler(sched_cfg, regions=regions),
            schedule,
            init,
            seed=seed,
            prompt_id=prompt_id,
            block_of=block_of,
        )
        traj_name = f"traj_{run_idx:04d}.csv"
        plot_name = f"plot_{run_idx:04d}.csv"
        write_trajectory_csv(result.trajectory, out_dir / traj_name)
        write_plot_csv(result.trajectory, out_dir / plot_name)
        artifacts.extend([traj_name, plot_name])
    return {
        "tool": "dlmlab",
        "tool_version": __version__,
        "command": "decode",
        "config": dict(config),
        "config_hash": config_hash(dict(config)),
        "seeds": list(int(s) for s in seeds),
        "source_preset": source.name,
        "canvas_length": init.length,
        "artifacts": artifacts,
    }


def cmd_decode(args) -> int:
    config = _load_json(args.config)
    root = int(args.root_seed if args.root_seed is not None else config.get("seed", 0))
    seeds = [derive_seed(root, i) for i in range(args.seeds)]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    created: list[Path] = []
    try:
        manifest = _run_decodes(config, seeds, out_dir)
        manifest["root_seed"] = root
        created = [out_dir / name for name in manifest["artifacts"]]
        _dump_json(manifest, out_dir / "manifest.json")
        created.append(out_dir / "manifest.json")
    except BaseException:
        for path in created:
            path.unlink(missing_ok=True)
        for stale in list(out_dir.glob("traj_*.csv")) + list(out_dir.glob("plot_*.csv")):
            stale.unlink(missing_ok=True)
        raise
    print(f"wrote {len(manifest['artifacts'])} artifacts to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# arness


def cmd_arness(args) -> int:
    if not args.trajectories:
        raise ConfigError("no trajectory files given")
    k_list = [int(k) for k in args.k_list.split(",") if k]
    if not k_list:
        raise ConfigError("empty --k-list")
    reports = []
    for path in args.trajectories:
        traj = read_trajectory_csv(path)
        reports.append((Path(path).name, arness_report(traj, k_list)))

    commit_counts = {rep.total_commits for _, rep in reports}
    if len(commit_counts) > 1 and not args.allow_mixed_length:
        raise ConfigError(
            f"trajectories have differing commit counts {sorted(commit_counts)}; "
            "pass --allow-mixed-length to aggregate anyway"
        )

    rows = []
    for name, rep in reports:
        rows.append([name] + [f"{rep.score(k):.6f}" for k in k_list])
    aggregate = {k: sum(rep.score(k) for _, rep in reports) / len(reports) for k in k_list}
    rows.append(["aggregate"] + [f"{aggregate[k]:.6f}" for k in k_list])
    print(_text_table(rows, ["trajectory"] + [f"@{k}" for k in k_list]))

    payload = {
        "per_trajectory": {name: rep.to_json() for name, rep in reports},
        "arness": {str(k): aggregate[k] for k in k_list},
    }
    if args.json:
        _dump_json(payload, args.json)
    return EXIT_OK


# ---------------------------------------------------------------------------
# seqdep


def _make_scorer(spec: str):
    if spec.startswith("source:"):
        return SourceScorer(source_from_config(_load_json(spec[len("source:"):])))
    if spec.startswith("cmd:"):
        try:
            command = json.loads(spec[len("cmd:"):])
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--scorer cmd expects a JSON argv list: {exc}") from exc
        if not isinstance(command, list):
            raise ConfigError("--scorer cmd expects a JSON argv list")
        return ExternalScorerClient(command)
    raise ConfigError(f"unknown scorer spec {spec!r}; use source:<config.json> or cmd:<argv json>")


def _make_segmenter(spec: str):
    if spec == "think_blocks":
        return lambda inst: segment_think_blocks(inst.traces)
    if spec.startswith("fixed:"):
        window = int(spec[len("fixed:"):])
        return lambda inst: segment_fixed([t for tr in inst.traces for t in tr], window)
    if spec.startswith("delimiter:"):
        tok = int(spec[len("delimiter:"):])
        return lambda inst: segment_delimiter([t for tr in inst.traces for t in tr], tok)
    raise ConfigError(f"unknown segmenter {spec!r}")


def cmd_seqdep(args) -> int:
    bins = [int(b) for b in args.bins.split(",") if b]
    segmenter = _make_segmenter(args.segmenter)
    scorer = _make_scorer(args.scorer)
    try:
        items: list[tuple[list[int], Segmentation]] = []
        for instance in iter_corpus(args.corpus):
            items.append(([], segmenter(instance)))
        profile = seqdep_profile(items, scorer, bins)
    finally:
        if hasattr(scorer, "close"):
            scorer.close()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = profile.to_json()
    payload["segmenter_spec"] = args.segmenter
    _dump_json(payload, out_dir / "seqdep_profile.json")
    with open(out_dir / "seqdep_profile.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("bin_low,bin_high,mean,count\n")
        for i in range(len(profile.counts)):
            mean = profile.means[i]
            fh.write(
                f"{profile.bin_edges[i]},{profile.bin_edges[i + 1]},"
                f"{'' if mean is None else repr(mean)},{profile.counts[i]}\n"
            )
    print(f"wrote seqdep profile ({sum(profile.counts)} instances) to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


_SWEEP_AXES = ("steps", "scheduler", "theta", "m", "per_block_quota", "source")


def _apply_axis(config: dict, axis: str, value) -> dict:
    cfg = json.loads(json.dumps(config))  # deep copy via JSON round-trip
    if axis == "steps":
        cfg.setdefault("schedule", {})["total_steps"] = int(value)
    elif axis == "scheduler":
        cfg["scheduler"] = value
    elif axis == "theta":
        cfg.setdefault("scheduler", {})["theta"] = float(value)
    elif axis == "m":
        if "canvas" not in cfg:
            raise ConfigError("axis 'm' requires a canvas section in the base config")
        cfg["canvas"]["m"] = int(value)
    elif axis == "per_block_quota":
        cfg.setdefault("scheduler", {})["per_block_quota"] = int(value)
    elif axis == "source":
        cfg["source"] = value
    return cfg


def _unique_completion(source, init: MaskedState, prompt_id) -> np.ndarray | None:
    """The single consistent completion for zero-entropy sources, else None."""
    posterior = chain_posterior(source.with_prompt(prompt_id), init)
    if posterior.positions.size == 0:
        return init.tokens.copy()
    if bool(np.all(posterior.probs.max(axis=1) >= 1.0 - 1e-9)):
        tokens = init.tokens.copy()
        tokens[posterior.positions] = posterior.argmax_tokens()
        return tokens
    return None


def _run_cell(cell_key: tuple, config: dict, runs: int, root: int) -> dict:
    cell_label = {axis: value for axis, value in cell_key}
    try:
        source, init, regions, sched_cfg, schedule = _build_run(config)
    except (ConfigError, InfeasibleScheduleError, LayoutError) as exc:
        return {"cell": cell_label, "status": f"infeasible: {exc}"}
    prompt_id = config.get("prompt_id")
    denoiser = exact_denoiser(source, prompt_id=prompt_id)
    target = _unique_completion(source, init, prompt_id)
    cell_seed = int(config_hash(cell_label), 16) % (1 << 32)

    scores = []
    steps_taken = []
    matches = 0
    for run_idx in range(runs):
        seed = derive_seed(root, cell_seed, run_idx)
        result = decode(
            denoiser,
            build_scheduler(sched_cfg, regions=regions),
            schedule,
            init,
            seed=seed,
            prompt_id=prompt_id,
            block_of=regions.block_map() if regions is not None else None,
        )
        scores.append(arness_report(result.trajectory, (1,)).score(1))
        steps_taken.append(len(result.trajectory.steps))
        if target is not None and bool(np.array_equal(result.tokens, target)):
            matches += 1
    n_commits = init.mask_count()
    return {
        "cell": cell_label,
        "status": "ok",
        "runs": runs,
        "arness_at_1": sum(scores) / len(scores),
        "tok_per_step": n_commits / (sum(steps_taken) / len(steps_taken)),
        "accuracy": (matches / runs) if target is not None else None,
    }


def cmd_sweep(args) -> int:
    grid = _load_json(args.grid)
    base = grid.get("base")
    axes = grid.get("axes")
    if not isinstance(base, dict) or not isinstance(axes, dict) or not axes:
        raise ConfigError("sweep grid needs 'base' (decode config) and non-empty 'axes'")
    unknown = set(axes) - set(_SWEEP_AXES)
    if unknown:
        raise ConfigError(f"unknown sweep axes {sorted(unknown)}; allowed: {_SWEEP_AXES}")
    runs = int(grid.get("runs_per_cell", 5))
    root = int(grid.get("root_seed", 0))

    axis_names = sorted(axes)
    cells: list[tuple[tuple, dict]] = []

    def expand(idx: int, key: tuple, cfg: dict):
        if idx == len(axis_names):
            cells.append((key, cfg))
            return
        axis = axis_names[idx]
        values = axes[axis]
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axis {axis!r} must list at least one value")
        for value in values:
            expand(idx + 1, key + ((axis, value),), _apply_axis(cfg, axis, value))

    expand(0, (), base)

    jobs = max(1, int(args.jobs))
    if jobs == 1:
        results = [_run_cell(key, cfg, runs, root) for key, cfg in cells]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda kc: _run_cell(kc[0], kc[1], runs, root), cells))
    results.sort(key=lambda row: json.dumps(row["cell"], sort_keys=True))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "tool_version": __version__,
        "grid_hash": config_hash(grid),
        "runs_per_cell": runs,
        "root_seed": root,
        "rows": results,
    }
    _dump_json(summary, out_dir / "sweep_summary.json")

    header = axis_names + ["status", "arness@1", "tok/step", "acc"]
    rows = []
    for row in results:
        cells_txt = [json.dumps(row["cell"].get(a)) for a in axis_names]
        if row["status"] == "ok":
            acc = "n/a" if row["accuracy"] is None else f"{row['accuracy']:.3f}"
            rows.append(cells_txt + ["ok", f"{row['arness_at_1']:.4f}", f"{row['tok_per_step']:.2f}", acc])
        else:
            rows.append(cells_txt + [row["status"], "-", "-", "-"])
    print(_text_table(rows, header))
    print(f"wrote sweep summary to {out_dir / 'sweep_summary.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# curate


def _build_teacher(cfg: Mapping):
    kind = cfg.get("kind")
    if kind == "synthetic":
        source = source_from_config(cfg.get("source") or {"kind": "iid", "V": 8})
        return SyntheticTeacher(
            source,
            trace_len=int(cfg.get("trace_len", 12)),
            corruption_rate=float(cfg.get("corruption_rate", 0.0)),
        )
    if kind == "external":
        command = cfg.get("command")
        if not isinstance(command, list) or not command:
            raise ConfigError("external teacher needs a 'command' argv list")
        return ExternalTeacher(command, timeout=float(cfg.get("timeout", 10.0)))
    raise ConfigError(f"unknown teacher kind {kind!r}")


def cmd_curate(args) -> int:
    config = _load_json(args.config)
    curation = CurationConfig(p=int(config.get("P", 3)), temperature=float(config.get("temperature", 1.0)))
    teacher = _build_teacher(config.get("teacher") or {})
    root = int(config.get("root_seed", 0))

    queries_cfg = config.get("queries", 100)
    pairs: list[tuple[str, str]] = []
    if isinstance(queries_cfg, int):
        if not isinstance(teacher, SyntheticTeacher):
            raise ConfigError("an integer query count requires the synthetic teacher")
        for qid in range(queries_cfg):
            query = teacher.make_query(qid)
            pairs.append((query, teacher.answer(query)))
    else:
        for entry in queries_cfg:
            if isinstance(entry, str):
                if not isinstance(teacher, SyntheticTeacher):
                    raise ConfigError("bare query strings require the synthetic teacher for answers")
                pairs.append((entry, teacher.answer(entry)))
            else:
                pairs.append((str(entry["query"]), str(entry["answer"])))

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = out_path.with_suffix(out_path.suffix + ".tmp")
    try:
        instances = (
            curate_instance(query, answer, teacher, curation, derive_seed(root, idx))
            for idx, (query, answer) in enumerate(pairs)
        )
        count = write_corpus(instances, tmp_path)
        tmp_path.replace(out_path)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise
    finally:
        if hasattr(teacher, "close"):
            teacher.close()

    report = validate_corpus(out_path, curation)
    _dump_json(report.to_json(), out_path.with_suffix(".report.json"))
    print(f"curated {count} instances -> {out_path} ({report.passed}/{report.total} valid)")
    return EXIT_OK if report.all_passed else EXIT_INVARIANT


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlmlab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dlmlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", help="run seeded decodes and export trajectories")
    p.add_argument("config", help="decode config JSON")
    p.add_argument("--seeds", type=int, default=1, help="number of seeded runs")
    p.add_argument("--root-seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("arness", help="score exported trajectories")
    p.add_argument("trajectories", nargs="*", help="trajectory CSV paths")
    p.add_argument("--k-list", default="1,8,32")
    p.add_argument("--allow-mixed-length", action="store_true")
    p.add_argument("--json", default=None, help="also write the report as JSON")
    p.set_defaults(func=cmd_arness)

    p = sub.add_parser("seqdep", help="profile sequential dependence over a corpus")
    p.add_argument("corpus", help="JSONL corpus path")
    p.add_argument("--scorer", required=True, help="source:<config.json> or cmd:<argv json>")
    p.add_argument("--segmenter", default="think_blocks", help="think_blocks | fixed:W | delimiter:TOK")
    p.add_argument("--bins", required=True, help="comma-separated bin edges")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_seqdep)

    p = sub.add_parser("sweep", help="full-factorial grid of seeded decode runs")
    p.add_argument("grid", help="sweep grid config JSON")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("curate", help="build and validate a parallel-reasoning corpus")
    p.add_argument("config", help="curation config JSON")
    p.add_argument("--out", required=True, help="corpus JSONL path")
    p.set_defaults(func=cmd_curate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InstanceParseError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleScheduleError as exc:
        print(f"infeasible schedule: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except EndpointUnavailableError as exc:
        print(f"endpoint unavailable: {exc}", file=sys.stderr)
        return EXIT_UNAVAILABLE
    except _INVARIANT_ERRORS as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except DlmLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())

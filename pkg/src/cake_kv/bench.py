"""Experiment-matrix harness behind the ``cake-bench`` verbs.

Every ``cmd_*`` returns a process exit code (0 on success) so the CLI
stays a thin argparse shim and tests can call these directly.
"""

from __future__ import annotations

import csv
import logging
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import TextIO

from .config import ExperimentConfig, RunSpec
from .model import RequestSpec
from .scheduler import ClaimTable, RunReport, chunk_durations_us, one_chunk_slack, oracle_best_split, run
from .store import ChunkKey, ChunkStore, StoreError, populate, request_keys
from .transfer import ResidentSet

logger = logging.getLogger(__name__)

RESULTS_VERSION = "# cake-bench results v1"
RESULT_FIELDS = (
    "profile", "context_tokens", "chunk_size", "n_chunks", "trace", "power_fraction",
    "codec", "mode", "clock", "ttft_us", "merge_point", "computed_fraction",
    "compute_busy_us", "io_busy_us", "status",
)


@dataclass
class ResultRow:
    spec: RunSpec
    chunk_size: int
    clock: str
    n_chunks: int
    report: RunReport | None = None
    error: str = ""

    def as_dict(self) -> dict:
        s = self.spec
        row = {
            "profile": s.profile.name,
            "context_tokens": s.context_tokens,
            "chunk_size": self.chunk_size,
            "n_chunks": self.n_chunks,
            "trace": s.trace.name,
            "power_fraction": f"{s.power_fraction:g}",
            "codec": s.codec.id,
            "mode": s.mode,
            "clock": self.clock,
        }
        if self.report is None:
            row.update(ttft_us="", merge_point="", computed_fraction="",
                       compute_busy_us="", io_busy_us="", status=f"error:{self.error}")
        else:
            r = self.report
            row.update(
                ttft_us=r.ttft_us,
                merge_point=r.merge_point,
                computed_fraction=f"{r.computed_fraction:.6f}",
                compute_busy_us=r.busy_us("compute"),
                io_busy_us=r.busy_us("io"),
                status="ok",
            )
        return row


def _request(cfg: ExperimentConfig, spec: RunSpec) -> RequestSpec:
    return RequestSpec(spec.context_tokens, cfg.chunk_size, 1, spec.power_fraction)


def execute(cfg: ExperimentConfig, spec: RunSpec, clock: str | None = None) -> ResultRow:
    clock = clock or cfg.clock
    req = _request(cfg, spec)
    row = ResultRow(spec, cfg.chunk_size, clock, req.n_chunks)
    store = None
    try:
        if clock == "live":
            store = ChunkStore(cfg.store_dir(spec.profile, spec.codec), create=False)
        row.report = run(
            req, spec.profile, cfg.calibration, spec.trace, spec.codec, spec.mode,
            clock=clock, store=store, seed=cfg.seed,
            budget_per_step=cfg.budget_per_step, quantum_bytes=cfg.quantum_bytes,
            decode_us_per_mib=cfg.decode_us_per_mib,
        )
    except Exception as exc:  # recorded in the row; the matrix keeps going
        logger.error("run %s failed: %s", spec.key, exc)
        row.error = f"{type(exc).__name__}: {exc}".replace("\n", " ").replace(",", ";")
    return row


def _execute_star(args: tuple) -> ResultRow:
    return execute(*args)


def write_results(rows: list[ResultRow], dest: TextIO) -> None:
    dest.write(RESULTS_VERSION + "\n")
    w = csv.DictWriter(dest, fieldnames=RESULT_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row.as_dict())


def read_results(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != RESULTS_VERSION:
            raise ValueError(f"{path}: not a v1 results file")
        return list(csv.DictReader(fh))


def _event_log_name(spec: RunSpec) -> str:
    parts = [str(p) for p in spec.key]
    return "_".join(p.replace(":", "-").replace("/", "-") for p in parts) + ".csv"


def run_matrix(
    cfg: ExperimentConfig, clock: str | None = None, parallel: bool = False
) -> list[ResultRow]:
    clock = clock or cfg.clock
    specs = list(cfg.runs())
    if parallel and clock == "sim":
        with ProcessPoolExecutor() as pool:
            return list(pool.map(_execute_star, [(cfg, s, clock) for s in specs]))
    return [execute(cfg, s, clock) for s in specs]


def cmd_populate(cfg: ExperimentConfig, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    total = 0
    for profile in cfg.profiles:
        for codec in cfg.codecs:
            store_dir = cfg.store_dir(profile, codec)
            store = None
            before = 0
            try:
                store = ChunkStore(store_dir)
                before = store.total_encoded_bytes()
                for length in cfg.context_lengths:
                    req = RequestSpec(length, cfg.chunk_size)
                    populate(store, req, profile, cfg.seed, codec)
            except StoreError as exc:
                if store is not None:
                    total += store.total_encoded_bytes() - before
                print(f"populate failed in {store_dir}: {exc}", file=out)
                print(f"partial progress: {total} bytes written", file=out)
                return 1
            written = store.total_encoded_bytes() - before
            total += written
            print(f"{store_dir}: {len(store)} chunks, {written} bytes written", file=out)
    print(f"total bytes written: {total}", file=out)
    return 0


def cmd_bench(
    cfg: ExperimentConfig,
    clock: str | None = None,
    out_path: Path | None = None,
    verbose: bool = False,
    parallel: bool = False,
    out: TextIO | None = None,
) -> int:
    out = out or sys.stdout
    out_path = Path(out_path or cfg.out)
    rows = run_matrix(cfg, clock, parallel)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="") as fh:
        write_results(rows, fh)
    if verbose:
        ev_dir = out_path.with_suffix(".events")
        ev_dir.mkdir(exist_ok=True)
        for row in rows:
            if row.report is not None:
                row.report.write_event_log(ev_dir / _event_log_name(row.spec))
    failed = [r for r in rows if r.report is None]
    print(f"{len(rows)} runs, {len(failed)} failed -> {out_path}", file=out)
    return 1 if failed else 0


def oracle_check(cfg: ExperimentConfig, spec: RunSpec) -> tuple[int, float, float, RunReport]:
    """Run one cake instance in sim and return (ttft, ttft_star, slack, report)."""
    req = _request(cfg, spec)
    report = run(req, spec.profile, cfg.calibration, spec.trace, spec.codec, "cake",
                 seed=cfg.seed, budget_per_step=cfg.budget_per_step)
    comp, fetch = chunk_durations_us(req, spec.profile, cfg.calibration, spec.trace, spec.codec)
    _, best = oracle_best_split(comp, fetch)
    return report.ttft_us, best, one_chunk_slack(comp, fetch, report.merge_point), report


def cmd_oracle(cfg: ExperimentConfig, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    failures = 0
    checked = 0
    for spec in cfg.runs():
        if spec.mode != "cake":
            continue
        if not spec.trace.is_static:
            print(f"skip {spec.key}: oracle needs a static trace", file=out)
            continue
        ttft_us, best, slack, _ = oracle_check(cfg, spec)
        gap = ttft_us - best
        ok = gap <= slack
        failures += not ok
        checked += 1
        print(
            f"{'ok  ' if ok else 'FAIL'} {spec.profile.name} T={spec.context_tokens} "
            f"{spec.trace.name} p={spec.power_fraction:g} {spec.codec.id}: "
            f"ttft={ttft_us} oracle={best} gap={gap} slack={slack}",
            file=out,
        )
    print(f"{checked} instances, {failures} over the one-chunk slack", file=out)
    return 1 if failures else 0


def measure_decisions(n_chunks: int = 64, trials: int = 200, resident_every: int = 3) -> list[int]:
    """Per-chunk claim + residency decision latencies in nanoseconds.

    Exercises the same ClaimTable and ResidentSet objects a live run uses,
    with a third of the keys already resident, and no sleeping.
    """
    samples: list[int] = []
    keys = [ChunkKey(i.to_bytes(32, "big")) for i in range(n_chunks)]
    clock_ns = time.perf_counter_ns
    for _ in range(trials):
        table = ClaimTable(n_chunks)
        resident = ResidentSet()
        for i in range(n_chunks - 1, n_chunks - 1 - n_chunks // resident_every, -1):
            resident.add(keys[i], 0)
        for i in range(n_chunks):
            t0 = clock_ns()
            if keys[i] in resident:
                samples.append(clock_ns() - t0)
                break
            won = table.claim("compute", i, 0)
            samples.append(clock_ns() - t0)
            if not won:
                break
    return samples


OVERHEAD_BOUND_US = 100.0


def overhead_stats(n_chunks: int = 64, trials: int = 200) -> dict:
    samples = sorted(measure_decisions(n_chunks, trials))
    return {
        "samples": len(samples),
        "p50_us": statistics.median(samples) / 1000.0,
        "p99_us": samples[min(len(samples) - 1, int(0.99 * len(samples)))] / 1000.0,
    }


def cmd_overhead(cfg: ExperimentConfig | None = None, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    n_chunks = 64
    if cfg is not None:
        n_chunks = max(RequestSpec(t, cfg.chunk_size).n_chunks for t in cfg.context_lengths)
    st = overhead_stats(n_chunks)
    ok = st["p99_us"] < OVERHEAD_BOUND_US
    print(
        f"per-chunk decision over {st['samples']} samples: "
        f"p50={st['p50_us']:.2f}us p99={st['p99_us']:.2f}us "
        f"({'ok' if ok else 'over'} {OVERHEAD_BOUND_US:g}us bound)",
        file=out,
    )
    if cfg is not None:
        spec = next(s for s in cfg.runs())
        req = _request(cfg, spec)
        solo = run(req, spec.profile, cfg.calibration, spec.trace, spec.codec, "cake",
                   sides=("compute",), seed=cfg.seed, budget_per_step=cfg.budget_per_step)
        base = run(req, spec.profile, cfg.calibration, spec.trace, spec.codec, "compute_only",
                   seed=cfg.seed, budget_per_step=cfg.budget_per_step)
        same = [r.finish_us - r.start_us for r in solo.records] == [
            r.finish_us - r.start_us for r in base.records
        ]
        print(f"fetch-disabled cake steps match compute_only: {same}", file=out)
        ok = ok and same
    return 0 if ok else 1


def ensure_store(cfg: ExperimentConfig, spec: RunSpec) -> list[ChunkKey]:
    """Keys for ``spec`` after making sure its chunks are in the store."""
    store = ChunkStore(cfg.store_dir(spec.profile, spec.codec))
    req = _request(cfg, spec)
    keys = request_keys(req, cfg.seed)
    if not all(store.contains(k) for k in keys):
        populate(store, req, spec.profile, cfg.seed, spec.codec)
    return keys

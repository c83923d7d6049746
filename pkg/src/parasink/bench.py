"""Benchmark harness: output scenarios x processing configurations x threads.

Reproduces the four output strategies at desk scale: (1) classic single-writer
output, (2) the same with parallel basket compression, (3) the buffer-merger
parallel output, and (4) a dummy output as the perfectly-scalable baseline.
Each run emits container files, a stall graph (CSV + SVG), a per-module
report, and a scaling row; sweeps aggregate rows into a scaling chart.
"""

from __future__ import annotations

import enum
import os
import time
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .codec import EVENT_ID_COLUMN, FlushPolicy, decompress_basket, read_container
from .errors import ConfigurationError, VerificationError
from .events import EventGenerator, ProductSchema, Tier, WorkloadProfile
from .merger import MergerConfig
from .monitor import StallReport, build_report, write_stall_csv, write_stall_svg
from .pipeline import (
    DirectContainerSink,
    DummySink,
    MergerOutputSink,
    ModuleKind,
    ModuleSpec,
    OutputSink,
    RunReport,
    burn,
    calibrate_burn_unit_s,
    run,
)

PROCESS_MODULE = "process"
PROCESSED_MARKER = "processed"

DEFAULT_MERGER_BUFFERS: dict[Tier, int] = {Tier.RECO: 6, Tier.AOD: 6, Tier.MINIAOD: 3}

_TIER_FILE = {Tier.RECO: "reco.psnk", Tier.AOD: "aod.psnk", Tier.MINIAOD: "miniaod.psnk"}
_TIER_MODULE = {Tier.RECO: "write_reco", Tier.AOD: "write_aod", Tier.MINIAOD: "write_miniaod"}


class OutputMode(enum.Enum):
    SINGLE_THREADED = "single_threaded"
    SINGLE_THREADED_IMT = "single_threaded_imt"
    PARALLEL_MERGER_IMT = "parallel_merger_imt"
    DUMMY = "dummy"


@dataclass(frozen=True)
class ProcessingConfig:
    """One of the four benchmark output strategies."""

    config_id: int
    mode: OutputMode
    imt: bool
    merger_buffers: Mapping[Tier, int] | None = None

    def __post_init__(self):
        if self.mode is OutputMode.PARALLEL_MERGER_IMT and not self.merger_buffers:
            raise ConfigurationError("parallel merger mode requires per-tier buffer counts")

    @classmethod
    def from_id(cls, config_id: int, merger_buffers: Mapping[Tier, int] | None = None) -> "ProcessingConfig":
        buffers = dict(merger_buffers or DEFAULT_MERGER_BUFFERS)
        table = {
            1: cls(1, OutputMode.SINGLE_THREADED, imt=False),
            2: cls(2, OutputMode.SINGLE_THREADED_IMT, imt=True),
            3: cls(3, OutputMode.PARALLEL_MERGER_IMT, imt=True, merger_buffers=buffers),
            4: cls(4, OutputMode.DUMMY, imt=False),
        }
        if config_id not in table:
            raise ConfigurationError(f"config id must be 1..4, got {config_id}")
        return table[config_id]


@dataclass(frozen=True)
class OutputScenario:
    """Which output tiers a job writes (one output module per tier)."""

    tiers: tuple[Tier, ...]

    def __post_init__(self):
        if not self.tiers:
            raise ConfigurationError("scenario must include at least one tier")

    @property
    def name(self) -> str:
        short = {Tier.RECO: "reco", Tier.AOD: "aod", Tier.MINIAOD: "mini"}
        return "-".join(short[t] for t in self.tiers)

    @classmethod
    def from_name(cls, name: str) -> "OutputScenario":
        table = {
            "reco-aod-mini": (Tier.RECO, Tier.AOD, Tier.MINIAOD),
            "aod-mini": (Tier.AOD, Tier.MINIAOD),
        }
        if name not in table:
            raise ConfigurationError(f"unknown scenario {name!r}; expected one of {sorted(table)}")
        return cls(table[name])


@dataclass(frozen=True)
class BenchSettings:
    """Knobs shared by every run of an experiment."""

    flush_policy: FlushPolicy = FlushPolicy(flush_every_n_events=8)
    codec_level: int = 6
    merge_threshold_events: int = 64
    merge_threshold_bytes: int = 64 << 20
    sample_period_ms: float = 10.0
    watchdog_s: float | None = 900.0


@dataclass
class ScalingRow:
    n_threads: int
    config_id: int
    scenario: str
    wall_time_s: float
    events_per_s: float
    stall_fraction: float
    peak_buffer_bytes: int
    error: str = ""

    @staticmethod
    def csv_header() -> str:
        return "n_threads,config,scenario,wall_time_s,events_per_s,stall_fraction,peak_buffer_bytes,error"

    def to_csv_line(self) -> str:
        return (
            f"{self.n_threads},{self.config_id},{self.scenario},{self.wall_time_s:.4f},"
            f"{self.events_per_s:.3f},{self.stall_fraction:.4f},{self.peak_buffer_bytes},{self.error}"
        )


@dataclass
class BenchResult:
    row: ScalingRow
    report: RunReport
    stall: StallReport
    output_files: dict[Tier, str]


# --- default desk-scale workload ------------------------------------------


def _tier_schemas() -> list[ProductSchema]:
    # ~0.8 MiB RECO + 0.2 MiB AOD + 24 KiB MINIAOD per event; column counts
    # sized so per-basket compression dwarfs task-dispatch overhead
    schemas = []
    for i in range(100):
        schemas.append(ProductSchema(f"reco_{i:03d}", Tier.RECO, 8192, 0.4, 0.7))
    for i in range(50):
        schemas.append(ProductSchema(f"aod_{i:03d}", Tier.AOD, 4096, 0.4, 0.7))
    for i in range(12):
        schemas.append(ProductSchema(f"mini_{i:02d}", Tier.MINIAOD, 2048, 0.4, 0.7))
    return schemas


def host_threads() -> int:
    return os.cpu_count() or 1


def default_work_ratio(cores: int | None = None) -> float:
    """Processing-to-output cost ratio for the synthetic workload.

    Grows with the host's parallelism and is capped at 4x; on small hosts it
    shrinks so the single-writer output path can still become the bottleneck
    at full thread count.
    """
    cores = cores or host_threads()
    return min(4.0, max(0.4, 0.8 * cores - 1.2))


def desk_profile(
    *,
    events_total: int = 600,
    seed: int = 7,
    codec_level: int = 6,
    work_ratio: float | None = None,
    calibration_events: int = 4,
) -> WorkloadProfile:
    """The reconstruction-analogue workload: three output tiers, CPU cost
    calibrated on this host so event processing (generation + producer work)
    is ``work_ratio`` times the single-threaded output (compression) cost of
    one event.
    """
    schemas = tuple(_tier_schemas())
    profile = WorkloadProfile(schemas=schemas, events_total=max(events_total, calibration_events + 1), seed=seed)
    gen = EventGenerator(profile)
    gen.event(0)  # warm up numpy/codec paths outside the timed region
    t0 = time.perf_counter()
    sample_events = [gen.event(i + 1) for i in range(calibration_events)]
    gen_s = (time.perf_counter() - t0) / calibration_events
    t0 = time.perf_counter()
    for ev in sample_events:
        for payload in ev.products.values():
            zlib.compress(payload, codec_level)
    output_s = (time.perf_counter() - t0) / calibration_events
    burn(50)
    unit_s = calibrate_burn_unit_s()
    ratio = default_work_ratio() if work_ratio is None else work_ratio
    cpu_units = max(0, round((ratio * output_s - gen_s) / unit_s))
    return WorkloadProfile(
        schemas=schemas, events_total=events_total, seed=seed, cpu_work_per_event=cpu_units
    )


# --- module graph construction ---------------------------------------------


def tier_products(profile: WorkloadProfile, tier: Tier) -> tuple[str, ...]:
    return tuple(s.name for s in profile.schemas if s.tier is tier)


def build_modules(
    scenario: OutputScenario,
    config: ProcessingConfig,
    profile: WorkloadProfile,
    settings: BenchSettings,
    out_dir: str | Path,
) -> list[ModuleSpec]:
    """One producer plus one output module per tier, wired per the config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modules = [
        ModuleSpec(
            name=PROCESS_MODULE,
            kind=ModuleKind.PRODUCER,
            produces=frozenset({PROCESSED_MARKER}),
            cost_units=profile.cpu_work_per_event,
        )
    ]
    for tier in scenario.tiers:
        products = tier_products(profile, tier)
        if not products:
            raise ConfigurationError(f"profile has no products for tier {tier.value}")
        path = str(out_dir / _TIER_FILE[tier])
        sink: OutputSink
        limit: int | None
        if config.mode is OutputMode.DUMMY:
            sink = DummySink()
            limit = None
        elif config.mode is OutputMode.PARALLEL_MERGER_IMT:
            buffers = config.merger_buffers[tier]
            sink = MergerOutputSink(
                path,
                products,
                settings.flush_policy,
                MergerConfig(
                    buffer_count=buffers,
                    merge_threshold_bytes=settings.merge_threshold_bytes,
                    merge_threshold_events=settings.merge_threshold_events,
                ),
                codec_level=settings.codec_level,
            )
            limit = buffers
        else:
            sink = DirectContainerSink(path, products, settings.flush_policy, codec_level=settings.codec_level)
            limit = 1
        modules.append(
            ModuleSpec(
                name=_TIER_MODULE[tier],
                kind=ModuleKind.OUTPUT,
                consumes=frozenset(products) | {PROCESSED_MARKER},
                concurrency_limit=limit,
                sink=sink,
            )
        )
    return modules


# --- verification ------------------------------------------------------------


@dataclass
class FileCheck:
    path: str
    ok: bool
    total_events: int
    missing_ids: list[int]
    duplicate_ids: list[int]
    column_errors: list[str]

    def describe(self) -> str:
        if self.ok:
            return f"{self.path}: OK ({self.total_events} events)"
        parts = [f"{self.path}: FAILED"]
        if self.missing_ids:
            parts.append(f"  missing event ids: {_summarize_ids(self.missing_ids)}")
        if self.duplicate_ids:
            parts.append(f"  duplicate event ids: {_summarize_ids(self.duplicate_ids)}")
        parts.extend(f"  {e}" for e in self.column_errors)
        return "\n".join(parts)


def _summarize_ids(ids: Sequence[int], limit: int = 20) -> str:
    shown = ", ".join(str(i) for i in ids[:limit])
    return f"[{shown}{', ...' if len(ids) > limit else ''}] ({len(ids)} total)"


def verify_container_file(path: str | Path, expected_events: int) -> FileCheck:
    """Multiset-check recovered event ids and validate every basket's checksum."""
    path = str(path)
    baskets, trailer = read_container(path)
    column_errors: list[str] = []
    ids: list[int] = []
    for cb in baskets:
        try:
            basket = decompress_basket(cb)
        except Exception as exc:
            column_errors.append(f"column {cb.column_name!r}: {exc}")
            continue
        if cb.column_name == EVENT_ID_COLUMN:
            for chunk in basket.split_entries():
                ids.append(int.from_bytes(chunk, "little"))
    # per-column entry ranges must tile [0, total_events) exactly
    for name, entries in trailer.index.items():
        covered = sorted((e.first_entry, e.entry_count) for e in entries)
        pos = 0
        for first, count in covered:
            if first != pos:
                column_errors.append(
                    f"column {name!r}: entry gap/overlap at {pos} (next basket starts at {first})"
                )
                break
            pos += count
        else:
            if pos != trailer.total_events:
                column_errors.append(
                    f"column {name!r}: covers {pos} entries, file holds {trailer.total_events} events"
                )
    if trailer.total_events != expected_events:
        column_errors.append(f"trailer: {trailer.total_events} events, expected {expected_events}")
    expected = set(range(expected_events))
    got = sorted(ids)
    seen: set[int] = set()
    duplicates = []
    for i in got:
        if i in seen:
            duplicates.append(i)
        seen.add(i)
    missing = sorted(expected - seen)
    unexpected = sorted(seen - expected)
    if unexpected:
        column_errors.append(f"unexpected event ids: {_summarize_ids(unexpected)}")
    ok = not missing and not duplicates and not column_errors
    return FileCheck(
        path=path,
        ok=ok,
        total_events=trailer.total_events,
        missing_ids=missing,
        duplicate_ids=duplicates,
        column_errors=column_errors,
    )


def verify_outputs(files: Iterable[str | Path], expected_events: int) -> list[FileCheck]:
    return [verify_container_file(p, expected_events) for p in files]


def files_byte_identical(a: str | Path, b: str | Path) -> bool:
    return Path(a).read_bytes() == Path(b).read_bytes()


# --- running -------------------------------------------------------------------


def run_config(
    scenario: OutputScenario,
    config: ProcessingConfig,
    profile: WorkloadProfile,
    n_threads: int,
    out_dir: str | Path,
    settings: BenchSettings | None = None,
    *,
    n_streams: int | None = None,
    verify: bool = True,
    emit_artifacts: bool = True,
) -> BenchResult:
    """One measured run; verifies output completeness before reporting."""
    settings = settings or BenchSettings()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modules = build_modules(scenario, config, profile, settings, out_dir)
    events = EventGenerator(profile)
    report = run(
        iter(events),
        modules,
        n_threads=n_threads,
        n_streams=n_streams,
        imt=config.imt,
        isolation=True,
        source_products=profile.product_names,
        sample_period_ms=settings.sample_period_ms,
        watchdog_s=settings.watchdog_s,
    )
    stall = build_report(report.samples, n_threads, limits=report.limits)
    files = {
        tier: report.output_files[_TIER_MODULE[tier]]
        for tier in scenario.tiers
        if _TIER_MODULE[tier] in report.output_files
    }
    if verify and config.mode is not OutputMode.DUMMY:
        checks = verify_outputs(files.values(), profile.events_total)
        bad = [c for c in checks if not c.ok]
        if bad:
            raise VerificationError("\n".join(c.describe() for c in bad))
    row = ScalingRow(
        n_threads=n_threads,
        config_id=config.config_id,
        scenario=scenario.name,
        wall_time_s=report.wall_s,
        events_per_s=profile.events_total / report.wall_s if report.wall_s > 0 else 0.0,
        stall_fraction=stall.stall_fraction,
        peak_buffer_bytes=report.peak_buffer_bytes,
    )
    if emit_artifacts:
        tag = f"c{config.config_id}_t{n_threads}"
        with open(out_dir / f"stall_{tag}.csv", "w", encoding="utf-8") as fh:
            write_stall_csv(stall, fh)
        with open(out_dir / f"stall_{tag}.svg", "w", encoding="utf-8") as fh:
            write_stall_svg(stall, fh)
        with open(out_dir / f"report_{tag}.csv", "w", encoding="utf-8") as fh:
            report.to_csv(fh)
        if report.merge_stats:
            with open(out_dir / f"merges_{tag}.csv", "w", encoding="utf-8") as fh:
                fh.write("module,merges,merge_time_total_s,events,peak_buffer_bytes,tail_events\n")
                for name, ms in sorted(report.merge_stats.items()):
                    tail = "|".join(str(n) for n in ms.tail_events_per_buffer)
                    fh.write(
                        f"{name},{ms.merges},{ms.merge_time_total_s:.4f},{ms.events_written},"
                        f"{ms.peak_buffer_bytes},{tail}\n"
                    )
    return BenchResult(row=row, report=report, stall=stall, output_files=files)


def sweep(
    scenario: OutputScenario,
    configs: Sequence[ProcessingConfig],
    thread_list: Sequence[int],
    profile: WorkloadProfile,
    out_dir: str | Path,
    settings: BenchSettings | None = None,
) -> list[ScalingRow]:
    """Run the full matrix; partial failures are recorded per row."""
    settings = settings or BenchSettings()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[ScalingRow] = []
    for n_threads in thread_list:
        for config in configs:
            sub = out_dir / f"c{config.config_id}_t{n_threads}"
            try:
                result = run_config(scenario, config, profile, n_threads, sub, settings)
                rows.append(result.row)
            except Exception as exc:
                rows.append(
                    ScalingRow(
                        n_threads=n_threads,
                        config_id=config.config_id,
                        scenario=scenario.name,
                        wall_time_s=0.0,
                        events_per_s=0.0,
                        stall_fraction=0.0,
                        peak_buffer_bytes=0,
                        error=str(exc).replace("\n", "; ").replace(",", ";"),
                    )
                )
    with open(out_dir / "scaling.csv", "w", encoding="utf-8") as fh:
        fh.write(ScalingRow.csv_header() + "\n")
        for row in rows:
            fh.write(row.to_csv_line() + "\n")
    with open(out_dir / "scaling.svg", "w", encoding="utf-8") as fh:
        fh.write(scaling_chart_svg(rows))
    return rows


_CONFIG_COLORS = {1: "#1565c0", 2: "#2e7d32", 3: "#e65100", 4: "#6a1b9a"}
_CONFIG_LABELS = {
    1: "1: single-threaded",
    2: "2: single-threaded + parallel compression",
    3: "3: parallel merger",
    4: "4: dummy output",
}


def scaling_chart_svg(rows: Sequence[ScalingRow]) -> str:
    """Throughput vs. thread count, one curve per processing configuration."""
    w, h, pad = 1000, 300, 45
    good = [r for r in rows if not r.error]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" width="{w}" height="{h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
    ]
    if good:
        x_max = max(r.n_threads for r in good)
        y_max = max(r.events_per_s for r in good) or 1.0

        def x(v: float) -> float:
            return pad + (w - 2 * pad) * v / max(x_max, 1)

        def y(v: float) -> float:
            return h - pad - (h - 2 * pad) * v / y_max

        parts.append(
            f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="#444"/>'
        )
        parts.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="#444"/>')
        parts.append(
            f'<text x="{w // 2}" y="{h - 8}" font-size="12" text-anchor="middle">threads</text>'
        )
        parts.append(
            f'<text x="12" y="{h // 2}" font-size="12" transform="rotate(-90 12 {h // 2})" '
            f'text-anchor="middle">events/s</text>'
        )
        by_config: dict[int, list[ScalingRow]] = {}
        for r in good:
            by_config.setdefault(r.config_id, []).append(r)
        for idx, (config_id, config_rows) in enumerate(sorted(by_config.items())):
            config_rows.sort(key=lambda r: r.n_threads)
            color = _CONFIG_COLORS.get(config_id, "#000")
            pts = " ".join(f"{x(r.n_threads):.2f},{y(r.events_per_s):.2f}" for r in config_rows)
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
            for r in config_rows:
                parts.append(
                    f'<circle cx="{x(r.n_threads):.2f}" cy="{y(r.events_per_s):.2f}" r="3" fill="{color}"/>'
                )
            ly = pad + 16 * idx
            parts.append(f'<rect x="{w - pad - 270}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
            parts.append(
                f'<text x="{w - pad - 255}" y="{ly}" font-size="11">'
                f"{_CONFIG_LABELS.get(config_id, str(config_id))}</text>"
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

"""Benchmark harness: vanilla vs enclave hosting of identical pages.

Runs the same host program twice on one vault, once inside the
simulated enclave and once on the plain runtime, then measures TTFB
and TTLB for every (mode, page size, variant) cell:

 - RandomRelays: a fresh simulated circuit per load, reconnect each time;
 - FixedRelays: loads_per_page loads on each of fixed_circuits pinned
   circuits, channel reused per circuit;
 - Local: loopback, zero hops, channel reused.

Per-hop latency here defaults to 5..15 ms rather than the transport
module's wide-area default, trading realism for a grid that completes
in well under half an hour; the plan records whatever was used.

Provider activity (one bootstrap plus `updates` content updates,
interleaved between mode phases) is tracked so the report can state
the provider's total online exposure against the run's wall time.

Simulated latency for each measurement connection is derived from the
plan seed and the connection's (mode, size, index) slot, never drawn
from a shared stream: the same plan reproduces identical traces, and
the two variants of a cell ride identical circuits, so their delta
reflects service-path cost rather than circuit luck.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import random
import shutil
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from scipy import stats as _scipy_stats

from . import transport
from .client import FetchChannel, PinStore
from .errors import TeevaultError
from .provider import bootstrap, create_profile, update_content
from .vault import VaultConfig, VaultDaemon

VARIANTS = ("vanilla", "enclave")
DEFAULT_MODES = ("RandomRelays", "FixedRelays", "Local")

CHANNEL_POLICY = {
    "RandomRelays": "reconnect_per_load",
    "FixedRelays": "reuse_per_circuit",
    "Local": "reuse",
}

CSV_COLUMNS = ("mode", "size", "variant", "iteration", "ttfb_ms", "ttlb_ms")


@dataclass(frozen=True)
class BenchPlan:
    page_sizes_bytes: tuple = (512, 51200, 5120000)
    loads_per_page: int = 250
    fixed_circuits: int = 3
    modes: tuple = DEFAULT_MODES
    seed: int = 20240901
    hops: int = 6
    latency_min_ms: float = 5.0
    latency_max_ms: float = 15.0
    jitter_ms: float = 1.0
    updates: int = 2

    def __post_init__(self):
        if self.loads_per_page < 2:
            raise TeevaultError("loads_per_page must be at least 2")
        if not self.page_sizes_bytes or any(s <= 0 for s in self.page_sizes_bytes):
            raise TeevaultError("page sizes must be strictly positive")
        bad = set(self.modes) - set(DEFAULT_MODES)
        if bad:
            raise TeevaultError(f"unknown modes: {sorted(bad)}")
        if self.fixed_circuits < 1:
            raise TeevaultError("fixed_circuits must be at least 1")
        if self.updates < 0:
            raise TeevaultError("updates must be non-negative")

    def to_json(self) -> str:
        data = asdict(self)
        data["page_sizes_bytes"] = list(self.page_sizes_bytes)
        data["modes"] = list(self.modes)
        return json.dumps(data, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchPlan":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise TeevaultError("bench plan must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise TeevaultError(f"unknown bench plan keys: {sorted(unknown)}")
        for key in ("page_sizes_bytes", "modes"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def circuit_profile(self, mode: str) -> transport.CircuitProfile:
        if mode == "Local":
            return transport.CircuitProfile.local()
        return transport.CircuitProfile(
            mode=mode,
            hops=self.hops,
            min_ms=self.latency_min_ms,
            max_ms=self.latency_max_ms,
            jitter_ms=self.jitter_ms,
        )


def mean_ci(samples, level: float = 0.99):
    """Sample mean and Student-t half-width at the given level."""
    n = len(samples)
    m = statistics.fmean(samples)
    if n < 2:
        return m, float("nan")
    s = statistics.stdev(samples)
    half = float(_scipy_stats.t.ppf(0.5 + level / 2.0, n - 1)) * s / math.sqrt(n)
    return m, half


def _page_bytes(seed: int, size: int) -> bytes:
    return random.Random((seed << 8) ^ size).randbytes(size)


@dataclass
class _CellResult:
    mode: str
    size: int
    variant: str
    valid: bool = True
    reason: Optional[str] = None
    ttfb: list = field(default_factory=list)
    ttlb: list = field(default_factory=list)
    connect: list = field(default_factory=list)
    latency_trace: list = field(default_factory=list)
    body_hashes: set = field(default_factory=set)


class _Runner:
    def __init__(self, plan: BenchPlan, progress=None):
        self.plan = plan
        self.rng = random.Random(plan.seed)
        self.progress = progress or (lambda msg: None)
        self.registry = transport.Registry()
        self._workdir = Path(tempfile.mkdtemp(prefix="bench-vault-"))
        self.vault = VaultDaemon(
            VaultConfig(
                storage_root=str(self._workdir),
                bandwidth_bytes_per_sec=float(1 << 30),
                ram_limit_bytes=256 * 1024 * 1024,
                disk_limit_bytes=256 * 1024 * 1024,
                backup_interval_seconds=None,
            ),
            self.registry,
        )
        self.pages = {
            f"/page-{size}.bin": _page_bytes(plan.seed, size)
            for size in plan.page_sizes_bytes
        }
        self.expected_hash = {
            size: hashlib.sha256(self.pages[f"/page-{size}.bin"]).hexdigest()
            for size in plan.page_sizes_bytes
        }
        self.profiles = {}
        self.ads = {}
        self.pins = PinStore()
        self.fetch_count = 0
        self.fetch_phases = []
        self.updates_done = 0

    def close(self):
        self.vault.close()
        shutil.rmtree(self._workdir, ignore_errors=True)

    # --- provider activity ----------------------------------------------------

    def bootstrap_both(self):
        vchs = self.vault.advertise_vchs()
        secret = b"bench-shared-secret"
        circuit = self._provider_circuit()
        for variant in VARIANTS:
            profile = create_profile(secret, vault_vchs=vchs, attest=(variant == "enclave"))
            ad = bootstrap(
                profile, self.registry, content=dict(self.pages),
                circuit=circuit, rng=self.rng,
            )
            self.profiles[variant] = profile
            self.ads[variant] = ad
            self.pins.import_advertisement(ad)
            self.progress(f"bootstrapped {variant} at {ad.onion_url}")

    def _provider_circuit(self) -> transport.CircuitProfile:
        # provider sessions ride the same simulated network as clients
        if "Local" in self.plan.modes and len(self.plan.modes) == 1:
            return transport.CircuitProfile.local()
        return self.plan.circuit_profile("RandomRelays")

    def maybe_update(self):
        if self.updates_done >= self.plan.updates:
            return
        self.updates_done += 1
        marker = f"update {self.updates_done} at {time.time():.3f}".encode()
        update_content(
            self.profiles["enclave"],
            self.registry,
            [("upload", f"/updates/marker-{self.updates_done}.txt", marker)],
            circuit=self._provider_circuit(),
            rng=self.rng,
        )
        self.progress(f"provider update {self.updates_done} applied")

    # --- measurement ----------------------------------------------------------

    def run_cell(self, mode: str, size: int, variant: str) -> _CellResult:
        cell = _CellResult(mode, size, variant)
        path = f"/page-{size}.bin"
        onion = self.ads[variant].onion_url
        try:
            if mode == "RandomRelays":
                # fresh circuit and fresh channel for every load
                profile = self.plan.circuit_profile(mode)
                for i in range(self.plan.loads_per_page):
                    with self._open(cell, onion, profile, mode, size, i) as chan:
                        self._record(cell, chan.get(path))
            elif mode == "FixedRelays":
                # each profile instance pins one circuit; channel reused on it
                for k in range(self.plan.fixed_circuits):
                    profile = self.plan.circuit_profile(mode)
                    with self._open(cell, onion, profile, mode, size, k) as chan:
                        for _ in range(self.plan.loads_per_page):
                            self._record(cell, chan.get(path))
            else:  # Local
                profile = self.plan.circuit_profile(mode)
                with self._open(cell, onion, profile, mode, size, 0) as chan:
                    for _ in range(self.plan.loads_per_page):
                        self._record(cell, chan.get(path))
        except Exception as exc:  # any fetch failure voids the cell
            cell.valid = False
            cell.reason = f"{type(exc).__name__}: {exc}"
            return cell
        if cell.body_hashes != {self.expected_hash[size]}:
            cell.valid = False
            cell.reason = "served body did not match the uploaded page"
        return cell

    def _paired_rng(self, mode: str, size: int, index: int) -> random.Random:
        # Derived per connection slot, not drawn from the master stream:
        # vanilla and enclave ride identical circuits and jitter, so their
        # difference is service-path cost rather than circuit luck.
        token = f"{self.plan.seed}/{mode}/{size}/{index}".encode()
        return random.Random(int.from_bytes(hashlib.sha256(token).digest()[:8], "big"))

    def _open(
        self, cell: _CellResult, onion: str, profile, mode: str, size: int, index: int
    ) -> FetchChannel:
        rng = self._paired_rng(mode, size, index)
        chan = FetchChannel.open(self.registry, onion, self.pins, profile, rng=rng)
        # one trace entry per circuit draw; identical across same-seed runs
        cell.latency_trace.append(chan.session.circuit_one_way_ms)
        return chan

    def _record(self, cell: _CellResult, result):
        cell.ttfb.append(result.ttfb_ms)
        cell.ttlb.append(result.ttlb_ms)
        cell.connect.append(result.connect_ms)
        cell.body_hashes.add(result.body_sha256)
        self.fetch_count += 1

    def run(self) -> dict:
        started = time.time()
        self.bootstrap_both()
        cells = []
        for mode in self.plan.modes:
            phase_start = time.time()
            for size in self.plan.page_sizes_bytes:
                for variant in VARIANTS:
                    self.progress(f"cell {mode}/{size}/{variant}")
                    cells.append(self.run_cell(mode, size, variant))
            self.fetch_phases.append([phase_start, time.time()])
            self.maybe_update()
        while self.updates_done < self.plan.updates:
            self.maybe_update()
        finished = time.time()
        return self._report(cells, started, finished)

    # --- reporting --------------------------------------------------------------

    def _report(self, cells, started, finished) -> dict:
        cell_rows = []
        by_key = {}
        for cell in cells:
            row = {
                "mode": cell.mode,
                "size": cell.size,
                "variant": cell.variant,
                "valid": cell.valid,
                "n": len(cell.ttfb),
            }
            if cell.valid:
                for name, samples in (
                    ("ttfb_ms", cell.ttfb),
                    ("ttlb_ms", cell.ttlb),
                    ("connect_ms", cell.connect),
                ):
                    mean, ci = mean_ci(samples)
                    row[name] = {"mean": mean, "ci99": ci}
                row["body_sha256"] = next(iter(cell.body_hashes))
            else:
                row["reason"] = cell.reason
            cell_rows.append(row)
            by_key[(cell.mode, cell.size, cell.variant)] = row

        overheads = []
        for mode in self.plan.modes:
            for size in self.plan.page_sizes_bytes:
                vanilla = by_key.get((mode, size, "vanilla"))
                enclave = by_key.get((mode, size, "enclave"))
                if not (vanilla and enclave and vanilla["valid"] and enclave["valid"]):
                    continue
                entry = {"mode": mode, "size": size}
                for metric in ("ttfb_ms", "ttlb_ms"):
                    v, e = vanilla[metric], enclave[metric]
                    if v["mean"] > 0:
                        entry[metric.replace("_ms", "_overhead_percent")] = (
                            (e["mean"] - v["mean"]) / v["mean"] * 100.0
                        )
                    # Can a reader attribute the difference to noise?
                    # True when the gap is inside the two 99% CIs.
                    entry[metric.replace("_ms", "_difference_within_cis")] = (
                        abs(e["mean"] - v["mean"]) <= e["ci99"] + v["ci99"]
                    )
                overheads.append(entry)

        profile = self.profiles.get("enclave")
        online = sum(end - start for start, end in profile.uptime_log) if profile else 0.0
        wall = finished - started
        report = {
            "plan": json.loads(self.plan.to_json()),
            "meta": {
                "started": started,
                "finished": finished,
                "wall_seconds": wall,
                "channel_policy": dict(CHANNEL_POLICY),
                "ci_level": 0.99,
                "ci_estimator": "student-t",
            },
            "cells": cell_rows,
            "overheads": overheads,
            "raw": {
                cell_key_str(c.mode, c.size, c.variant): {
                    "ttfb_ms": c.ttfb,
                    "ttlb_ms": c.ttlb,
                    "latency_trace_ms": c.latency_trace,
                }
                for c in cells
            },
            "uptime": {
                "intervals": len(profile.uptime_log) if profile else 0,
                "intervals_log": list(profile.uptime_log) if profile else [],
                "online_seconds": online,
                "wall_seconds": wall,
                "online_fraction": (online / wall) if wall > 0 else 0.0,
                "fetch_count": self.fetch_count,
                "fetch_phases": self.fetch_phases,
                "bootstraps": 1,
                "updates": self.updates_done,
            },
            "invalid": [
                {"mode": c.mode, "size": c.size, "variant": c.variant, "reason": c.reason}
                for c in cells
                if not c.valid
            ],
        }
        return report


def cell_key_str(mode: str, size: int, variant: str) -> str:
    return f"{mode}/{size}/{variant}"


def run_pair(plan: BenchPlan, out_dir=None, progress=None) -> dict:
    """Execute the full grid and return the report dict; when out_dir
    is given, also write raw.csv, report.json, and summary.txt."""
    runner = _Runner(plan, progress)
    try:
        report = runner.run()
    finally:
        runner.close()
    if out_dir is not None:
        write_outputs(report, out_dir)
    return report


def write_outputs(report: dict, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    with (out / "raw.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for key, samples in report["raw"].items():
            mode, size, variant = key.split("/")
            for i, (ttfb, ttlb) in enumerate(zip(samples["ttfb_ms"], samples["ttlb_ms"])):
                writer.writerow([mode, size, variant, i, f"{ttfb:.3f}", f"{ttlb:.3f}"])
    (out / "summary.txt").write_text(format_summary(report), encoding="utf-8")


def format_summary(report: dict) -> str:
    """Plain-text panels, one block per mode, sizes as rows."""
    by_key = {
        (c["mode"], c["size"], c["variant"]): c for c in report["cells"]
    }
    overhead = {(o["mode"], o["size"]): o for o in report["overheads"]}
    plan = report["plan"]
    lines = []
    lines.append("benchmark summary: vanilla vs enclave hosting")
    lines.append(
        f"loads per page: {plan['loads_per_page']}  "
        f"fixed circuits: {plan['fixed_circuits']}  seed: {plan['seed']}"
    )
    lines.append(f"wall time: {report['meta']['wall_seconds']:.1f}s  "
                 f"fetches: {report['uptime']['fetch_count']}")
    lines.append("means with 99% confidence half-widths, milliseconds")
    for mode in plan["modes"]:
        lines.append("")
        lines.append(f"=== {mode} ({report['meta']['channel_policy'][mode]}) ===")
        header = (
            f"{'size':>9}  {'metric':<7} {'vanilla':>18} {'enclave':>18} "
            f"{'overhead%':>9}  {'within CIs':>10}"
        )
        lines.append(header)
        for size in plan["page_sizes_bytes"]:
            for metric in ("ttfb_ms", "ttlb_ms"):
                vanilla = by_key.get((mode, size, "vanilla"))
                enclave = by_key.get((mode, size, "enclave"))
                if not vanilla or not enclave:
                    continue
                if not (vanilla["valid"] and enclave["valid"]):
                    lines.append(f"{size:>9}  {metric:<7} {'INVALID':>18}")
                    continue
                o = overhead.get((mode, size), {})
                pct = o.get(metric.replace("_ms", "_overhead_percent"))
                within = o.get(metric.replace("_ms", "_difference_within_cis"))
                pct_str = "     n/a " if pct is None else f"{pct:>8.2f}%"
                lines.append(
                    f"{size:>9}  {metric:<7} "
                    f"{vanilla[metric]['mean']:>10.2f} ±{vanilla[metric]['ci99']:>6.2f} "
                    f"{enclave[metric]['mean']:>10.2f} ±{enclave[metric]['ci99']:>6.2f} "
                    f"{pct_str} "
                    f"{'yes' if within else 'no':>10}"
                )
    up = report["uptime"]
    lines.append("")
    lines.append("provider exposure")
    lines.append(
        f"  connection intervals: {up['intervals']} "
        f"(1 bootstrap + {up['updates']} updates)"
    )
    lines.append(
        f"  online: {up['online_seconds']:.2f}s of {up['wall_seconds']:.1f}s wall "
        f"({up['online_fraction'] * 100:.3f}%)"
    )
    lines.append(f"  client fetches served: {up['fetch_count']}")
    if report["invalid"]:
        lines.append("")
        lines.append("INVALID cells:")
        for item in report["invalid"]:
            lines.append(f"  {item['mode']}/{item['size']}/{item['variant']}: {item['reason']}")
    return "\n".join(lines) + "\n"


def uptime_exposure(report: dict) -> dict:
    """Extract and sanity-check the uptime story of a finished run:
    the interval count must equal bootstraps plus updates, and no
    provider interval may overlap a fetch-only phase."""
    up = report["uptime"]
    expected = up["bootstraps"] + up["updates"]
    if up["intervals"] != expected:
        raise TeevaultError(
            f"expected {expected} provider intervals, found {up['intervals']}"
        )
    for lo, hi in up["intervals_log"]:
        for p_lo, p_hi in up["fetch_phases"]:
            if lo < p_hi and hi > p_lo:
                raise TeevaultError(
                    "provider interval overlaps a fetch-only phase"
                )
    return {
        "online_seconds": up["online_seconds"],
        "intervals": up["intervals"],
        "fetch_count": up["fetch_count"],
        "online_fraction": up["online_fraction"],
    }

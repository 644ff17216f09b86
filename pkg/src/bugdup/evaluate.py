"""Recall@n evaluation of duplicate retrieval and creation-date analysis.

A query succeeds when the child's canonical parent appears among the top n
returned reports. Siblings returned in place of the parent earn nothing.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import BugReport, CorpusSplit, DupOrgMap, PathLike
from .embed import DimensionMismatchError, EmbeddingError, EmbeddingVector
from .index import DateWindow, SearchIndex

logger = logging.getLogger(__name__)

#: 1, then 5 through 500 in steps of 5.
DEFAULT_N_GRID: tuple[int, ...] = (1,) + tuple(range(5, 501, 5))

#: Default lookback windows in days per dataset.
SEARCH_LIMIT_DAYS: dict[str, int] = {
    "Firefox": 1080,
    "Eclipse": 720,
    "MozillaCore": 900,
    "JDT": 720,
    "Thunderbird": 1440,
}

REPORT_COLUMNS = ("dataset", "model", "window_days", "n", "recall", "query_count", "unresolvable_count")

Embedder = Callable[[BugReport], EmbeddingVector]


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class QueryOutcome:
    child_id: int
    expected_parent_id: int
    returned_ids: tuple[int, ...]
    hit_rank: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "returned_ids", tuple(self.returned_ids))
        if self.hit_rank is None:
            try:
                rank = self.returned_ids.index(self.expected_parent_id) + 1
            except ValueError:
                rank = None
            object.__setattr__(self, "hit_rank", rank)
        elif self.returned_ids[self.hit_rank - 1] != self.expected_parent_id:
            raise ValueError(f"hit_rank {self.hit_rank} does not point at the expected parent")


def recall_at(outcomes: Sequence[QueryOutcome], n: int) -> float:
    """Fraction of outcomes whose parent was ranked within the top ``n``."""
    if not outcomes:
        raise UndefinedMetricError("recall is undefined without any scored query")
    hits = sum(1 for o in outcomes if o.hit_rank is not None and o.hit_rank <= n)
    return hits / len(outcomes)


@dataclass
class RecallReport:
    dataset: str
    model: str
    window_days: int | None
    points: list[tuple[int, float]]
    query_count: int
    unresolvable_count: int = 0

    def recall(self, n: int) -> float:
        for point_n, value in self.points:
            if point_n == n:
                return value
        raise KeyError(f"no recall point at n={n}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["points"] = [[n, r] for n, r in self.points]
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "RecallReport":
        return cls(
            dataset=data["dataset"],
            model=data["model"],
            window_days=data["window_days"],
            points=[(int(n), float(r)) for n, r in data["points"]],
            query_count=int(data["query_count"]),
            unresolvable_count=int(data["unresolvable_count"]),
        )


def recall_curve(
    outcomes: Sequence[QueryOutcome],
    n_values: Sequence[int] | None = None,
    *,
    dataset: str = "",
    model: str = "",
    window_days: int | None = None,
    unresolvable_count: int = 0,
) -> RecallReport:
    n_values = list(DEFAULT_N_GRID if n_values is None else n_values)
    if any(b <= a for a, b in zip(n_values, n_values[1:])) or (n_values and n_values[0] <= 0):
        raise ValueError("n_values must be positive and strictly increasing")
    if not outcomes:
        raise UndefinedMetricError("recall is undefined without any scored query")
    # One pass over hit ranks instead of one scan per n.
    ranks = np.sort([o.hit_rank for o in outcomes if o.hit_rank is not None])
    hits = np.searchsorted(ranks, n_values, side="right")
    points = [(int(n), int(h) / len(outcomes)) for n, h in zip(n_values, hits)]
    return RecallReport(dataset, model, window_days, points, len(outcomes), unresolvable_count)


@dataclass
class EvaluationRun:
    outcomes: list[QueryOutcome]
    unresolvable_ids: list[int] = field(default_factory=list)
    failed_ids: list[int] = field(default_factory=list)
    window_days: int | None = None

    def report(self, n_values: Sequence[int] | None = None, dataset: str = "", model: str = "") -> RecallReport:
        return recall_curve(
            self.outcomes,
            n_values,
            dataset=dataset,
            model=model,
            window_days=self.window_days,
            unresolvable_count=len(self.unresolvable_ids),
        )


@dataclass
class _EmbeddedQueries:
    child_ids: list[int]
    parents: list[int]
    dates: list
    probes: object  # CSR matrix or list of EmbeddingVector
    unresolvable_ids: list[int]
    failed_ids: list[int]


def _embed_queries(
    split: CorpusSplit,
    dup_map: DupOrgMap,
    index: SearchIndex,
    embedder: Embedder,
    reports: Mapping[int, BugReport],
) -> _EmbeddedQueries:
    indexed = set(index.ids.tolist())
    scored, unresolvable = [], list(sorted(split.unresolvable_ids))
    for child in sorted(split.test_ids):
        if dup_map[child] in indexed and child in reports:
            scored.append(child)
        else:
            unresolvable.append(child)
    failed: list[int] = []
    if hasattr(embedder, "embed_many"):
        probes = embedder.embed_many([reports[c] for c in scored])
    else:
        vectors, kept = [], []
        for child in scored:
            try:
                vectors.append(embedder(reports[child]))
                kept.append(child)
            except DimensionMismatchError:
                raise
            except EmbeddingError as exc:
                logger.warning("embedding failed for report %d: %s", child, exc)
                failed.append(child)
        scored, probes = kept, vectors
    return _EmbeddedQueries(
        child_ids=scored,
        parents=[dup_map[c] for c in scored],
        dates=[reports[c].created_at for c in scored],
        probes=probes,
        unresolvable_ids=sorted(unresolvable),
        failed_ids=failed,
    )


def _run_queries(
    queries: _EmbeddedQueries,
    index: SearchIndex,
    n_max: int,
    window_days: int | None,
    workers: int | None,
) -> EvaluationRun:
    count = len(queries.child_ids)
    windows = [DateWindow(d, window_days) if window_days else None for d in queries.dates]
    chunk = 256
    starts = list(range(0, count, chunk))

    def work(start: int):
        return index.query_batch(queries.probes[start:start + chunk], n_max, windows[start:start + chunk])

    workers = workers or os.cpu_count() or 1
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(work, starts))
    else:
        blocks = [work(s) for s in starts]
    results = [r for block in blocks for r in block]
    outcomes = [
        QueryOutcome(child, parent, tuple(result.ids))
        for child, parent, result in zip(queries.child_ids, queries.parents, results)
    ]
    outcomes.sort(key=lambda o: o.child_id)
    return EvaluationRun(outcomes, list(queries.unresolvable_ids), list(queries.failed_ids), window_days)


def run_evaluation(
    split: CorpusSplit,
    dup_map: DupOrgMap,
    index: SearchIndex,
    embedder: Embedder,
    reports: Mapping[int, BugReport] | Iterable[BugReport],
    n_max: int = 500,
    window_days: int | None = None,
    workers: int | None = None,
) -> EvaluationRun:
    """Query the index with every test report and record where its parent ranked.

    Test reports whose canonical parent is not indexed are counted as
    unresolvable; embedding failures are counted as failed. Neither enters
    the recall denominator.
    """
    reports = _as_mapping(reports)
    queries = _embed_queries(split, dup_map, index, embedder, reports)
    return _run_queries(queries, index, n_max, window_days, workers)


def windowed_comparison(
    split: CorpusSplit,
    dup_map: DupOrgMap,
    index: SearchIndex,
    embedder: Embedder,
    reports: Mapping[int, BugReport] | Iterable[BugReport],
    lookback_days: int,
    n_values: Sequence[int] | None = None,
    *,
    dataset: str = "",
    model: str = "",
    workers: int | None = None,
) -> tuple[RecallReport, RecallReport]:
    """Recall curves without and with a lookback window, over the same queries."""
    if lookback_days <= 0:
        raise ValueError("lookback_days must be positive")
    n_values = list(DEFAULT_N_GRID if n_values is None else n_values)
    reports = _as_mapping(reports)
    queries = _embed_queries(split, dup_map, index, embedder, reports)
    plain = _run_queries(queries, index, n_values[-1], None, workers)
    windowed = _run_queries(queries, index, n_values[-1], lookback_days, workers)
    return plain.report(n_values, dataset, model), windowed.report(n_values, dataset, model)


def pooled_report(reports: Sequence[RecallReport], model: str = "") -> RecallReport:
    """Micro-average several per-dataset curves (weights = query counts)."""
    if not reports:
        raise UndefinedMetricError("nothing to pool")
    grid = [n for n, _ in reports[0].points]
    if any([n for n, _ in r.points] != grid for r in reports):
        raise ValueError("reports must share one n grid")
    total = sum(r.query_count for r in reports)
    if total == 0:
        raise UndefinedMetricError("recall is undefined without any scored query")
    points = []
    for i, n in enumerate(grid):
        hits = sum(round(r.points[i][1] * r.query_count) for r in reports)
        points.append((n, hits / total))
    windows = {r.window_days for r in reports}
    return RecallReport(
        dataset="pooled",
        model=model or "+".join(sorted({r.model for r in reports})),
        window_days=windows.pop() if len(windows) == 1 else None,
        points=points,
        query_count=total,
        unresolvable_count=sum(r.unresolvable_count for r in reports),
    )


def _as_mapping(reports) -> Mapping[int, BugReport]:
    if isinstance(reports, Mapping):
        return reports
    return {r.id: r for r in reports}


# -- creation-date deltas -----------------------------------------------------

def nearest_rank(values: Sequence[int], p: float) -> int:
    """Nearest-rank percentile, ``p`` in (0, 100]."""
    if not values:
        raise UndefinedMetricError("percentile of an empty sample")
    if not 0 < p <= 100:
        raise ValueError("p must lie in (0, 100]")
    ordered = sorted(values)
    rank = math.ceil(Fraction(str(p)) / 100 * len(ordered))
    return ordered[max(rank, 1) - 1]


@dataclass
class DateDeltaStats:
    """Child-minus-parent creation-date gaps, in days, keyed by child id."""

    deltas: dict[int, int]
    skipped: int = 0
    bin_width: int = 30

    @property
    def negative(self) -> dict[int, int]:
        return {c: d for c, d in self.deltas.items() if d < 0}

    @property
    def negative_count(self) -> int:
        return sum(1 for d in self.deltas.values() if d < 0)

    def percentile(self, p: float) -> int:
        return nearest_rank(list(self.deltas.values()), p)

    def histogram(self, bin_width: int | None = None) -> list[tuple[int, int, int]]:
        """Half-open ``[start, end)`` bins over the non-negative deltas."""
        width = bin_width or self.bin_width
        values = [d for d in self.deltas.values() if d >= 0]
        if not values:
            return []
        counts = np.bincount(np.asarray(values) // width)
        return [(i * width, (i + 1) * width, int(c)) for i, c in enumerate(counts)]

    def share_at_least(self, days: int) -> float:
        if not self.deltas:
            raise UndefinedMetricError("no deltas")
        return sum(1 for d in self.deltas.values() if d >= days) / len(self.deltas)


def date_delta_analysis(
    reports: Mapping[int, BugReport] | Iterable[BugReport],
    dup_map: DupOrgMap,
    bin_width: int = 30,
) -> DateDeltaStats:
    reports = _as_mapping(reports)
    deltas, skipped = {}, 0
    for child, parent in sorted(dup_map.items()):
        if child not in reports or parent not in reports:
            skipped += 1
            continue
        deltas[child] = (reports[child].created_at - reports[parent].created_at).days
    if skipped:
        logger.info("date analysis skipped %d map entries with missing reports", skipped)
    return DateDeltaStats(deltas, skipped, bin_width)


# -- output -------------------------------------------------------------------

def _write_text(path: PathLike, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def report_rows(report: RecallReport) -> list[dict]:
    return [
        {
            "dataset": report.dataset,
            "model": report.model,
            "window_days": "" if report.window_days is None else report.window_days,
            "n": n,
            "recall": repr(float(value)),
            "query_count": report.query_count,
            "unresolvable_count": report.unresolvable_count,
        }
        for n, value in sorted(report.points)
    ]


def emit_report(
    reports: RecallReport | Sequence[RecallReport],
    path: PathLike,
    format: str = "csv",
    header_line: str | None = None,
) -> None:
    """Write one or more recall reports as CSV rows or a JSON document."""
    if isinstance(reports, RecallReport):
        reports = [reports]
    if format not in ("csv", "json"):
        raise ValueError(f"unsupported report format {format!r}")
    if all(not r.points for r in reports):
        logger.warning("writing a recall report without any points")
    if format == "json":
        body = {"reports": [r.to_dict() for r in reports]}
        if header_line:
            body["generated"] = header_line
        _write_text(path, json.dumps(body, indent=2) + "\n")
        return
    buf = io.StringIO()
    if header_line:
        buf.write(f"# {header_line}\n")
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for report in reports:
        writer.writerows(report_rows(report))
    _write_text(path, buf.getvalue())


def read_reports_json(path: PathLike) -> list[RecallReport]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [RecallReport.from_dict(r) for r in data["reports"]]


def write_histogram(stats: DateDeltaStats, path: PathLike, header_line: str | None = None) -> None:
    """``bin_start_days,bin_end_days,count`` rows, then negative-delta and p85 rows."""
    buf = io.StringIO()
    if header_line:
        buf.write(f"# {header_line}\n")
    buf.write("bin_start_days,bin_end_days,count\n")
    for start, end, count in stats.histogram():
        buf.write(f"{start},{end},{count}\n")
    buf.write(f"negative,,{stats.negative_count}\n")
    p85 = stats.percentile(85) if stats.deltas else ""
    buf.write(f"p85,{p85},\n")
    _write_text(path, buf.getvalue())


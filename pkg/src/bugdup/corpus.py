"""Bug-report corpora, duplicate links and the canonical duplicate map.

A duplicate map (``DupOrgMap``) sends every duplicate ("child") report id to
the id of its canonical parent. Links are folded in one pair at a time; when
two different parents claim the same child they are siblings, and the one
with the lowest issue id survives as the canonical parent. The map is kept
flat (every key points straight at a root) after every insertion.
"""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping

logger = logging.getLogger(__name__)

PathLike = str | Path


class InputError(Exception):
    """Raised when an input source cannot be read at all."""


class ValidationError(ValueError):
    """Raised for a record that violates a domain invariant."""


@dataclass(frozen=True)
class BugReport:
    id: int
    summary: str
    created_at: dt.date
    description: str = ""
    resolved_at: dt.date | None = None
    priority: str | None = None
    component: str | None = None
    status: str | None = None
    resolution: str | None = None
    version: str | None = None

    def __post_init__(self):
        if isinstance(self.id, bool) or not isinstance(self.id, int) or self.id <= 0:
            raise ValidationError(f"report id must be a positive integer, got {self.id!r}")
        if self.resolved_at is not None and self.resolved_at < self.created_at:
            raise ValidationError(f"report {self.id} resolved before it was created")

    @classmethod
    def from_record(cls, record: Mapping) -> "BugReport":
        """Build a report from one decoded JSON object of a report file."""
        if not isinstance(record, Mapping):
            raise ValidationError("record is not an object")
        for key in ("id", "summary", "created_at"):
            if record.get(key) is None:
                raise ValidationError(f"missing required field {key!r}")
        summary = record["summary"]
        description = record.get("description") or ""
        if not isinstance(summary, str) or not isinstance(description, str):
            raise ValidationError("summary and description must be strings")
        optional = {}
        for key in ("priority", "component", "status", "resolution", "version"):
            value = record.get(key)
            optional[key] = None if value is None else str(value)
        return cls(
            id=record["id"],
            summary=summary,
            description=description,
            created_at=_parse_date(record["created_at"]),
            resolved_at=_parse_date(record["resolved_at"]) if record.get("resolved_at") else None,
            **optional,
        )

    def to_record(self) -> dict:
        record = {
            "id": self.id,
            "summary": self.summary,
            "description": self.description,
            "created_at": self.created_at.isoformat(),
        }
        if self.resolved_at is not None:
            record["resolved_at"] = self.resolved_at.isoformat()
        for key in ("priority", "component", "status", "resolution", "version"):
            value = getattr(self, key)
            if value is not None:
                record[key] = value
        return record


def _parse_date(value) -> dt.date:
    if not isinstance(value, str):
        raise ValidationError(f"date must be an ISO-8601 string, got {value!r}")
    try:
        # Timestamps are accepted and truncated to the day.
        if len(value) > 10:
            return dt.datetime.fromisoformat(value.replace("Z", "+00:00")).date()
        return dt.date.fromisoformat(value)
    except ValueError as exc:
        raise ValidationError(f"bad date {value!r}") from exc


@dataclass(frozen=True)
class DuplicatePair:
    child_id: int
    parent_id: int

    def __post_init__(self):
        if self.child_id == self.parent_id:
            raise ValidationError(f"report {self.child_id} cannot duplicate itself")


class DupOrgMap:
    """Flat child -> canonical parent map with min-id sibling resolution.

    ``demotions`` counts insertions where a child already had a different
    parent (a sibling was demoted to duplicate); ``rejected`` counts pairs
    refused by :func:`build_intermediate_map`.
    """

    def __init__(self, entries: Mapping[int, int] | None = None):
        self._parent: dict[int, int] = {}
        self._children: dict[int, set[int]] = defaultdict(set)
        self.demotions = 0
        self.rejected = 0
        for child in sorted(entries or {}):
            insert_pair(self, DuplicatePair(child, entries[child]))

    def resolve(self, issue_id: int) -> int:
        return self._parent.get(issue_id, issue_id)

    def __getitem__(self, child_id: int) -> int:
        return self._parent[child_id]

    def __contains__(self, child_id) -> bool:
        return child_id in self._parent

    def __len__(self) -> int:
        return len(self._parent)

    def __iter__(self) -> Iterator[int]:
        return iter(self._parent)

    def __eq__(self, other) -> bool:
        if isinstance(other, DupOrgMap):
            return self._parent == other._parent
        if isinstance(other, Mapping):
            return self._parent == dict(other)
        return NotImplemented

    def __repr__(self) -> str:
        return f"DupOrgMap({dict(sorted(self._parent.items()))})"

    def items(self):
        return self._parent.items()

    def keys(self):
        return self._parent.keys()

    def roots(self) -> set[int]:
        return {root for root, kids in self._children.items() if kids}

    def as_dict(self) -> dict[int, int]:
        return dict(sorted(self._parent.items()))

    def copy(self) -> "DupOrgMap":
        clone = DupOrgMap()
        clone._parent = dict(self._parent)
        for root, kids in self._children.items():
            if kids:
                clone._children[root] = set(kids)
        clone.demotions = self.demotions
        clone.rejected = self.rejected
        return clone

    def _attach(self, child: int, root: int) -> None:
        old = self._parent.get(child)
        if old is not None:
            self._children[old].discard(child)
        self._parent[child] = root
        self._children[root].add(child)

    def check_invariants(self) -> None:
        """Raise AssertionError if the map is not a depth-1 forest."""
        values = set(self._parent.values())
        overlap = values & self._parent.keys()
        assert not overlap, f"ids both duplicate and parent: {sorted(overlap)[:5]}"
        assert all(c != p for c, p in self._parent.items()), "self-mapped id"


def insert_pair(dup_map: DupOrgMap, pair: DuplicatePair) -> DupOrgMap:
    """Fold one duplicate link into ``dup_map`` in place and return it.

    Both ends are resolved to their current roots. If the roots differ, the
    groups are merged under the smaller id and every key pointing at the
    larger root is re-pointed, so the map stays flat.
    """
    if pair.child_id == pair.parent_id:
        raise ValidationError(f"report {pair.child_id} cannot duplicate itself")
    child_root = dup_map.resolve(pair.child_id)
    parent_root = dup_map.resolve(pair.parent_id)
    if child_root == parent_root:
        return dup_map
    if pair.child_id in dup_map:
        # The child already has a parent: the two claimed parents are siblings.
        dup_map.demotions += 1
    canonical, demoted = min(child_root, parent_root), max(child_root, parent_root)
    for kid in list(dup_map._children.get(demoted, ())):
        dup_map._attach(kid, canonical)
    dup_map._children.pop(demoted, None)
    dup_map._attach(demoted, canonical)
    return dup_map


def build_intermediate_map(pairs: Iterable[DuplicatePair | tuple[int, int]]) -> DupOrgMap:
    """Fold pairs, in order, into a fresh map. Invalid pairs are skipped and counted."""
    dup_map = DupOrgMap()
    for pair in pairs:
        try:
            if not isinstance(pair, DuplicatePair):
                pair = DuplicatePair(*pair)
            insert_pair(dup_map, pair)
        except ValidationError as exc:
            dup_map.rejected += 1
            logger.warning("skipping pair: %s", exc)
    return dup_map


def merge_maps(first: DupOrgMap, second: DupOrgMap) -> DupOrgMap:
    """Fold ``second``'s entries (ascending child id) into a copy of ``first``."""
    merged = first.copy()
    for child in sorted(second.keys()):
        insert_pair(merged, DuplicatePair(child, second[child]))
    return merged


@dataclass(frozen=True)
class CorpusSplit:
    """Train ids (parents and uniques) and test ids (duplicates).

    ``unresolvable_ids`` are corpus duplicates whose canonical parent is not
    in the corpus; ``missing_ids`` are map keys absent from the corpus.
    """

    train_ids: frozenset[int]
    test_ids: frozenset[int]
    unresolvable_ids: frozenset[int] = field(default_factory=frozenset)
    missing_ids: frozenset[int] = field(default_factory=frozenset)


def split_corpus(reports: Iterable[BugReport | int], dup_map: DupOrgMap) -> CorpusSplit:
    corpus_ids = {r if isinstance(r, int) else r.id for r in reports}
    keys = set(dup_map.keys())
    duplicates = corpus_ids & keys
    unresolvable = {c for c in duplicates if dup_map[c] not in corpus_ids}
    return CorpusSplit(
        train_ids=frozenset(corpus_ids - keys),
        test_ids=frozenset(duplicates - unresolvable),
        unresolvable_ids=frozenset(unresolvable),
        missing_ids=frozenset(keys - corpus_ids),
    )


# -- file formats -----------------------------------------------------------

def _open_text(source: PathLike | IO[str]):
    if hasattr(source, "read"):
        return source, False
    try:
        return open(source, encoding="utf-8", newline=""), True
    except OSError as exc:
        raise InputError(f"cannot read {source}: {exc}") from exc


def _data_lines(handle: IO[str]) -> Iterator[str]:
    # Lines starting with '#' carry optional provenance headers.
    for line in handle:
        if not line.startswith("#"):
            yield line


def parse_reports(source: PathLike | IO[str]) -> tuple[list[BugReport], int]:
    """Read a newline-delimited JSON report file.

    Returns the reports in file order and the number of malformed records
    that were skipped. Repeated ids keep their first occurrence.
    """
    handle, owned = _open_text(source)
    reports: list[BugReport] = []
    seen: set[int] = set()
    skipped = 0
    try:
        for lineno, line in enumerate(_data_lines(handle), start=1):
            if not line.strip():
                continue
            try:
                report = BugReport.from_record(json.loads(line))
            except (ValueError, TypeError) as exc:
                skipped += 1
                logger.warning("skipping malformed report on line %d: %s", lineno, exc)
                continue
            if report.id in seen:
                logger.warning("ignoring repeated report id %d on line %d", report.id, lineno)
                continue
            seen.add(report.id)
            reports.append(report)
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read report source: {exc}") from exc
    finally:
        if owned:
            handle.close()
    return reports, skipped


def write_reports(reports: Iterable[BugReport], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(json.dumps(report.to_record()) + "\n")


def parse_pairs(source: PathLike | IO[str], swap_columns: bool = False) -> tuple[list[DuplicatePair], int]:
    """Read an ``issue_id,duplicate_id`` CSV; ``duplicate_id`` is the child.

    Rows with an empty ``duplicate_id`` (reports without duplicates) are
    ignored. Malformed rows and self-pairs are skipped and counted. Set
    ``swap_columns`` for dumps that list the child first.
    """
    handle, owned = _open_text(source)
    pairs: list[DuplicatePair] = []
    skipped = 0
    try:
        reader = csv.DictReader(_data_lines(handle))
        fields = reader.fieldnames or []
        if fields and not {"issue_id", "duplicate_id"} <= set(fields):
            raise InputError(f"pairs file header must contain issue_id,duplicate_id; got {fields}")
        for row in reader:
            issue, duplicate = (row.get("issue_id") or "").strip(), (row.get("duplicate_id") or "").strip()
            if not duplicate:
                continue
            if swap_columns:
                issue, duplicate = duplicate, issue
            try:
                pairs.append(DuplicatePair(child_id=int(duplicate), parent_id=int(issue)))
            except ValueError as exc:
                skipped += 1
                logger.warning("skipping pair row %r: %s", row, exc)
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise InputError(f"cannot read pairs source: {exc}") from exc
    finally:
        if owned:
            handle.close()
    return pairs, skipped


def write_map(dup_map: DupOrgMap, path: PathLike | IO[str], header_line: str | None = None) -> None:
    """Write ``child_id,canonical_parent_id`` rows sorted by child id."""
    buf = io.StringIO()
    if header_line:
        buf.write(f"# {header_line}\n")
    buf.write("child_id,canonical_parent_id\n")
    for child, parent in sorted(dup_map.items()):
        buf.write(f"{child},{parent}\n")
    if hasattr(path, "write"):
        path.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_map(source: PathLike | IO[str]) -> DupOrgMap:
    handle, owned = _open_text(source)
    try:
        entries = {
            int(row["child_id"]): int(row["canonical_parent_id"])
            for row in csv.DictReader(_data_lines(handle))
        }
    except (KeyError, TypeError, ValueError, csv.Error) as exc:
        raise InputError(f"malformed map file: {exc}") from exc
    finally:
        if owned:
            handle.close()
    dup_map = DupOrgMap(entries)
    if dup_map.as_dict() != dict(sorted(entries.items())):
        raise InputError("map file is not a flat child -> canonical parent map")
    return dup_map


def write_ids(ids: Iterable[int], path: PathLike) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in sorted(ids)), encoding="utf-8")


def read_ids(path: PathLike) -> list[int]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    try:
        return [int(line) for line in text.splitlines() if line.strip() and not line.startswith("#")]
    except ValueError as exc:
        raise InputError(f"malformed id file {path}: {exc}") from exc

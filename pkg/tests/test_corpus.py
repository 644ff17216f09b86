import datetime as dt
import io
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bugdup.corpus import (
    BugReport,
    DuplicatePair,
    DupOrgMap,
    InputError,
    ValidationError,
    build_intermediate_map,
    insert_pair,
    merge_maps,
    parse_pairs,
    parse_reports,
    read_map,
    split_corpus,
    write_map,
)
from conftest import make_report
from oracles import union_find_map


def jsonl(*records):
    return io.StringIO("".join(json.dumps(r) + "\n" for r in records))


def rec(issue_id, **extra):
    base = {"id": issue_id, "summary": f"s{issue_id}", "created_at": "2020-01-01"}
    base.update(extra)
    return base


# -- parse_reports -------------------------------------------------------------

def test_parse_three_records():
    reports, skipped = parse_reports(jsonl(rec(1), rec(2), rec(3)))
    assert [r.id for r in reports] == [1, 2, 3]
    assert skipped == 0


def test_parse_skips_record_missing_id():
    broken = {"summary": "x", "created_at": "2020-01-01"}
    reports, skipped = parse_reports(jsonl(rec(1), broken, rec(2)))
    assert [r.id for r in reports] == [1, 2]
    assert skipped == 1


def test_parse_counts_every_kind_of_malformed_record():
    src = io.StringIO(
        json.dumps(rec(1)) + "\n"
        + "{not json\n"
        + json.dumps(rec(2, created_at="2020-13-45")) + "\n"
        + json.dumps(rec(-4)) + "\n"
        + json.dumps(rec(5, created_at="2020-02-01", resolved_at="2020-01-01")) + "\n"
        + json.dumps([1, 2]) + "\n"
        + "\n"
    )
    reports, skipped = parse_reports(src)
    assert [r.id for r in reports] == [1]
    assert skipped == 5


def test_parse_first_occurrence_wins():
    reports, _ = parse_reports(jsonl(rec(7, summary="first"), rec(7, summary="second")))
    assert len(reports) == 1 and reports[0].summary == "first"


def test_parse_optional_fields_and_timestamps(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text(json.dumps(rec(
        9, description="d", created_at="2020-01-02T10:11:12Z", resolved_at="2020-03-01",
        priority="P1", component="UI", status="RESOLVED", resolution="DUPLICATE", version=3,
    )) + "\n", encoding="utf-8")
    (report,), _ = parse_reports(path)
    assert report.created_at == dt.date(2020, 1, 2)
    assert report.resolved_at == dt.date(2020, 3, 1)
    assert (report.priority, report.component, report.version) == ("P1", "UI", "3")
    assert report.description == "d"


def test_parse_missing_description_defaults_to_empty():
    (report,), _ = parse_reports(jsonl(rec(1)))
    assert report.description == ""


def test_unreadable_source_is_fatal(tmp_path):
    with pytest.raises(InputError):
        parse_reports(tmp_path / "nope.jsonl")


# -- pairs file ------------------------------------------------------------------

def test_parse_pairs_duplicate_column_is_child():
    pairs, skipped = parse_pairs(io.StringIO("issue_id,duplicate_id\n1,2\n1,3\n4,\n"))
    assert pairs == [DuplicatePair(2, 1), DuplicatePair(3, 1)]
    assert skipped == 0


def test_parse_pairs_skips_self_pairs_and_garbage():
    pairs, skipped = parse_pairs(io.StringIO("issue_id,duplicate_id\n5,5\nx,2\n1,2\n"))
    assert pairs == [DuplicatePair(2, 1)]
    assert skipped == 2


def test_parse_pairs_column_swap():
    pairs, _ = parse_pairs(io.StringIO("issue_id,duplicate_id\n2,1\n"), swap_columns=True)
    assert pairs == [DuplicatePair(child_id=2, parent_id=1)]


def test_parse_pairs_rejects_wrong_header():
    with pytest.raises(InputError):
        parse_pairs(io.StringIO("a,b\n1,2\n"))


# -- insert_pair / build / merge --------------------------------------------------

def test_insert_into_empty_map():
    assert insert_pair(DupOrgMap(), DuplicatePair(2, 1)) == {2: 1}


def test_insert_resolves_transitively():
    assert insert_pair(DupOrgMap({2: 1}), DuplicatePair(3, 2)) == {2: 1, 3: 1}


def test_insert_conflict_demotes_larger_parent():
    m = DupOrgMap({3: 1})
    insert_pair(m, DuplicatePair(3, 2))
    assert m == {3: 1, 2: 1}
    assert m.demotions == 1


def test_insert_conflict_rehomes_existing_children():
    m = build_intermediate_map([(5, 2), (6, 2), (5, 1)])
    assert m == {5: 1, 6: 1, 2: 1}


def test_insert_self_pair_rejected():
    with pytest.raises(ValidationError):
        DuplicatePair(4, 4)
    forged = DuplicatePair(4, 5)
    object.__setattr__(forged, "parent_id", 4)
    with pytest.raises(ValidationError):
        insert_pair(DupOrgMap(), forged)


def test_insert_is_idempotent():
    m = build_intermediate_map([(2, 1), (3, 2), (9, 7)])
    before = m.as_dict()
    for child, parent in list(before.items()):
        insert_pair(m, DuplicatePair(child, parent))
    assert m.as_dict() == before


@pytest.mark.parametrize(
    "pairs, expected",
    [
        ([], {}),
        ([(2, 1), (3, 2), (5, 4)], {2: 1, 3: 1, 5: 4}),
        ([(3, 1), (3, 2)], {3: 1, 2: 1}),
    ],
)
def test_build_intermediate_map(pairs, expected):
    assert build_intermediate_map(pairs) == expected
    assert union_find_map(pairs) == expected


def test_build_counts_rejected_pairs():
    m = build_intermediate_map([(2, 1), (4, 4), (3, 1)])
    assert m == {2: 1, 3: 1}
    assert m.rejected == 1


@pytest.mark.parametrize(
    "first, second, expected",
    [
        ({2: 1}, {}, {2: 1}),
        ({3: 1}, {3: 2}, {3: 1, 2: 1}),
        ({5: 4}, {4: 1}, {5: 1, 4: 1}),
    ],
)
def test_merge_maps(first, second, expected):
    merged = merge_maps(DupOrgMap(first), DupOrgMap(second))
    assert merged == expected
    merged.check_invariants()


def test_merge_leaves_inputs_untouched():
    first, second = DupOrgMap({3: 1}), DupOrgMap({3: 2})
    merge_maps(first, second)
    assert first == {3: 1} and second == {3: 2}


pair_lists = st.lists(
    st.tuples(st.integers(1, 50), st.integers(1, 50)).filter(lambda p: p[0] != p[1]),
    max_size=100,
)


@settings(max_examples=300, deadline=None)
@given(pair_lists)
def test_map_matches_union_find_oracle(pairs):
    m = DupOrgMap()
    for child, parent in pairs:
        insert_pair(m, DuplicatePair(child, parent))
        m.check_invariants()
    assert m.as_dict() == union_find_map(pairs)


@settings(max_examples=200, deadline=None)
@given(pair_lists, pair_lists)
def test_merge_matches_union_find_oracle(train, test):
    merged = merge_maps(build_intermediate_map(train), build_intermediate_map(test))
    merged.check_invariants()
    assert merged.as_dict() == union_find_map(train + test)


# -- split -------------------------------------------------------------------------

def test_split_basic():
    split = split_corpus([make_report(i) for i in (1, 2, 3)], DupOrgMap({3: 1}))
    assert split.train_ids == {1, 2} and split.test_ids == {3}


def test_split_without_duplicates():
    split = split_corpus([make_report(1), make_report(2)], DupOrgMap())
    assert split.train_ids == {1, 2} and split.test_ids == set()


def test_split_excludes_children_of_missing_parents():
    split = split_corpus([make_report(i) for i in (2, 3, 4)], DupOrgMap({3: 1, 4: 2, 8: 2}))
    assert split.train_ids == {2}
    assert split.test_ids == {4}
    assert split.unresolvable_ids == {3}
    assert split.missing_ids == {8}


@settings(max_examples=200, deadline=None)
@given(pair_lists, st.sets(st.integers(1, 50), max_size=50))
def test_split_partitions_corpus(pairs, corpus):
    m = build_intermediate_map(pairs)
    split = split_corpus(corpus, m)
    assert not split.train_ids & split.test_ids
    assert not split.unresolvable_ids & (split.train_ids | split.test_ids)
    assert split.train_ids | split.test_ids | split.unresolvable_ids == corpus
    assert split.test_ids == {c for c in corpus if c in m and m[c] in corpus}
    assert {m[c] for c in m if m[c] in corpus} <= split.train_ids


# -- map file ------------------------------------------------------------------------

def test_map_export_is_sorted_and_exact():
    buf = io.StringIO()
    write_map(DupOrgMap({10: 1, 3: 1, 7: 2}), buf)
    assert buf.getvalue() == "child_id,canonical_parent_id\n3,1\n7,2\n10,1\n"


def test_map_roundtrip_with_header(tmp_path):
    path = tmp_path / "map.csv"
    m = build_intermediate_map([(random.Random(s).randint(2, 40), 1) for s in range(20)])
    write_map(m, path, header_line="generated for a test")
    assert read_map(path) == m


def test_read_map_rejects_non_flat_map(tmp_path):
    path = tmp_path / "map.csv"
    path.write_text("child_id,canonical_parent_id\n2,1\n3,2\n", encoding="utf-8")
    with pytest.raises(InputError):
        read_map(path)


def test_bug_report_invariants():
    with pytest.raises(ValidationError):
        BugReport(id=0, summary="x", created_at=dt.date(2020, 1, 1))
    with pytest.raises(ValidationError):
        BugReport(id=1, summary="x", created_at=dt.date(2020, 1, 2), resolved_at=dt.date(2020, 1, 1))

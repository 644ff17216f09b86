"""Seeded synthetic bug-report corpora with noisy duplicate copies.

Useful for checking the pipeline end to end without the real tracker dumps.
Words follow a Zipf-like frequency profile so common terms collide across
reports the way they do in real trackers.
"""
from __future__ import annotations

import csv
import datetime as dt
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import BugReport, DuplicatePair, PathLike, write_reports
from .embed import default_stopwords


@dataclass
class SyntheticCorpus:
    reports: list[BugReport]
    pairs: list[DuplicatePair]
    train_ids: list[int]
    test_ids: list[int]

    def write(self, directory: PathLike, test_fraction: float = 0.5) -> dict[str, Path]:
        """Write reports.jsonl plus pairs split over pairs_train.csv / pairs_test.csv."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "reports": out / "reports.jsonl",
            "pairs_train": out / "pairs_train.csv",
            "pairs_test": out / "pairs_test.csv",
        }
        write_reports(self.reports, paths["reports"])
        cut = int(round(len(self.pairs) * (1 - test_fraction)))
        for key, chunk in (("pairs_train", self.pairs[:cut]), ("pairs_test", self.pairs[cut:])):
            with open(paths[key], "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["issue_id", "duplicate_id"])
                for pair in chunk:
                    writer.writerow([pair.parent_id, pair.child_id])
        return paths


def _vocabulary(size: int, rng: np.random.Generator) -> list[str]:
    stop = default_stopwords()
    letters = np.array(list(string.ascii_lowercase))
    words: set[str] = set()
    while len(words) < size:
        length = int(rng.integers(3, 10))
        word = "".join(rng.choice(letters, size=length))
        if word not in stop:
            words.add(word)
    return sorted(words)


def make_corpus(
    n_train: int = 5000,
    n_test: int = 500,
    replace_fraction: float = 0.1,
    seed: int = 0,
    vocab_size: int = 20000,
    doc_length: tuple[int, int] = (20, 60),
    start: dt.date = dt.date(2008, 1, 1),
    span_days: int = 3650,
    max_delta_days: int = 1500,
) -> SyntheticCorpus:
    """Train reports (ids 1..n_train) and children that copy a random parent.

    Each child replaces ``replace_fraction`` of its parent's tokens (chosen
    uniformly, at least one) with words drawn from the background profile.
    Children are created 0..``max_delta_days`` days after their parent,
    skewed toward short gaps.
    """
    rng = np.random.default_rng(seed)
    vocab = np.array(_vocabulary(vocab_size, rng))
    weights = 1.0 / (np.arange(vocab_size) + 10.0)
    weights /= weights.sum()
    perm = rng.permutation(vocab_size)

    def draw(k: int) -> np.ndarray:
        return vocab[perm[rng.choice(vocab_size, size=k, p=weights)]]

    token_lists: dict[int, list[str]] = {}
    reports: list[BugReport] = []
    offsets = np.sort(rng.integers(0, span_days, size=n_train))
    for i in range(n_train):
        issue_id = i + 1
        tokens = list(draw(int(rng.integers(doc_length[0], doc_length[1] + 1))))
        token_lists[issue_id] = tokens
        reports.append(_report(issue_id, tokens, start + dt.timedelta(days=int(offsets[i])), rng))

    pairs: list[DuplicatePair] = []
    test_ids: list[int] = []
    parents = rng.integers(1, n_train + 1, size=n_test)
    for j, parent in enumerate(parents):
        child_id = n_train + j + 1
        tokens = list(token_lists[int(parent)])
        k = max(1, int(round(replace_fraction * len(tokens))))
        positions = rng.choice(len(tokens), size=k, replace=False)
        for pos, word in zip(positions, draw(k)):
            tokens[pos] = word
        gap = int(min(max_delta_days, rng.exponential(max_delta_days / 6)))
        created = reports[int(parent) - 1].created_at + dt.timedelta(days=gap)
        reports.append(_report(child_id, tokens, created, rng))
        pairs.append(DuplicatePair(child_id=child_id, parent_id=int(parent)))
        test_ids.append(child_id)
    return SyntheticCorpus(reports, pairs, list(range(1, n_train + 1)), test_ids)


def _report(issue_id: int, tokens: list[str], created: dt.date, rng: np.random.Generator) -> BugReport:
    cut = min(len(tokens), int(rng.integers(4, 10)))
    return BugReport(
        id=issue_id,
        summary=" ".join(tokens[:cut]),
        description=" ".join(tokens[cut:]),
        created_at=created,
        component=f"comp{int(rng.integers(0, 12))}",
    )

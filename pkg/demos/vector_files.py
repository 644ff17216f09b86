"""
Bringing your own embeddings
============================

Vectors computed elsewhere (a sentence encoder, a hosted embedding API) can
be evaluated through a JSON-lines file of ``{"id": ..., "vector": [...]}``.
This script writes such a file with random vectors and runs the usual
evaluation on it.
"""

import datetime as dt
import tempfile
from pathlib import Path

import numpy as np

from bugdup import BugReport, DupOrgMap, VectorFileEmbedder, build_index, run_evaluation, split_corpus
from bugdup.embed import write_vector_file

rng = np.random.default_rng(0)
parents = {i: rng.normal(size=32) for i in range(1, 201)}
children = {1000 + i: parents[1 + i] + rng.normal(scale=0.8, size=32) for i in range(50)}
dup_map = DupOrgMap({c: c - 999 for c in children})

day = dt.date(2021, 1, 1)
reports = [BugReport(id=i, summary=f"report {i}", created_at=day) for i in [*parents, *children]]

path = Path(tempfile.mkdtemp()) / "vectors.jsonl"
write_vector_file({**parents, **children}, path)
embedder = VectorFileEmbedder.from_file(path, label="random-32d")

split = split_corpus(reports, dup_map)
index = build_index((i, embedder.vectors[i], day) for i in sorted(split.train_ids))
run = run_evaluation(split, dup_map, index, embedder, reports, n_max=10)
print(run.report([1, 5, 10], "toy", embedder.label).points)

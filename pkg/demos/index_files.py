"""
Saving and reloading an index
=============================

Indexes are written in a small binary format and come back answering
queries exactly as before.
"""

import datetime as dt
import tempfile
from pathlib import Path

import numpy as np

from bugdup import EmbeddingVector, index_from_matrix, load_index, save_index
from bugdup.index import DateWindow

rng = np.random.default_rng(3)
vectors = rng.normal(size=(5000, 48))
ids = np.arange(1, 5001)
dates = [dt.date(2015, 1, 1) + dt.timedelta(days=int(d)) for d in rng.integers(0, 2000, size=5000)]
index = index_from_matrix(ids, vectors, dates)

path = Path(tempfile.mkdtemp()) / "reports.dsix"
save_index(index, path)
print(f"{path.stat().st_size / 1e6:.2f} MB on disk")

loaded = load_index(path)
probe = EmbeddingVector.dense(rng.normal(size=48))
window = DateWindow(dt.date(2018, 6, 1), 365)
print(index.query(probe, 5, window).ranked)
print(loaded.query(probe, 5, window).ranked)

"""
TF-IDF retrieval on a synthetic tracker
=======================================

Build a corpus where every duplicate is a noisy copy of its parent, fit
TF-IDF on the training reports only, and look up a few duplicates.
"""

from bugdup import TfidfEmbedder, build_intermediate_map, index_from_matrix, split_corpus
from bugdup.synthetic import make_corpus

corpus = make_corpus(n_train=2000, n_test=200, replace_fraction=0.3, seed=1)
dup_map = build_intermediate_map(corpus.pairs)
split = split_corpus(corpus.reports, dup_map)
print(f"{len(split.train_ids)} train reports, {len(split.test_ids)} duplicates to find")

reports = {r.id: r for r in corpus.reports}
train = [reports[i] for i in sorted(split.train_ids)]
embedder = TfidfEmbedder.fit(train)
print("vocabulary size:", embedder.model.dim)

index = index_from_matrix([r.id for r in train], embedder.embed_many(train), [r.created_at for r in train])

# %%
# Query with three duplicates and see where their parents land.
for child in sorted(split.test_ids)[:3]:
    result = index.query(embedder(reports[child]), n=5)
    parent = dup_map[child]
    rank = result.ids.index(parent) + 1 if parent in result.ids else None
    print(f"child {child}: parent {parent} at rank {rank}; top scores {[round(s, 3) for s in result.scores]}")

# %%
# Free text works too. An empty probe scores 0 against everything, so the
# results fall back to ascending id order.
print(index.query(embedder.embed_text(""), n=3).ranked)

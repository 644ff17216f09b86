"""
Recall curves and lookback windows
==================================

Score every duplicate of a synthetic corpus, print recall at a few cut-offs,
then compare against a search restricted to reports filed in the preceding
days. Finally look at how far apart parents and children were filed.
"""

from bugdup import (
    TfidfEmbedder,
    build_intermediate_map,
    date_delta_analysis,
    index_from_matrix,
    run_evaluation,
    split_corpus,
    windowed_comparison,
)
from bugdup.synthetic import make_corpus

corpus = make_corpus(n_train=3000, n_test=300, replace_fraction=0.9, seed=7)
dup_map = build_intermediate_map(corpus.pairs)
split = split_corpus(corpus.reports, dup_map)
reports = {r.id: r for r in corpus.reports}
train = [reports[i] for i in sorted(split.train_ids)]
embedder = TfidfEmbedder.fit(train)
index = index_from_matrix([r.id for r in train], embedder.embed_many(train), [r.created_at for r in train])

grid = [1, 5, 10, 50, 100, 500]
report = run_evaluation(split, dup_map, index, embedder, reports).report(grid, "synthetic", "tfidf")
for n, value in report.points:
    print(f"recall@{n:<3} {value:.3f}")

# %%
# The same queries with a 720-day lookback. Parents filed earlier than that
# become unreachable, while unrelated old reports stop competing.
plain, windowed = windowed_comparison(split, dup_map, index, embedder, reports, 720, grid)
for (n, a), (_, b) in zip(plain.points, windowed.points):
    print(f"n={n:<3} all={a:.3f} last 720 days={b:.3f}")

# %%
stats = date_delta_analysis(reports, dup_map)
print("p85 gap:", stats.percentile(85), "days")
print("share filed 720+ days after the parent:", round(stats.share_at_least(720), 3))

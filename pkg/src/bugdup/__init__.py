"""Duplicate bug-report retrieval: canonical duplicate maps, TF-IDF and external
embeddings, exact cosine search with creation-date windows, recall@n evaluation."""

__version__ = "0.1.0"

from .corpus import (
    BugReport,
    CorpusSplit,
    DuplicatePair,
    DupOrgMap,
    build_intermediate_map,
    insert_pair,
    merge_maps,
    parse_pairs,
    parse_reports,
    split_corpus,
)
from .embed import (
    EmbeddingClient,
    EmbeddingVector,
    TfidfEmbedder,
    TfidfModel,
    VectorFileEmbedder,
    EndpointEmbedder,
    document_text,
    embed_tfidf,
    fetch_vector,
    fit_tfidf,
    load_vector_file,
    preprocess,
)
from .evaluate import (
    DEFAULT_N_GRID,
    SEARCH_LIMIT_DAYS,
    QueryOutcome,
    RecallReport,
    date_delta_analysis,
    emit_report,
    recall_at,
    recall_curve,
    run_evaluation,
    windowed_comparison,
)
from .index import (
    DateWindow,
    QueryResult,
    SearchIndex,
    build_index,
    index_from_matrix,
    load_index,
    save_index,
)

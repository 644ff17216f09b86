"""Command-line pipeline: build-map, split, embed, index, query, evaluate, analyze-dates.

Settings come from a flat ``key = value`` config file (``--config``); any key
can be overridden by the flag of the same name (``n_grid`` -> ``--n-grid``).

Exit codes: 1 configuration, 2 input data, 3 embedding provider, 4 I/O.
"""
from __future__ import annotations

import argparse
import datetime as dt
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

from . import __version__
from .corpus import (
    BugReport,
    DupOrgMap,
    InputError,
    ValidationError,
    build_intermediate_map,
    merge_maps,
    parse_pairs,
    parse_reports,
    read_ids,
    read_map,
    split_corpus,
    write_ids,
    write_map,
)
from .embed import (
    DimensionMismatchError,
    EmbeddingClient,
    EmbeddingError,
    EndpointEmbedder,
    FitError,
    ProviderError,
    TfidfEmbedder,
    TfidfModel,
    VectorFileEmbedder,
    document_text,
    load_stopwords,
    write_vector_file,
)
from .evaluate import (
    DEFAULT_N_GRID,
    SEARCH_LIMIT_DAYS,
    UndefinedMetricError,
    date_delta_analysis,
    emit_report,
    run_evaluation,
    windowed_comparison,
    write_histogram,
)
from .index import DateWindow, IndexFormatError, build_index, index_from_matrix, load_index, save_index

logger = logging.getLogger("bugdup")

EXIT_CONFIG, EXIT_INPUT, EXIT_PROVIDER, EXIT_IO = 1, 2, 3, 4
EMBEDDERS = ("native-tfidf", "vector-file", "vector-endpoint")


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: str = "dataset"
    reports: str | None = None
    pairs_train: str | None = None
    pairs_test: str | None = None
    map: str | None = None
    split_dir: str | None = None
    vectors: str | None = None
    index: str | None = None
    output_dir: str = "."
    embedder: str | None = None
    endpoint: str | None = None
    model_label: str | None = None
    tfidf_model: str | None = None
    n_grid: str = "default"
    window_days: str | None = None
    stopwords: str | None = None
    retries: int = 3
    timeout: float = 30.0
    backoff: float = 0.5
    max_in_flight: int = 4
    swap_columns: bool = False
    bin_width: int = 30

    @classmethod
    def from_sources(cls, file_values: dict[str, str], flag_values: dict[str, object]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        merged: dict[str, object] = {}
        for key, value in list(file_values.items()) + list(flag_values.items()):
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}")
            merged[key] = value
        config = cls()
        for key, value in merged.items():
            default = getattr(cls, key)
            try:
                if isinstance(default, bool):
                    value = value if isinstance(value, bool) else str(value).strip().lower() in ("1", "true", "yes", "on")
                elif isinstance(default, int):
                    value = int(value)
                elif isinstance(default, float):
                    value = float(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {value!r}") from exc
            setattr(config, key, value)
        return config

    def embedder_kind(self) -> str:
        implied = []
        if self.vectors:
            implied.append("vector-file")
        if self.endpoint:
            implied.append("vector-endpoint")
        if len(implied) > 1:
            raise ConfigError("both a vector file and an embedding endpoint are configured; choose one")
        if self.embedder is not None:
            if self.embedder not in EMBEDDERS:
                raise ConfigError(f"embedder must be one of {', '.join(EMBEDDERS)}")
            if implied and implied[0] != self.embedder:
                raise ConfigError(f"embedder {self.embedder} conflicts with configured {implied[0]} source")
            if self.embedder == "vector-file" and not self.vectors:
                raise ConfigError("embedder vector-file needs `vectors`")
            if self.embedder == "vector-endpoint" and not self.endpoint:
                raise ConfigError("embedder vector-endpoint needs `endpoint`")
            return self.embedder
        return implied[0] if implied else "native-tfidf"

    def n_values(self) -> list[int]:
        if self.n_grid.strip().lower() == "default":
            return list(DEFAULT_N_GRID)
        try:
            values = [int(v) for v in self.n_grid.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad n_grid {self.n_grid!r}") from exc
        if not values or any(v <= 0 for v in values) or any(b <= a for a, b in zip(values, values[1:])):
            raise ConfigError("n_grid must be positive and strictly increasing")
        return values

    def lookback(self) -> int | None:
        if self.window_days in (None, "", "none"):
            return None
        if str(self.window_days).lower() == "auto":
            if self.dataset not in SEARCH_LIMIT_DAYS:
                raise ConfigError(f"no default window for dataset {self.dataset!r}")
            return SEARCH_LIMIT_DAYS[self.dataset]
        try:
            days = int(self.window_days)
        except ValueError as exc:
            raise ConfigError(f"bad window_days {self.window_days!r}") from exc
        if days <= 0:
            raise ConfigError("window_days must be positive")
        return days

    def require(self, *keys: str) -> None:
        for key in keys:
            value = getattr(self, key)
            if not value:
                raise ConfigError(f"missing required setting `{key}`")
            if not Path(value).exists():
                raise ConfigError(f"{key}: {value} does not exist")

    def out(self, name: str) -> Path:
        path = Path(self.output_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path / name


def read_config_file(path: str) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


# -- shared helpers -------------------------------------------------------------

class Context:
    def __init__(self, config: RunConfig, workers: int, timestamp: bool):
        self.config = config
        self.workers = workers
        self.timestamp = timestamp

    def header(self) -> str | None:
        if not self.timestamp:
            return None
        now = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
        return f"generated by bugdup {__version__} at {now}"

    def load_reports(self) -> dict[int, BugReport]:
        self.config.require("reports")
        reports, skipped = parse_reports(self.config.reports)
        if skipped:
            print(f"warning: skipped {skipped} malformed report records", file=sys.stderr)
        return {r.id: r for r in reports}

    def load_map(self) -> DupOrgMap:
        if self.config.map:
            self.config.require("map")
            return read_map(self.config.map)
        self.config.require("pairs_train", "pairs_test")
        return build_map(self.config)[0]

    def stopwords(self):
        return load_stopwords(self.config.stopwords) if self.config.stopwords else None

    def client(self) -> EmbeddingClient:
        c = self.config
        return EmbeddingClient(
            c.endpoint,
            c.model_label or "",
            timeout=c.timeout,
            retries=c.retries,
            backoff=c.backoff,
            max_in_flight=c.max_in_flight,
        )

    def embedder(self, train_reports: Sequence[BugReport] | None = None):
        kind = self.config.embedder_kind()
        if kind == "vector-file":
            self.config.require("vectors")
            try:
                return VectorFileEmbedder.from_file(self.config.vectors, self.config.model_label)
            except DimensionMismatchError as exc:
                raise InputError(f"{self.config.vectors}: {exc}") from exc
        if kind == "vector-endpoint":
            return EndpointEmbedder(self.client(), self.config.model_label)
        if self.config.tfidf_model and Path(self.config.tfidf_model).exists():
            model = TfidfModel.load(self.config.tfidf_model)
            stop = self.stopwords()
            if stop is not None and stop.identifier != model.stopwords_id:
                raise ConfigError("stop-word list differs from the one the TF-IDF model was fitted with")
            return TfidfEmbedder(model, stop)
        if train_reports is None:
            raise ConfigError("native-tfidf needs `tfidf_model` (run `embed` or `index` first)")
        return TfidfEmbedder.fit(train_reports, self.stopwords())


def build_map(config: RunConfig) -> tuple[DupOrgMap, int]:
    train_pairs, bad_train = parse_pairs(config.pairs_train, config.swap_columns)
    test_pairs, bad_test = parse_pairs(config.pairs_test, config.swap_columns)
    first = build_intermediate_map(train_pairs)
    second = build_intermediate_map(test_pairs)
    merged = merge_maps(first, second)
    merged.demotions += second.demotions
    return merged, bad_train + bad_test + first.rejected + second.rejected


def _split_ids(ctx: Context, reports: dict[int, BugReport]):
    c = ctx.config
    if c.split_dir and (Path(c.split_dir) / "train.txt").exists():
        return read_ids(Path(c.split_dir) / "train.txt"), read_ids(Path(c.split_dir) / "test.txt")
    split = split_corpus(reports.values(), ctx.load_map())
    return sorted(split.train_ids), sorted(split.test_ids)


def _build_index(ctx: Context, reports: dict[int, BugReport], train_ids: Sequence[int]):
    train = [reports[i] for i in train_ids if i in reports]
    embedder = ctx.embedder(train)
    if isinstance(embedder, TfidfEmbedder):
        index = index_from_matrix([r.id for r in train], embedder.embed_many(train), [r.created_at for r in train])
    else:
        index = build_index((r.id, embedder(r), r.created_at) for r in train)
    return embedder, index


# -- commands -------------------------------------------------------------------

def cmd_build_map(ctx: Context, args) -> int:
    ctx.config.require("pairs_train", "pairs_test")
    dup_map, warnings = build_map(ctx.config)
    out = Path(args.out) if args.out else ctx.config.out("map.csv")
    write_map(dup_map, out, ctx.header())
    print(f"keys: {len(dup_map)}")
    print(f"sibling demotions: {dup_map.demotions}")
    print(f"warnings: {warnings}")
    return 0


def cmd_split(ctx: Context, args) -> int:
    reports = ctx.load_reports()
    split = split_corpus(reports.values(), ctx.load_map())
    out = Path(args.out or ctx.config.split_dir or ctx.config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ids(split.train_ids, out / "train.txt")
    write_ids(split.test_ids, out / "test.txt")
    write_ids(split.unresolvable_ids | split.missing_ids, out / "unresolvable.txt")
    print(f"train: {len(split.train_ids)}")
    print(f"test: {len(split.test_ids)}")
    print(f"unresolvable: {len(split.unresolvable_ids)} (parent absent), {len(split.missing_ids)} (not in corpus)")
    return 0


def cmd_embed(ctx: Context, args) -> int:
    kind = ctx.config.embedder_kind()
    reports = ctx.load_reports()
    if kind == "vector-file":
        ctx.config.require("vectors")
        embedder = ctx.embedder()
        print(f"{len(embedder.vectors)} vectors of dimension {next(iter(embedder.vectors.values())).dim if embedder.vectors else 0}")
        return 0
    if kind == "vector-endpoint":
        out = Path(args.out) if args.out else ctx.config.out("vectors.jsonl")
        with ctx.client() as client:
            ordered = sorted(reports)
            vectors = client.fetch_many([document_text(reports[i]) for i in ordered])
        write_vector_file(dict(zip(ordered, vectors)), out)
        print(f"wrote {len(vectors)} vectors to {out}")
        return 0
    train_ids, _ = _split_ids(ctx, reports)
    embedder = TfidfEmbedder.fit([reports[i] for i in train_ids if i in reports], ctx.stopwords())
    out = Path(args.out) if args.out else Path(ctx.config.tfidf_model or ctx.config.out("tfidf.json"))
    embedder.model.save(out)
    print(f"TF-IDF model: {embedder.model.dim} terms from {embedder.model.document_count} training reports -> {out}")
    return 0


def cmd_index(ctx: Context, args) -> int:
    reports = ctx.load_reports()
    train_ids, _ = _split_ids(ctx, reports)
    embedder, index = _build_index(ctx, reports, train_ids)
    out = Path(args.out or ctx.config.index or ctx.config.out("index.dsix"))
    save_index(index, out)
    if isinstance(embedder, TfidfEmbedder) and not (ctx.config.tfidf_model and Path(ctx.config.tfidf_model).exists()):
        model_path = Path(ctx.config.tfidf_model) if ctx.config.tfidf_model else out.with_suffix(".tfidf.json")
        embedder.model.save(model_path)
        print(f"TF-IDF model -> {model_path}")
    print(f"indexed {len(index)} reports ({index.kind}, dimension {index.dim}) -> {out}")
    return 0


def cmd_query(ctx: Context, args) -> int:
    c = ctx.config
    c.require("index")
    index = load_index(c.index)
    kind = c.embedder_kind()
    if kind == "native-tfidf" and not c.tfidf_model:
        sibling = Path(c.index).with_suffix(".tfidf.json")
        if sibling.exists():
            c.tfidf_model = str(sibling)
    query_date = None
    if args.report_id is not None:
        reports = ctx.load_reports()
        if args.report_id not in reports:
            raise InputError(f"report {args.report_id} not found in {c.reports}")
        report = reports[args.report_id]
        probe = ctx.embedder()(report)
        query_date = report.created_at
    elif args.text is not None:
        embedder = ctx.embedder()
        if not hasattr(embedder, "embed_text"):
            raise ConfigError("inline text needs the native-tfidf or vector-endpoint embedder")
        if not args.text and kind == "vector-endpoint":
            raise ConfigError("cannot send empty text to an embedding endpoint")
        probe = embedder.embed_text(args.text)
    else:
        raise ConfigError("query needs --text or --report-id")
    window = None
    days = c.lookback()
    if days is not None:
        if args.date:
            try:
                query_date = dt.date.fromisoformat(args.date)
            except ValueError as exc:
                raise ConfigError(f"bad --date {args.date!r}") from exc
        if query_date is None:
            raise ConfigError("a window needs --date or --report-id")
        window = DateWindow(query_date, days)
    result = index.query(probe, args.n, window)
    for issue_id, score in result.ranked:
        print(f"{issue_id}\t{score:.6f}")
    return 0


def cmd_evaluate(ctx: Context, args) -> int:
    c = ctx.config
    n_values = c.n_values()
    window = c.lookback()
    kind = c.embedder_kind()
    reports = ctx.load_reports()
    dup_map = ctx.load_map()
    split = split_corpus(reports.values(), dup_map)
    if c.index and Path(c.index).exists():
        index = load_index(c.index)
        if kind == "native-tfidf" and not c.tfidf_model:
            c.tfidf_model = str(Path(c.index).with_suffix(".tfidf.json"))
        embedder = ctx.embedder()
    else:
        embedder, index = _build_index(ctx, reports, sorted(split.train_ids))
    label = c.model_label or getattr(embedder, "label", kind)
    if window is None:
        run = run_evaluation(split, dup_map, index, embedder, reports, n_values[-1], workers=ctx.workers)
        curves = [run.report(n_values, c.dataset, label)]
        if run.failed_ids:
            print(f"warning: {len(run.failed_ids)} queries failed to embed", file=sys.stderr)
    else:
        curves = list(windowed_comparison(
            split, dup_map, index, embedder, reports, window, n_values,
            dataset=c.dataset, model=label, workers=ctx.workers,
        ))
    emit_report(curves, c.out("recall_curve.csv"), "csv", ctx.header())
    emit_report(curves, c.out("recall_curve.json"), "json", ctx.header())
    summary_n = 5 if 5 in n_values else n_values[0]
    lines = ["dataset,model,window_days,n,recall,query_count,unresolvable_count"]
    for report in curves:
        wd = "" if report.window_days is None else report.window_days
        value = report.recall(summary_n)
        lines.append(f"{report.dataset},{report.model},{wd},{summary_n},{value!r},{report.query_count},{report.unresolvable_count}")
        tag = f" window={report.window_days}d" if report.window_days else ""
        print(f"{report.dataset} {report.model}{tag}: recall@{summary_n} = {value:.4f} "
              f"({report.query_count} queries, {report.unresolvable_count} unresolvable)")
    header = ctx.header()
    c.out("recall_summary.csv").write_text(
        (f"# {header}\n" if header else "") + "\n".join(lines) + "\n", encoding="utf-8"
    )
    return 0


def cmd_analyze_dates(ctx: Context, args) -> int:
    reports = ctx.load_reports()
    stats = date_delta_analysis(reports, ctx.load_map(), ctx.config.bin_width)
    out = Path(args.out) if args.out else ctx.config.out("date_deltas.csv")
    write_histogram(stats, out, ctx.header())
    if not stats.deltas:
        print("no resolvable parent/child pairs")
        return 0
    print(f"pairs: {len(stats.deltas)} (skipped {stats.skipped}, negative {stats.negative_count})")
    print(f"p85: {stats.percentile(85)} days")
    print(f"share with gap >= 720 days: {stats.share_at_least(720):.3f}")
    return 0


COMMANDS = {
    "build-map": cmd_build_map,
    "split": cmd_split,
    "embed": cmd_embed,
    "index": cmd_index,
    "query": cmd_query,
    "evaluate": cmd_evaluate,
    "analyze-dates": cmd_analyze_dates,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value configuration file")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="query worker threads")
    common.add_argument("--no-timestamp", action="store_true", default=argparse.SUPPRESS,
                        help="omit the generated-at header line from output files")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    settings = argparse.ArgumentParser(add_help=False)
    group = settings.add_argument_group("settings (override the config file)")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            group.add_argument(flag, dest=f"cfg_{f.name}", action="store_const", const=True, default=None)
        else:
            group.add_argument(flag, dest=f"cfg_{f.name}", default=None)
    group.add_argument("--window", dest="cfg_window_days", default=None, help="alias of --window-days")

    parser = argparse.ArgumentParser(prog="bugdup", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("build-map", parents=[common, settings], help="build the canonical duplicate map")
    p.add_argument("--out")
    p = sub.add_parser("split", parents=[common, settings], help="partition reports into train/test ids")
    p.add_argument("--out", help="output directory")
    p = sub.add_parser("embed", parents=[common, settings], help="fit TF-IDF or fetch endpoint vectors")
    p.add_argument("--out")
    p = sub.add_parser("index", parents=[common, settings], help="build and save the search index")
    p.add_argument("--out")
    p = sub.add_parser("query", parents=[common, settings], help="rank indexed reports for one probe")
    p.add_argument("--text")
    p.add_argument("--report-id", type=int)
    p.add_argument("--date", help="query date for --window with --text (YYYY-MM-DD)")
    p.add_argument("-n", "--n", type=int, default=5)
    sub.add_parser("evaluate", parents=[common, settings], help="recall curves for the test duplicates")
    p = sub.add_parser("analyze-dates", parents=[common, settings], help="parent/child creation-date gaps")
    p.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.ERROR,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
        flag_values = {
            key[4:]: value for key, value in vars(args).items()
            if key.startswith("cfg_") and value is not None
        }
        config = RunConfig.from_sources(file_values, flag_values)
        config.embedder_kind()
        workers = getattr(args, "workers", None) or os.cpu_count() or 1
        ctx = Context(config, workers, not getattr(args, "no_timestamp", False))
        return COMMANDS[args.command](ctx, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, ValidationError, IndexFormatError, FitError, UndefinedMetricError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ProviderError, EmbeddingError) as exc:
        print(f"embedding provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

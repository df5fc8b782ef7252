"""Result tables and figures for finished experiment runs.

Everything here is read-only over run directories: load the records, turn
them into comparison tables (per strategy, per category, answer-tendency
profiles), and emit matplotlib figures with CSV sidecars holding exactly
the plotted numbers, so reruns over the same records reproduce the CSV
bytes and every number in a figure can be checked without image tooling.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .data import Corpus, CorpusStats, corpus_stats
from .errors import ReportError
from .pipelines import ExperimentRecord, load_manifest, load_records
from .strategies import ExperimentSpec, registry_for, spec_from_dict

TENDENCY_ORDER = ("exact", "over", "under", "mixed")


@dataclass
class Table:
    columns: list[str]
    rows: list[list]

    def to_csv(self) -> str:
        def cell(v) -> str:
            s = "" if v is None else str(v)
            if "," in s or '"' in s or "\n" in s:
                s = '"' + s.replace('"', '""') + '"'
            return s

        lines = [",".join(cell(c) for c in self.columns)]
        for row in self.rows:
            lines.append(",".join(cell(v) for v in row))
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def render(self) -> str:
        """Fixed-width text rendering for terminals and logs."""
        def fmt(v) -> str:
            if isinstance(v, float):
                return f"{v:.4f}"
            return "" if v is None else str(v)

        grid = [list(self.columns)] + [[fmt(v) for v in row] for row in self.rows]
        widths = [max(len(r[i]) for r in grid) for i in range(len(self.columns))]
        lines = []
        for n, row in enumerate(grid):
            lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
            if n == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines)


@dataclass
class LoadedRun:
    run_dir: Path
    manifest: dict
    spec: ExperimentSpec
    records: list[ExperimentRecord]

    @property
    def label(self) -> str:
        registry = registry_for(self.spec.task)
        row = registry.get(self.spec.strategy_row)
        return row.label if row is not None else self.spec.strategy_row


def load_run(run_dir: str | Path) -> LoadedRun:
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    spec = spec_from_dict(manifest["spec"])
    try:
        records = load_records(run_dir)
    except FileNotFoundError:
        raise ReportError(f"{run_dir} has no final record file; finish or resume the run first")
    return LoadedRun(run_dir=run_dir, manifest=manifest, spec=spec, records=records)


def _as_runs(runs: Sequence[LoadedRun | str | Path]) -> list[LoadedRun]:
    out = []
    for r in runs:
        out.append(r if isinstance(r, LoadedRun) else load_run(r))
    if not out:
        raise ReportError("no runs given")
    return out


def _scored(records: Sequence[ExperimentRecord], partition: str | None) -> list[ExperimentRecord]:
    return [
        r
        for r in records
        if not r.excluded and (partition is None or r.partition == partition)
    ]


def _mean_scores(records: Sequence[ExperimentRecord]) -> dict[str, float]:
    keys = sorted({k for r in records for k in r.scores})
    out = {}
    for key in keys:
        having = [r.scores[key] for r in records if key in r.scores]
        if having:
            out[key] = sum(having) / len(having)
    return out


def summary_table(
    runs: Sequence[LoadedRun | str | Path], partition: str | None = "test"
) -> Table:
    """One row per run: macro means over the chosen partition.

    Refuses to mix tasks: means of different tasks are not comparable
    side by side.
    """
    loaded = _as_runs(runs)
    tasks = {r.spec.task for r in loaded}
    if len(tasks) > 1:
        names = ", ".join(sorted(t.value for t in tasks))
        raise ReportError(f"runs mix tasks ({names}); build one table per task")

    per_run = []
    for run in loaded:
        members = _scored(run.records, partition)
        per_run.append((run, members, _mean_scores(members)))

    metric_keys: list[str] = []
    for _, _, means in per_run:
        for key in sorted(means):
            if key not in metric_keys:
                metric_keys.append(key)

    columns = ["strategy", "partition", "count"] + metric_keys
    rows = []
    for run, members, means in per_run:
        rows.append(
            [run.label, partition or "all", len(members)]
            + [means.get(k) for k in metric_keys]
        )
    return Table(columns=columns, rows=rows)


def category_breakdown(
    run: LoadedRun | str | Path, by: str = "category", partition: str | None = "test"
) -> Table:
    """Per-category means for one run.

    ``by`` is "category" or "secondary_category"; the latter only carries
    values on image splits, and a run without any is refused.
    """
    if by not in ("category", "secondary_category"):
        raise ReportError(f"unknown grouping {by!r}")
    loaded = run if isinstance(run, LoadedRun) else load_run(run)
    members = _scored(loaded.records, partition)
    groups: dict[str, list[ExperimentRecord]] = {}
    for r in members:
        key = getattr(r, by)
        if key is None:
            continue
        groups.setdefault(key, []).append(r)
    if not groups:
        raise ReportError(f"no records carry {by}; nothing to break down")

    metric_keys: list[str] = []
    per_group = {}
    for name in sorted(groups):
        means = _mean_scores(groups[name])
        per_group[name] = means
        for key in sorted(means):
            if key not in metric_keys:
                metric_keys.append(key)

    columns = [by, "count"] + metric_keys
    rows = [
        [name, len(groups[name])] + [per_group[name].get(k) for k in metric_keys]
        for name in sorted(groups)
    ]
    return Table(columns=columns, rows=rows)


def tendency_table(
    runs: Sequence[LoadedRun | str | Path], partition: str | None = "test"
) -> Table:
    """Answer-tendency profile per run.

    Fractions are over parseable answers only and sum to 1; parse failures
    are reported separately as the format-failure rate.
    """
    loaded = _as_runs(runs)
    columns = ["strategy", "count", *TENDENCY_ORDER, "format_failure_rate"]
    rows = []
    for run in loaded:
        members = _scored(run.records, partition)
        with_tendency = [r for r in members if r.tendency is not None]
        counts = {t: 0 for t in TENDENCY_ORDER}
        for r in with_tendency:
            counts[r.tendency] += 1
        n = len(with_tendency)
        fractions = [counts[t] / n if n else 0.0 for t in TENDENCY_ORDER]
        failures = [r.scores.get("format_failure", 0.0) for r in members]
        failure_rate = sum(failures) / len(failures) if failures else 0.0
        rows.append([run.label, n, *fractions, failure_rate])
    return Table(columns=columns, rows=rows)


# ---------------------------------------------------------------------------
# figures

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _emit(table: Table, draw, out_dir: Path, stem: str) -> list[Path]:
    """Write the CSV sidecar first, then the figure from the same table."""
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    table.write_csv(csv_path)
    png_path = out_dir / f"{stem}.png"
    plt = _pyplot()
    fig = plt.figure(figsize=(8, 4.5))
    try:
        draw(plt, fig, table)
        fig.tight_layout()
        fig.savefig(png_path)
    finally:
        plt.close(fig)
    return [csv_path, png_path]


def _metric_column(table: Table, prefix: str) -> str | None:
    for c in table.columns:
        if c == prefix or c.startswith(prefix):
            return c
    return None


def plot_recall_by_category(
    run: LoadedRun | str | Path,
    out_dir: str | Path,
    by: str = "category",
    partition: str | None = "test",
    stem: str = "recall_by_category",
) -> list[Path]:
    table = category_breakdown(run, by=by, partition=partition)
    metric = _metric_column(table, "recall_at_") or _metric_column(table, "recall")
    if metric is None:
        raise ReportError("run records carry no recall metric")
    idx = table.columns.index(metric)

    def draw(plt, fig, t: Table):
        ax = fig.add_subplot(111)
        names = [r[0] for r in t.rows]
        values = [r[idx] or 0.0 for r in t.rows]
        ax.bar(range(len(names)), values)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel(metric)
        ax.set_ylim(0, 1)
        ax.set_title(f"{metric} by {by}")

    return _emit(table, draw, Path(out_dir), stem)


def plot_em_by_strategy(
    runs: Sequence[LoadedRun | str | Path],
    out_dir: str | Path,
    partition: str | None = "test",
    stem: str = "em_by_strategy",
) -> list[Path]:
    table = summary_table(runs, partition=partition)
    if "em" not in table.columns:
        raise ReportError("runs carry no exact-match scores")
    idx = table.columns.index("em")

    def draw(plt, fig, t: Table):
        ax = fig.add_subplot(111)
        names = [r[0] for r in t.rows]
        values = [r[idx] or 0.0 for r in t.rows]
        ax.barh(range(len(names)), values)
        ax.set_yticks(range(len(names)))
        ax.set_yticklabels(names)
        ax.invert_yaxis()
        ax.set_xlabel("exact match")
        ax.set_xlim(0, 1)
        ax.set_title("Exact match by strategy")

    return _emit(table, draw, Path(out_dir), stem)


def plot_tendency(
    runs: Sequence[LoadedRun | str | Path],
    out_dir: str | Path,
    partition: str | None = "test",
    stem: str = "tendency",
) -> list[Path]:
    table = tendency_table(runs, partition=partition)

    def draw(plt, fig, t: Table):
        ax = fig.add_subplot(111)
        names = [r[0] for r in t.rows]
        bottoms = [0.0] * len(names)
        for tendency in TENDENCY_ORDER:
            idx = t.columns.index(tendency)
            values = [r[idx] for r in t.rows]
            ax.bar(range(len(names)), values, bottom=bottoms, label=tendency)
            bottoms = [b + v for b, v in zip(bottoms, values)]
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel("fraction of parseable answers")
        ax.set_ylim(0, 1)
        ax.legend()
        ax.set_title("Answer tendency by strategy")

    return _emit(table, draw, Path(out_dir), stem)


def plot_reasoning_steps(
    runs: Sequence[LoadedRun | str | Path],
    out_dir: str | Path,
    partition: str | None = "test",
    stem: str = "reasoning_steps",
) -> list[Path]:
    table = summary_table(runs, partition=partition)
    if "reasoning_steps" not in table.columns:
        raise ReportError("runs carry no reasoning-step counts")
    idx = table.columns.index("reasoning_steps")

    def draw(plt, fig, t: Table):
        ax = fig.add_subplot(111)
        names = [r[0] for r in t.rows]
        values = [r[idx] or 0.0 for r in t.rows]
        ax.bar(range(len(names)), values)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel("mean reasoning steps")
        ax.set_title("Reasoning steps by strategy")

    return _emit(table, draw, Path(out_dir), stem)


def plot_token_lengths(
    source: Corpus | CorpusStats,
    out_dir: str | Path,
    stem: str = "token_lengths",
) -> list[Path]:
    stats = source if isinstance(source, CorpusStats) else corpus_stats(source)
    table = Table(
        columns=["bucket_lo", "bucket_hi", "count"],
        rows=[[lo, hi, n] for lo, hi, n in stats.histogram],
    )

    def draw(plt, fig, t: Table):
        ax = fig.add_subplot(111)
        los = [r[0] for r in t.rows]
        counts = [r[2] for r in t.rows]
        widths = [r[1] - r[0] for r in t.rows]
        ax.bar(los, counts, width=widths, align="edge")
        ax.set_xlabel("document length (whitespace tokens)")
        ax.set_ylabel("articles")
        ax.set_title("Corpus document lengths")

    return _emit(table, draw, Path(out_dir), stem)


def emit_plots(
    runs: Sequence[LoadedRun | str | Path],
    out_dir: str | Path,
    corpus: Corpus | None = None,
    partition: str | None = "test",
) -> list[Path]:
    """Emit every figure the given runs support; returns written paths.

    Figures whose inputs are absent (e.g. no recall scores for a pure QA
    run without retrieval) are skipped rather than failing the batch.
    """
    loaded = _as_runs(runs)
    out_dir = Path(out_dir)
    written: list[Path] = []

    def attempt(fn, *args, **kwargs):
        try:
            written.extend(fn(*args, **kwargs))
        except ReportError:
            pass

    attempt(plot_recall_by_category, loaded[0], out_dir, partition=partition)
    if loaded[0].spec.split in ("s3", "s4"):
        attempt(
            plot_recall_by_category,
            loaded[0],
            out_dir,
            by="secondary_category",
            partition=partition,
            stem="recall_by_secondary_category",
        )
    answered = any(r.parsed is not None for run in loaded for r in run.records)
    if answered:
        attempt(plot_em_by_strategy, loaded, out_dir, partition=partition)
        attempt(plot_tendency, loaded, out_dir, partition=partition)
        attempt(plot_reasoning_steps, loaded, out_dir, partition=partition)
    if corpus is not None:
        written.extend(plot_token_lengths(corpus, out_dir))
    return written

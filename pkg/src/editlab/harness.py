"""Experiment configuration, the lambda sweep and table emission."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import string
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datasets import Dataset, bundled_path, load_dataset
from .edit import (
    EditItem,
    EditSolution,
    TargetOptions,
    compute_targets,
    multi_layer_edit,
    preservation_key_matrices,
)
from .errors import ConfigError, EditLabError, EmptyDataset, IoError, MissingGroundTruth, MissingParaphrases
from .metrics import MetricReport, decode_matches, evaluate, query_logits
from .model import ModelConfig, ToyTransformer, greedy_decode, init_model, load_checkpoint, teacher_force_score
from .stats import summarize_column
from .vocab import detokenize, encode_answer, tokenize

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "EDITLAB_OUTPUT_DIR"
RESULT_SCHEMA_VERSION = 1
CONFIG_VERSION = 1
ALL_METRICS = ("s_acc", "t_acc", "c_acc", "kl", "topk")
DEFAULT_GRID = (1.5e2, 1.5e3, 1.5e4, 1.5e5, 1.5e6)
PRE_EDIT = "pre-edit"
ERROR_MARK = "ERROR"


# ---------------------------------------------------------------------------
# efficacy, generalization, consistency


def efficacy(model: ToyTransformer, items: Sequence[EditItem]) -> float:
    """Percentage of items whose greedy decode starts with ``target_new``."""
    if not items:
        raise EmptyDataset("no edit items")
    hits = sum(decode_matches(model, it.query, it.target_new) for it in items)
    return 100.0 * hits / len(items)


def efficacy_probability(model: ToyTransformer, items: Sequence[EditItem]) -> float:
    """Percentage of counterfactual items with ``P(target_new | q) > P(target_old | q)``."""
    items = [it for it in items if it.target_old]
    if not items:
        raise EmptyDataset("no counterfactual edit items")
    wins = 0
    for it in items:
        q = tokenize(it.query, model.vocab)
        new = teacher_force_score(model, q, encode_answer(it.target_new, model.vocab)).answer_logprob
        old = teacher_force_score(model, q, encode_answer(it.target_old, model.vocab)).answer_logprob
        wins += new > old
    return 100.0 * wins / len(items)


def generalization(model: ToyTransformer, items: Sequence[EditItem]) -> float:
    """Efficacy pooled over every paraphrase of every item."""
    if not items:
        raise EmptyDataset("no edit items")
    para = []
    for it in items:
        if not it.paraphrases:
            raise MissingParaphrases(f"item {it.id or it.query!r} has no paraphrases")
        para += [replace(it, query=p, paraphrases=()) for p in it.paraphrases]
    return efficacy(model, para)


_STRIP = str.maketrans("", "", string.punctuation + string.whitespace)


def normalize(text: str) -> str:
    """Lowercase and drop punctuation and whitespace."""
    return text.lower().translate(_STRIP)


JUDGE_SLACK = 4

Judge = Callable[[ToyTransformer, str, str], bool]


def containment_judge(model: ToyTransformer, query: str, answer: str) -> bool:
    """Consistent iff the normalized answer occurs in the normalized greedy decode.

    The decode runs for the answer's token length plus a few tokens of slack.
    """
    n = len(encode_answer(answer, model.vocab)) + JUDGE_SLACK
    decoded = detokenize(greedy_decode(model, tokenize(query, model.vocab), n), model.vocab)
    target = normalize(answer)
    return bool(target) and target in normalize(decoded)


def split_by_consistency(model: ToyTransformer, queries: Sequence, judge: Judge = containment_judge):
    """Partition queries by whether ``judge`` finds the model's answer consistent.

    Returns ``(consistent, inconsistent)`` lists, each in input order.
    """
    consistent, inconsistent = [], []
    for p in queries:
        if not getattr(p, "gt_answer", None):
            raise MissingGroundTruth(f"query {p.query!r} has no ground-truth answer")
        (consistent if judge(model, p.query, p.gt_answer) else inconsistent).append(p)
    return consistent, inconsistent


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a sweep depends on.  Loaded from a JSON file (see README)."""

    layers: tuple[int, ...] = (3, 4, 5)
    lambda_grid: tuple[float, ...] = DEFAULT_GRID
    topk: tuple[int, ...] = (1, 5, 10)
    metrics: tuple[str, ...] = ALL_METRICS
    seed: int = 0
    model_path: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: str = "toy-counterfactual"
    output_dir: str = "results"
    reg_weighting: str = "mean"
    target_steps: int = 50
    target_lr: float = 4.0
    target_early_stop: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))
        object.__setattr__(self, "lambda_grid", tuple(float(x) for x in self.lambda_grid))
        object.__setattr__(self, "topk", tuple(int(k) for k in self.topk))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        if not self.layers or list(self.layers) != sorted(set(self.layers)):
            raise ConfigError("layers must be a non-empty strictly ascending list")
        grid = self.lambda_grid
        if not grid or any(x <= 0 or not np.isfinite(x) for x in grid):
            raise ConfigError("lambda_grid must be non-empty with positive finite values")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("lambda_grid must be strictly increasing")
        if not self.topk or any(k < 1 for k in self.topk) or len(set(self.topk)) != len(self.topk):
            raise ConfigError("topk must be distinct positive integers")
        unknown = set(self.metrics) - set(ALL_METRICS)
        if unknown:
            raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {ALL_METRICS}")
        if self.reg_weighting not in ("mean", "sum"):
            raise ConfigError("reg_weighting must be 'mean' or 'sum'")
        if self.target_steps < 1 or self.target_lr <= 0:
            raise ConfigError("target_steps must be >= 1 and target_lr > 0")

    @property
    def target_options(self) -> TargetOptions:
        return TargetOptions(steps=self.target_steps, lr=self.target_lr, early_stop=self.target_early_stop)

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = {f.name: getattr(self.model, f.name) for f in fields(self.model)}
        for key in ("layers", "lambda_grid", "topk", "metrics"):
            d[key] = list(d[key])
        d["version"] = CONFIG_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "model" in d:
            try:
                d["model"] = ModelConfig(**d["model"])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad model section: {e}") from e
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e.msg} (line {e.lineno})") from e
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(raw)


def build_model(config: ExperimentConfig) -> ToyTransformer:
    """Load ``model_path`` if set, otherwise generate the model from ``seed``."""
    if config.model_path:
        return load_checkpoint(config.model_path)
    return init_model(replace(config.model, seed=config.seed))


def resolve_dataset(name_or_path: str) -> Dataset:
    """A bundled dataset name or a path to a JSONL file."""
    p = Path(name_or_path)
    if p.suffix == ".jsonl" or p.exists():
        return load_dataset(p)
    return load_dataset(bundled_path(name_or_path))


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepRow:
    label: str
    lam: float | None
    norms: dict[int, float]
    report: MetricReport | None
    efficacy: float | None
    efficacy_prob: float | None
    generalization: float | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def mean_norm(self) -> float:
        return float(np.mean(list(self.norms.values()))) if self.norms else 0.0


@dataclass
class SweepResult:
    config: ExperimentConfig
    dataset_name: str
    rows: list[SweepRow]
    summary: dict[str, dict]

    @property
    def all_ok(self) -> bool:
        return all(r.ok for r in self.rows)


def metric_columns(config: ExperimentConfig) -> list[str]:
    cols = []
    m = set(config.metrics)
    if "s_acc" in m:
        cols.append("S-acc")
    if "t_acc" in m:
        cols.append("T-acc")
    if "c_acc" in m:
        cols.append("C-acc")
    if "kl" in m:
        cols.append("D_KL")
    if "topk" in m:
        cols += [f"Top-{k}" for k in config.topk]
    return cols


def norm_columns(config: ExperimentConfig) -> list[str]:
    return [f"norm_L{l}" for l in config.layers]


def table_header(config: ExperimentConfig) -> list[str]:
    return ["row", "lambda"] + norm_columns(config) + metric_columns(config) + ["Efficacy", "Generalization"]


def _metric_value(report: MetricReport, col: str):
    if col == "S-acc":
        return report.s_accuracy
    if col == "T-acc":
        return report.t_accuracy
    if col == "C-acc":
        return report.c_accuracy
    if col == "D_KL":
        return report.kl_mean
    return report.topk_overlap.get(int(col.split("-")[1]))


def row_values(row: SweepRow, config: ExperimentConfig) -> dict[str, float | None]:
    """Numeric cells of a successful row keyed by column name."""
    out: dict[str, float | None] = {c: row.norms.get(l) for c, l in zip(norm_columns(config), config.layers)}
    for col in metric_columns(config):
        out[col] = _metric_value(row.report, col)
    out["Efficacy"] = row.efficacy
    out["Generalization"] = row.generalization
    return out


def _percent_column(col: str) -> bool:
    return col != "D_KL" and not col.startswith("norm_")


def summarize(rows: Sequence[SweepRow], config: ExperimentConfig, ddof: int = 0) -> dict[str, dict]:
    """tau against the cross-layer mean norm, range, coverage and std for each column.

    The pre-edit row takes part with norm 0.  Rows that errored are left out.
    """
    good = [r for r in rows if r.ok]
    if len(good) < 2:
        return {}
    ref = [r.mean_norm for r in good]
    out = {}
    for col in metric_columns(config) + ["Efficacy", "Generalization"]:
        vals = [row_values(r, config)[col] for r in good]
        if any(v is None for v in vals):
            continue
        bounds = (0.0, 100.0) if _percent_column(col) else None
        out[col] = summarize_column(vals, reference=ref, bounds=bounds, ddof=ddof).to_dict()
    return out


def _has_paraphrases(items) -> bool:
    return bool(items) and all(it.paraphrases for it in items)


def _evaluate_row(label, lam, pre, post, dataset, config, pre_logits, solution: EditSolution | None) -> SweepRow:
    items = dataset.edit_items
    report = evaluate(
        pre,
        post,
        dataset.preservation_queries,
        edit_items=items,
        topk=config.topk,
        metrics=config.metrics,
        pre_logits=pre_logits,
    )
    norms = dict(solution.mean_reg_norm) if solution else {l: 0.0 for l in config.layers}
    return SweepRow(
        label=label,
        lam=lam,
        norms=norms,
        report=report,
        efficacy=efficacy(post, items) if items else None,
        efficacy_prob=efficacy_probability(post, items) if dataset.kind == "counterfactual" and items else None,
        generalization=generalization(post, items) if _has_paraphrases(items) else None,
    )


def run_sweep(config: ExperimentConfig, dataset: Dataset, model: ToyTransformer | None = None) -> SweepResult:
    """Pre-edit row, then one row per lambda, every edit starting from the same model.

    Metrics are measured on the dataset's preservation queries; the keys of
    the edit regulariser come from its background queries when it has them.
    Edit targets and those keys depend only on the pre-edit model and are
    computed once.  A row whose edit or evaluation fails records the error
    and the sweep moves on.
    """
    pre = model if model is not None else build_model(config)
    for l in config.layers:
        pre._check_layer(l)
    if not dataset.edit_items:
        raise EmptyDataset("dataset has no edit items")
    if not dataset.preservation_queries:
        raise EmptyDataset("dataset has no preservation queries")
    for k in config.topk:
        if k > pre.vocab_size:
            raise ConfigError(f"top-k {k} exceeds vocabulary size {pre.vocab_size}")

    pre_logits = query_logits(pre, dataset.preservation_queries)
    rows = [_evaluate_row(PRE_EDIT, None, pre, pre, dataset, config, pre_logits, None)]

    targets = keys = None
    try:
        targets = compute_targets(pre, dataset.edit_items, config.layers[-1], config.target_options)
        keys = preservation_key_matrices(pre, dataset.key_queries, config.layers)
    except EditLabError as e:
        log.error("target computation failed: %s", e)
        setup_error = f"{type(e).__name__}: {e}"
    for lam in config.lambda_grid:
        label = f"lambda={lam:.6g}"
        if targets is None:
            rows.append(SweepRow(label, lam, {}, None, None, None, None, error=setup_error))
            continue
        try:
            post, sol = multi_layer_edit(
                pre,
                dataset.edit_items,
                config.layers,
                lam,
                dataset.key_queries,
                targets=targets,
                preservation_keys=keys,
                reg_weighting=config.reg_weighting,
            )
            rows.append(_evaluate_row(label, lam, pre, post, dataset, config, pre_logits, sol))
        except (EditLabError, ArithmeticError) as e:
            log.error("row %s failed: %s", label, e)
            rows.append(SweepRow(label, lam, {}, None, None, None, None, error=f"{type(e).__name__}: {e}"))
    return SweepResult(config=config, dataset_name=dataset.name, rows=rows, summary=summarize(rows, config))


# ---------------------------------------------------------------------------
# output


def fmt(x) -> str:
    """Six significant digits; empty for missing values."""
    if x is None:
        return ""
    x = float(x)
    if x == 0:
        return "0"
    return f"{x:.6g}"


SUMMARY_ROWS = ("tau", "range", "coverage", "std")


def table_rows(result: SweepResult) -> list[list[str]]:
    config = result.config
    header = table_header(config)
    out = [header]
    for r in result.rows:
        cells = [r.label, fmt(r.lam)]
        if r.ok:
            vals = row_values(r, config)
            cells += [fmt(vals[c]) for c in header[2:]]
        else:
            cells += [ERROR_MARK] * (len(header) - 2)
        out.append(cells)
    for stat in SUMMARY_ROWS:
        cells = [stat, ""]
        for c in header[2:]:
            entry = result.summary.get(c)
            cells.append(fmt(entry[stat]) if entry else "")
        out.append(cells)
    return out


def result_to_dict(result: SweepResult) -> dict:
    rows = []
    for r in result.rows:
        rows.append(
            {
                "row": r.label,
                "lambda": r.lam,
                "norms": {str(l): v for l, v in r.norms.items()},
                "mean_norm": r.mean_norm if r.ok else None,
                "metrics": r.report.to_dict() if r.report else None,
                "efficacy": r.efficacy,
                "efficacy_probability": r.efficacy_prob,
                "generalization": r.generalization,
                "error": r.error,
            }
        )
    return {
        "schema_version": RESULT_SCHEMA_VERSION,
        "dataset": result.dataset_name,
        "config": result.config.to_dict(),
        "columns": table_header(result.config),
        "rows": rows,
        "summary": result.summary,
    }


def emit_table(result: SweepResult, fmt_: str, path) -> Path:
    """Write the sweep table as ``"csv"`` or its ``"json"`` mirror.

    Raises:
        IoError: the file cannot be written.
    """
    path = Path(path)
    if fmt_ == "csv":
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(table_rows(result))
        text = buf.getvalue()
    elif fmt_ == "json":
        text = json.dumps(result_to_dict(result), indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError("format must be 'csv' or 'json'")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    return path

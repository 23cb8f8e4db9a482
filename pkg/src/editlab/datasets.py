"""JSON-lines datasets and the deterministic fixture generators.

File layout: the first non-blank line is a header record::

    {"type": "header", "name": "...", "kind": "counterfactual" | "factual", "version": 1}

followed by one record per edit item (``"type": "edit"``), preservation query
(``"type": "preservation"``) or background query (``"type": "background"``).
Every record carries a unique ``id``.

Preservation queries are where specificity is measured.  Background queries
supply the preservation keys ``K_J`` of the edit objective; a dataset without
them uses its preservation queries instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .edit import EditItem, PreservationQuery
from .errors import DatasetError, IoError
from .model import ToyTransformer, greedy_decode, _run
from .vocab import OBJECT_WORDS, RELATION_WORDS, SPECIALS, SUBJECTS, detokenize, encode_answer, tokenize

DATASET_VERSION = 1
KINDS = ("counterfactual", "factual")

_EDIT_FIELDS = {"type", "id", "query", "target_new", "target_old", "decisive_index", "paraphrases", "neighborhood_queries"}
_PRES_FIELDS = {"type", "id", "query", "decisive_index", "gt_answer"}


@dataclass(frozen=True)
class Dataset:
    name: str
    kind: str
    edit_items: tuple[EditItem, ...]
    preservation_queries: tuple[PreservationQuery, ...]
    background_queries: tuple[PreservationQuery, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        object.__setattr__(self, "edit_items", tuple(self.edit_items))
        object.__setattr__(self, "preservation_queries", tuple(self.preservation_queries))
        object.__setattr__(self, "background_queries", tuple(self.background_queries))
        if self.kind == "counterfactual":
            for it in self.edit_items:
                if not it.target_old:
                    raise DatasetError(f"counterfactual edit {it.id!r} is missing field 'target_old'")
        records = self.edit_items + self.preservation_queries + self.background_queries
        ids = [r.id for r in records if r.id is not None]
        if len(ids) != len(set(ids)):
            raise DatasetError("record ids are not unique")

    @property
    def key_queries(self) -> tuple[PreservationQuery, ...]:
        """Queries whose keys form ``K_J``: the background set if present."""
        return self.background_queries or self.preservation_queries


def _edit_record(it: EditItem) -> dict:
    rec = {"type": "edit", "id": it.id, "query": it.query, "target_new": it.target_new}
    if it.target_old is not None:
        rec["target_old"] = it.target_old
    if it.decisive_index is not None:
        rec["decisive_index"] = it.decisive_index
    rec["paraphrases"] = list(it.paraphrases)
    rec["neighborhood_queries"] = list(it.neighborhood_queries)
    return rec


def _pres_record(p: PreservationQuery, rtype: str = "preservation") -> dict:
    rec = {"type": rtype, "id": p.id, "query": p.query}
    if p.decisive_index is not None:
        rec["decisive_index"] = p.decisive_index
    if p.gt_answer is not None:
        rec["gt_answer"] = p.gt_answer
    return rec


def dumps_dataset(ds: Dataset) -> str:
    lines = [json.dumps({"type": "header", "name": ds.name, "kind": ds.kind, "version": DATASET_VERSION})]
    lines += [json.dumps(_edit_record(it)) for it in ds.edit_items]
    lines += [json.dumps(_pres_record(p)) for p in ds.preservation_queries]
    lines += [json.dumps(_pres_record(p, "background")) for p in ds.background_queries]
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    try:
        Path(path).write_text(dumps_dataset(ds))
    except OSError as e:
        raise IoError(str(e)) from e


def _require_str(rec, key, line, optional=False):
    val = rec.get(key)
    if val is None:
        if optional:
            return None
        raise DatasetError(f"missing field {key!r}", line)
    if not isinstance(val, str) or not val.strip():
        raise DatasetError(f"field {key!r} must be a non-empty string", line)
    return val


def _optional_index(rec, line):
    idx = rec.get("decisive_index")
    if idx is not None and (not isinstance(idx, int) or isinstance(idx, bool)):
        raise DatasetError("field 'decisive_index' must be an integer", line)
    return idx


def _str_list(rec, key, line):
    val = rec.get(key, [])
    if not isinstance(val, list) or not all(isinstance(s, str) and s.strip() for s in val):
        raise DatasetError(f"field {key!r} must be a list of non-empty strings", line)
    return tuple(val)


def parse_dataset(lines: Iterable[str]) -> Dataset:
    header = None
    edits, pres, background, seen = [], [], [], {}
    for line_no, raw in enumerate(lines, 1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as e:
            raise DatasetError(f"invalid JSON: {e.msg}", line_no) from None
        if not isinstance(rec, dict):
            raise DatasetError("record must be a JSON object", line_no)
        rtype = rec.get("type")
        if header is None:
            if rtype != "header":
                raise DatasetError("first record must be the header", line_no)
            if rec.get("version") != DATASET_VERSION:
                raise DatasetError(f"unsupported dataset version {rec.get('version')!r}", line_no)
            kind = rec.get("kind")
            if kind not in KINDS:
                raise DatasetError(f"field 'kind' must be one of {KINDS}", line_no)
            header = (_require_str(rec, "name", line_no), kind)
            continue
        rid = _require_str(rec, "id", line_no)
        if rid in seen:
            raise DatasetError(f"duplicate id {rid!r} (first on line {seen[rid]})", line_no)
        seen[rid] = line_no
        if rtype == "edit":
            extra = set(rec) - _EDIT_FIELDS
            if extra:
                raise DatasetError(f"unknown fields {sorted(extra)}", line_no)
            target_old = _require_str(rec, "target_old", line_no, optional=header[1] == "factual")
            edits.append(
                EditItem(
                    query=_require_str(rec, "query", line_no),
                    target_new=_require_str(rec, "target_new", line_no),
                    target_old=target_old,
                    decisive_index=_optional_index(rec, line_no),
                    paraphrases=_str_list(rec, "paraphrases", line_no),
                    neighborhood_queries=_str_list(rec, "neighborhood_queries", line_no),
                    id=rid,
                )
            )
        elif rtype in ("preservation", "background"):
            extra = set(rec) - _PRES_FIELDS
            if extra:
                raise DatasetError(f"unknown fields {sorted(extra)}", line_no)
            (pres if rtype == "preservation" else background).append(
                PreservationQuery(
                    query=_require_str(rec, "query", line_no),
                    decisive_index=_optional_index(rec, line_no),
                    gt_answer=_require_str(rec, "gt_answer", line_no, optional=True),
                    id=rid,
                )
            )
        else:
            raise DatasetError(f"unknown record type {rtype!r}", line_no)
    if header is None:
        raise DatasetError("empty dataset file")
    return Dataset(
        name=header[0],
        kind=header[1],
        edit_items=tuple(edits),
        preservation_queries=tuple(pres),
        background_queries=tuple(background),
    )


def load_dataset(path) -> Dataset:
    """Read and validate a JSONL dataset.

    Raises:
        DatasetError: on any parse or validation failure, with the line number.
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    return parse_dataset(text.splitlines())


def bundled_path(name: str) -> Path:
    return Path(__file__).with_name("data") / f"{name}.jsonl"


def load_bundled(name: str) -> Dataset:
    return load_dataset(bundled_path(name))



from __future__ import annotations

import json

import pytest

from editlab.datasets import (
    Dataset,
    bundled_path,
    dumps_dataset,
    load_dataset,
    parse_dataset,
    save_dataset,
)
from editlab.edit import EditItem, PreservationQuery
from editlab.errors import DatasetError, IoError
from editlab.fixtures import build_bundled, bundled_names

HEADER = json.dumps({"type": "header", "name": "t", "kind": "counterfactual", "version": 1})


def _edit(**kw):
    rec = {"type": "edit", "id": "e0", "query": "city of Mike", "target_new": "Paris", "target_old": "Rome"}
    rec.update(kw)
    return json.dumps({k: v for k, v in rec.items() if v is not None})


def test_empty_file_is_rejected(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    with pytest.raises(DatasetError):
        load_dataset(p)


def test_missing_file_is_rejected(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope.jsonl")


def test_minimal_file_parses():
    ds = parse_dataset([HEADER, _edit(), json.dumps({"type": "preservation", "id": "p0", "query": "city of Anna",
                                                     "gt_answer": "Rome"})])
    assert ds.name == "t" and ds.kind == "counterfactual"
    assert ds.edit_items[0] == EditItem("city of Mike", "Paris", "Rome", id="e0")
    assert ds.preservation_queries[0].gt_answer == "Rome"
    assert ds.key_queries == ds.preservation_queries


def test_missing_target_old_names_the_field():
    with pytest.raises(DatasetError) as err:
        parse_dataset([HEADER, _edit(target_old=None)])
    assert "target_old" in str(err.value)


@pytest.mark.parametrize("field", ["query", "target_new"])
def test_missing_required_field_names_it(field):
    with pytest.raises(DatasetError) as err:
        parse_dataset([HEADER, _edit(**{field: None})])
    assert field in str(err.value)
    assert err.value.line == 2


def test_errors_report_line_numbers():
    lines = [HEADER, _edit(), "{not json"]
    with pytest.raises(DatasetError) as err:
        parse_dataset(lines)
    assert err.value.line == 3
    with pytest.raises(DatasetError) as err:
        parse_dataset([HEADER, _edit(), _edit()])
    assert err.value.line == 3 and "duplicate" in str(err.value)


@pytest.mark.parametrize(
    "lines",
    [
        [_edit()],
        [json.dumps({"type": "header", "name": "t", "kind": "counterfactual", "version": 2})],
        [json.dumps({"type": "header", "name": "t", "kind": "weird", "version": 1})],
        [HEADER, _edit(colour="red")],
        [HEADER, json.dumps({"type": "mystery"})],
        [HEADER, "[1, 2]"],
        [HEADER, _edit(decisive_index="2")],
        [HEADER, _edit(paraphrases=["ok", ""])],
    ],
)
def test_malformed_inputs(lines):
    with pytest.raises(DatasetError):
        parse_dataset(lines)


def test_factual_dataset_allows_missing_target_old():
    header = json.dumps({"type": "header", "name": "f", "kind": "factual", "version": 1})
    ds = parse_dataset([header, _edit(target_old=None)])
    assert ds.edit_items[0].target_old is None


def test_round_trip(tmp_path, counterfactual):
    p = tmp_path / "rt.jsonl"
    save_dataset(counterfactual, p)
    back = load_dataset(p)
    assert back == counterfactual
    assert dumps_dataset(back) == dumps_dataset(counterfactual)


def test_round_trip_of_hand_built_dataset():
    ds = Dataset(
        "h", "factual",
        (EditItem("city of Mike", "Paris", paraphrases=("what is the city of Mike",), id="e0"),),
        (PreservationQuery("sport of Anna", decisive_index=2, gt_answer="golf", id="p0"),),
        (PreservationQuery("team of Bruno", id="b0"),),
    )
    back = parse_dataset(dumps_dataset(ds).splitlines())
    assert back == ds
    assert back.key_queries == ds.background_queries


def test_save_reports_io_errors(tmp_path, counterfactual):
    with pytest.raises(IoError):
        save_dataset(counterfactual, tmp_path / "missing-dir" / "x.jsonl")


def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset("x", "counterfactual", (EditItem("city of Mike", "Paris"),), ())
    with pytest.raises(DatasetError):
        Dataset("x", "other", (), ())
    with pytest.raises(DatasetError):
        Dataset("x", "factual", (EditItem("city of Mike", "Paris", id="a"),), (PreservationQuery("q", id="a"),))


def test_bundled_sizes(counterfactual, factual, inconsistency):
    assert (len(counterfactual.edit_items), len(counterfactual.preservation_queries),
            len(counterfactual.background_queries)) == (32, 512, 72)
    assert (len(factual.edit_items), len(factual.preservation_queries), len(factual.background_queries)) == (32, 128, 72)
    assert len(inconsistency.preservation_queries) == 36
    # the evaluated queries and the key set are disjoint
    evaluated = {p.query for p in counterfactual.preservation_queries}
    assert not evaluated & {b.query for b in counterfactual.background_queries}


@pytest.mark.parametrize("name", bundled_names())
def test_bundled_files_match_a_fresh_build(model, name):
    assert dumps_dataset(build_bundled(model, name)) == bundled_path(name).read_text()

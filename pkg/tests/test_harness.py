from __future__ import annotations

import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from editlab import harness
from editlab.datasets import Dataset
from editlab.edit import EditItem, PreservationQuery
from editlab.errors import ConfigError, IoError, MissingGroundTruth, MissingParaphrases, NumericalError
from editlab.harness import (
    ExperimentConfig,
    containment_judge,
    efficacy,
    emit_table,
    fmt,
    generalization,
    load_config,
    normalize,
    result_to_dict,
    run_sweep,
    split_by_consistency,
    table_header,
    table_rows,
)
from editlab.model import greedy_decode
from editlab.vocab import detokenize, tokenize

SMALL = ExperimentConfig(lambda_grid=(1.5e2, 1.5e4))


@pytest.fixture(scope="module")
def small_dataset(counterfactual):
    return replace(counterfactual, edit_items=counterfactual.edit_items[:8],
                   preservation_queries=counterfactual.preservation_queries[:64])


def test_pre_edit_efficacy_is_low(model, counterfactual):
    assert efficacy(model, counterfactual.edit_items) < 20


def test_vacuous_edit_has_full_efficacy(model):
    items = []
    for q in ["city of Mike", "sport of Anna", "team of Bruno"]:
        out = greedy_decode(model, tokenize(q, model.vocab), 1)
        if out:
            items.append(EditItem(q, detokenize(out, model.vocab), paraphrases=(q,)))
    assert items
    assert efficacy(model, items) == 100.0
    # a paraphrase identical to the query scores the same
    assert generalization(model, items) == efficacy(model, items)


def test_generalization_requires_paraphrases(model):
    with pytest.raises(MissingParaphrases):
        generalization(model, [EditItem("city of Mike", "Paris")])


def test_efficacy_and_generalization_ranges(default_sweep):
    for row in default_sweep.rows:
        assert 0.0 <= row.efficacy <= 100.0
        assert 0.0 <= row.generalization <= 100.0
    pre, strongest = default_sweep.rows[0], default_sweep.rows[1]
    assert strongest.efficacy > pre.efficacy


def test_normalize():
    assert normalize(" New-York, City! ") == "newyorkcity"


def test_judge_accepts_the_exact_decode_and_rejects_unknown_answers(model):
    q = "home of Yuki"
    out = detokenize(greedy_decode(model, tokenize(q, model.vocab), 2), model.vocab)
    assert out
    assert containment_judge(model, q, out)
    assert not containment_judge(model, q, "zzqx")


def test_split_requires_ground_truth(model):
    with pytest.raises(MissingGroundTruth):
        split_by_consistency(model, [PreservationQuery("city of Mike")])


def test_split_with_custom_judge_keeps_order(model):
    qs = [PreservationQuery(f"city of {n}", gt_answer="x", id=n) for n in ("Mike", "Anna", "Omar")]
    cons, inc = split_by_consistency(model, qs, judge=lambda m, q, a: "Anna" not in q)
    assert [p.id for p in cons] == ["Mike", "Omar"] and [p.id for p in inc] == ["Anna"]


def test_pre_edit_row_law(default_sweep):
    pre = default_sweep.rows[0]
    assert pre.label == harness.PRE_EDIT and pre.lam is None
    assert pre.report.kl_mean == 0.0
    assert pre.report.topk_overlap == {1: 100.0, 5: 100.0, 10: 100.0}
    assert all(v == 0.0 for v in pre.norms.values())


def test_norms_decrease_along_the_grid(default_sweep):
    rows = default_sweep.rows[1:]
    assert [r.lam for r in rows] == list(harness.DEFAULT_GRID)
    for l in default_sweep.config.layers:
        norms = [r.norms[l] for r in rows]
        assert all(b < a for a, b in zip(norms, norms[1:]))


def test_rows_do_not_chain(model, small_dataset):
    before = [lw.w_out.copy() for lw in model.layers]
    forward = run_sweep(SMALL, small_dataset, model)
    for lw, w in zip(model.layers, before):
        assert np.array_equal(lw.w_out, w)
    # a row only depends on its own lambda, not on the rows run before it
    alone = run_sweep(replace(SMALL, lambda_grid=(1.5e4,)), small_dataset, model)
    assert result_to_dict(alone)["rows"][1] == result_to_dict(forward)["rows"][2]


def test_huge_lambda_row_matches_pre_edit(model, small_dataset):
    res = run_sweep(replace(SMALL, lambda_grid=(1e12,)), small_dataset, model)
    row = res.rows[1]
    assert row.report.kl_mean < 1e-9
    assert row.report.topk_overlap == {1: 100.0, 5: 100.0, 10: 100.0}
    assert row.report.s_accuracy == res.rows[0].report.s_accuracy


def test_failed_row_is_recorded_and_sweep_continues(model, small_dataset, monkeypatch):
    real = harness.multi_layer_edit

    def flaky(pre, items, layers, lam, *a, **kw):
        if lam == 1.5e2:
            raise NumericalError("synthetic failure")
        return real(pre, items, layers, lam, *a, **kw)

    monkeypatch.setattr(harness, "multi_layer_edit", flaky)
    res = run_sweep(SMALL, small_dataset, model)
    assert not res.all_ok
    assert "synthetic failure" in res.rows[1].error
    assert res.rows[2].ok
    table = table_rows(res)
    assert table[2][2:] == [harness.ERROR_MARK] * (len(table[0]) - 2)
    d = result_to_dict(res)
    assert d["rows"][1]["error"].startswith("NumericalError")


def test_header_layout():
    cfg = ExperimentConfig(layers=(2, 4), topk=(1, 3))
    header = table_header(cfg)
    expected = (["row", "lambda"] + ["norm_L2", "norm_L4"]
                + ["S-acc", "T-acc", "C-acc", "D_KL", "Top-1", "Top-3"] + ["Efficacy", "Generalization"])
    assert header == expected
    assert len(header) == 2 + len(cfg.layers) + 4 + len(cfg.topk) + 2


def test_csv_and_json_round_trip(default_sweep, tmp_path):
    cfg = default_sweep.config
    csv_path = emit_table(default_sweep, "csv", tmp_path / "t.csv")
    json_path = emit_table(default_sweep, "json", tmp_path / "t.json")
    rows = list(csv.reader(csv_path.open()))
    n_cols = 2 + len(cfg.layers) + 4 + len(cfg.topk) + 2
    assert all(len(r) == n_cols for r in rows)
    assert len(rows) == 1 + 1 + len(cfg.lambda_grid) + len(harness.SUMMARY_ROWS)
    assert [r[0] for r in rows[-4:]] == list(harness.SUMMARY_ROWS)
    d = json.loads(json_path.read_text())
    assert d["schema_version"] == 1 and d["columns"] == rows[0]
    # every numeric CSV cell is the JSON value rounded to six significant digits
    col = rows[0].index("D_KL")
    for r_csv, r_json in zip(rows[1:], d["rows"]):
        assert r_csv[col] == fmt(r_json["metrics"]["kl_mean"])
    assert ExperimentConfig.from_dict(d["config"]) == cfg


def test_emit_errors(default_sweep, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(IoError):
        emit_table(default_sweep, "csv", blocker / "t.csv")
    with pytest.raises(ValueError):
        emit_table(default_sweep, "xml", tmp_path / "t.xml")


def test_factual_sweep_leaves_c_accuracy_blank(model, factual):
    ds = replace(factual, edit_items=factual.edit_items[:4], preservation_queries=factual.preservation_queries[:32])
    res = run_sweep(SMALL, ds, model)
    table = table_rows(res)
    col = table[0].index("C-acc")
    assert all(r[col] == "" for r in table[1:])
    assert "C-acc" not in res.summary


def test_metric_selection_shrinks_table(model, small_dataset):
    cfg = replace(SMALL, metrics=("kl", "topk"), topk=(1,))
    res = run_sweep(cfg, small_dataset, model)
    assert table_rows(res)[0][5:] == ["D_KL", "Top-1", "Efficacy", "Generalization"]


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(layers=()),
        dict(layers=(4, 3)),
        dict(lambda_grid=()),
        dict(lambda_grid=(10.0, 1.0)),
        dict(lambda_grid=(-1.0,)),
        dict(topk=(0,)),
        dict(topk=(1, 1)),
        dict(metrics=("bleu",)),
        dict(reg_weighting="max"),
        dict(target_steps=0),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kwargs)


def test_config_round_trip_and_errors(tmp_path):
    cfg = ExperimentConfig(layers=(1, 2), lambda_grid=(1.0, 10.0), seed=7)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_config(p) == cfg
    p.write_text(json.dumps({"layerz": [1]}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("{")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(json.dumps({"version": 9}))
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_topk_beyond_vocab_is_rejected(model, small_dataset):
    with pytest.raises(ConfigError):
        run_sweep(ExperimentConfig(topk=(model.vocab_size + 1,)), small_dataset, model)


def test_out_of_range_layer_is_rejected(model, small_dataset):
    with pytest.raises(ValueError):
        run_sweep(ExperimentConfig(layers=(model.config.n_layers,)), small_dataset, model)


def test_output_dir_env_override(monkeypatch):
    cfg = ExperimentConfig(output_dir="here")
    monkeypatch.delenv(harness.OUTPUT_DIR_ENV, raising=False)
    assert str(cfg.resolved_output_dir()) == "here"
    monkeypatch.setenv(harness.OUTPUT_DIR_ENV, "/tmp/elsewhere")
    assert str(cfg.resolved_output_dir()) == "/tmp/elsewhere"


def test_fmt():
    assert fmt(None) == ""
    assert fmt(0.0) == "0"
    assert fmt(1234567.0) == "1.23457e+06"
    assert fmt(0.5) == "0.5"


def test_sweep_on_dataset_without_background_uses_preservation_keys(model, counterfactual):
    ds = Dataset("nb", "counterfactual", counterfactual.edit_items[:4], counterfactual.preservation_queries[:80])
    res = run_sweep(replace(SMALL, lambda_grid=(1.5e4,)), ds, model)
    assert res.all_ok and ds.key_queries == ds.preservation_queries

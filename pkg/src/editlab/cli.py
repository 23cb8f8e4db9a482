"""Command-line entry point: ``editlab <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import fixtures
from .datasets import save_dataset
from .edit import multi_layer_edit
from .errors import EditLabError
from .harness import (
    ExperimentConfig,
    build_model,
    emit_table,
    load_config,
    resolve_dataset,
    run_sweep,
    split_by_consistency,
)
from .metrics import evaluate
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint

log = logging.getLogger("editlab")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for name in ("layers", "lambda_grid", "topk"):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    if getattr(args, "model", None):
        overrides["model_path"] = args.model
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    return replace(cfg, **overrides) if overrides else cfg


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_model(args) -> int:
    cfg = ModelConfig(
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ff=args.d_ff,
        max_seq=args.max_seq,
        seed=args.seed or 0,
    )
    save_checkpoint(init_model(cfg), args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_gen_dataset(args) -> int:
    model = load_checkpoint(args.model) if args.model else init_model(ModelConfig(seed=args.seed or 0))
    if args.name in fixtures.bundled_names():
        ds = fixtures.build_bundled(model, args.name)
    else:
        ds = fixtures.generate_dataset(
            model,
            kind=args.kind,
            n_edits=args.n_edits,
            n_preservation=args.n_preservation,
            n_background=args.n_background,
            seed=args.seed or 0,
            name=args.name,
        )
    save_dataset(ds, args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_edit(args) -> int:
    cfg = _config(args)
    model = build_model(cfg)
    ds = resolve_dataset(cfg.dataset)
    post, sol = multi_layer_edit(
        model,
        ds.edit_items,
        cfg.layers,
        args.lam,
        ds.key_queries,
        target_opts=cfg.target_options,
        reg_weighting=cfg.reg_weighting,
    )
    save_checkpoint(post, args.out)
    _print_json(sol.to_dict())
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    pre = load_checkpoint(args.pre)
    post = load_checkpoint(args.post)
    ds = resolve_dataset(cfg.dataset)
    report = evaluate(pre, post, ds.preservation_queries, ds.edit_items, topk=cfg.topk, metrics=cfg.metrics)
    _print_json(report.to_dict())
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    result = run_sweep(cfg, resolve_dataset(cfg.dataset), build_model(cfg))
    out = cfg.resolved_output_dir()
    csv_path = emit_table(result, "csv", out / f"{args.name}.csv")
    json_path = emit_table(result, "json", out / f"{args.name}.json")
    print(csv_path.read_text(), end="")
    log.info("wrote %s and %s", csv_path, json_path)
    failed = [r.label for r in result.rows if not r.ok]
    if failed:
        log.error("rows failed: %s", ", ".join(failed))
        return 1
    return 0


def cmd_split(args) -> int:
    cfg = _config(args)
    model = build_model(cfg)
    ds = resolve_dataset(cfg.dataset)
    cons, incons = split_by_consistency(model, ds.preservation_queries)
    out = {
        "consistent": [p.id for p in cons],
        "inconsistent": [p.id for p in incons],
        "n_consistent": len(cons),
        "n_inconsistent": len(incons),
    }
    _print_json(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="editlab", description="Knowledge-editing specificity experiments.")
    p.add_argument("--seed", type=int, default=None, help="generation seed (model and datasets)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="write a freshly initialised model checkpoint")
    g.add_argument("--out", required=True)
    defaults = ModelConfig()
    for name in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq"):
        g.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(defaults, name))
    g.set_defaults(func=cmd_gen_model)

    g = sub.add_parser("gen-dataset", help="write a fixture dataset (JSONL)")
    g.add_argument("--name", required=True, help="a bundled recipe name or a new dataset name")
    g.add_argument("--out", required=True)
    g.add_argument("--model", help="model checkpoint (default: generated from --seed)")
    g.add_argument("--kind", choices=("counterfactual", "factual"), default="counterfactual")
    g.add_argument("--n-edits", type=int, default=32)
    g.add_argument("--n-preservation", type=int, default=128)
    g.add_argument("--n-background", type=int, default=72)
    g.set_defaults(func=cmd_gen_dataset)

    def common(g):
        g.add_argument("--config", help="JSON experiment config")
        g.add_argument("--model", help="model checkpoint (overrides the config)")
        g.add_argument("--dataset", help="bundled dataset name or JSONL path")
        g.add_argument("--layers", type=_ints, help="comma-separated edited layers")
        g.add_argument("--topk", type=_ints, help="comma-separated k values")

    g = sub.add_parser("edit", help="apply one batch edit and save the edited checkpoint")
    common(g)
    g.add_argument("--lam", type=float, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_edit)

    g = sub.add_parser("evaluate", help="compare a pre- and post-edit checkpoint")
    common(g)
    g.add_argument("--pre", required=True)
    g.add_argument("--post", required=True)
    g.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("sweep", help="run the lambda sweep and write CSV + JSON tables")
    common(g)
    g.add_argument("--lambda-grid", dest="lambda_grid", type=_floats)
    g.add_argument("--output-dir", dest="output_dir")
    g.add_argument("--name", default="sweep", help="output file stem")
    g.set_defaults(func=cmd_sweep)

    g = sub.add_parser("split", help="split preservation queries by answer consistency")
    common(g)
    g.set_defaults(func=cmd_split)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except EditLabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

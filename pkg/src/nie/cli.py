"""Command-line entry point.

Subcommands: synth, train, oracle, nora, mask, predict-baseline, eval, bench,
pipeline.  Exit codes: 0 success, 2 validation error, 3 compute failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NieError, ValidationError
from .evalharness import concentration, evaluate_method, fit_loglog_slope
from .graph import load_dataset, make_split, save_dataset
from .models import TrainConfig, init_model, load_checkpoint, save_checkpoint, train
from .oracle import read_score_meta, read_scores, write_scores
from .pipeline import inference_graph, run_pipeline

log = logging.getLogger("nie")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="base random seed")
    p.add_argument("--workers", type=int, default=1, help="parallel workers where supported")
    p.add_argument("--cache-dir", default=None,
                   help="artifact cache (NIE_CACHE_DIR overrides; default ./.nie-cache)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nie", description=__doc__)
    ap.add_argument("--version", action="version", version=f"nie {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--kind", required=True,
                   choices=["erdos-renyi", "barabasi-albert", "star", "path", "citation"])
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--p", type=float, default=None, help="edge probability (erdos-renyi)")
    p.add_argument("--m", type=int, default=None, help="attachment count (barabasi-albert)")
    p.add_argument("--features", type=int, default=16)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train a GNN and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", required=True, choices=["gcn", "sage-mean", "gat1"])
    p.add_argument("--task", required=True, choices=["node", "link"])
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--split-cycle", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_common(p)

    p = sub.add_parser("oracle", help="exact influence by brute force")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=["node", "link"])
    p.add_argument("--split-cycle", type=int, default=0)
    p.add_argument("--out", required=True, help="scores CSV path")
    p.add_argument("--resume", action="store_true",
                   help="continue from <out>.partial.csv if present")
    _add_common(p)

    p = sub.add_parser("nora", help="one-pass gradient approximation")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=["node", "link"])
    p.add_argument("--split-cycle", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON file of hyperparameters")
    p.add_argument("--tune", default=None,
                   help="oracle scores CSV restricted to the tuning subset")
    p.add_argument("--mode", default="full", choices=["full", "t1", "t2"])
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("mask", help="node-mask optimization baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=["node", "link"])
    p.add_argument("--split-cycle", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON file of hyperparameters")
    p.add_argument("--tune", default=None,
                   help="oracle scores CSV restricted to the tuning subset")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("predict-baseline", help="influence-prediction baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None, help="unused; kept for flag parity")
    p.add_argument("--task", required=True, choices=["node", "link"])
    p.add_argument("--split-cycle", type=int, default=0)
    p.add_argument("--variant", required=True, choices=["n", "e"])
    p.add_argument("--labels", required=True,
                   help="oracle scores CSV restricted to the labeled subset")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="few-shot Pearson report (JSON + scatter figure)")
    p.add_argument("--oracle", required=True, help="oracle scores CSV")
    p.add_argument("--method", required=True, help="method scores CSV")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report JSON path")
    _add_common(p)

    p = sub.add_parser("bench", help="brute force vs. approximation scaling")
    p.add_argument("--sizes", default="500,1000,2000,4000")
    p.add_argument("--models", default="gcn")
    p.add_argument("--out", required=True, help="bench CSV path")
    _add_common(p)

    p = sub.add_parser("pipeline", help="end-to-end protocol from a config file")
    p.add_argument("--config", required=True, help="pipeline JSON config")
    p.add_argument("--out", default=None, help="output directory for the manifest")
    _add_common(p)
    return ap


def _load_graph_cli(data_dir):
    graph, manifest = load_dataset(data_dir)
    log.info("loaded %s: %d nodes, %d edges, %d features",
             data_dir, graph.num_nodes, graph.num_edges, graph.num_features)
    return graph, manifest


def _model_setup(args):
    """(graph, split, inference graph, eval pairs, model) for score commands."""
    graph, _ = _load_graph_cli(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    if model.task != args.task:
        raise ValidationError(
            f"checkpoint was trained for task {model.task!r}, not {args.task!r}"
        )
    split = make_split(graph, args.task, args.seed, args.split_cycle)
    gv, pairs = inference_graph(graph, args.task, split)
    return graph, split, gv, pairs, model


def cmd_synth(args) -> int:
    from .generators import citation_graph, generate_synthetic

    if args.kind == "citation":
        g = citation_graph(args.nodes, seed=args.seed,
                           num_features=args.features, num_classes=args.classes)
    else:
        g = generate_synthetic(args.kind, args.nodes, seed=args.seed, p=args.p, m=args.m,
                               num_features=args.features, num_classes=args.classes)
    save_dataset(args.out, g)
    print(f"wrote {args.out}: {g.num_nodes} nodes, {g.num_edges} edges, "
          f"{g.num_features} features")
    return 0


def cmd_train(args) -> int:
    graph, manifest = _load_graph_cli(args.data)
    split = make_split(graph, args.task, args.seed, args.split_cycle)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed,
                      hidden=args.hidden, num_layers=args.layers)
    out_dim = int(manifest["num_classes"]) if args.task == "node" else args.hidden
    from .graph import message_graph

    train_graph = graph if args.task == "node" else message_graph(graph, split)
    model = init_model(args.model, args.task, graph.num_features, args.hidden, out_dim,
                       num_layers=args.layers, seed=args.seed)
    result = train(model, train_graph, split, cfg)
    save_checkpoint(args.out, result.model,
                    extra={"metrics": result.metrics, "train_config": cfg.to_dict(),
                           "cycle": args.split_cycle})
    print(json.dumps(result.metrics, sort_keys=True))
    return 0


def cmd_oracle(args) -> int:
    from .oracle import oracle_link, oracle_node

    _, _, gv, pairs, model = _model_setup(args)
    progress = Path(args.out).with_suffix(".partial.csv")
    if not args.resume:
        progress.unlink(missing_ok=True)
    if args.task == "node":
        result = oracle_node(model, gv, workers=args.workers, progress_path=progress)
    else:
        result = oracle_link(model, gv, pairs, workers=args.workers, progress_path=progress)
    write_scores(args.out, result.scores, meta=result)
    print(f"wrote {args.out} ({result.wall_time:.1f}s)")
    return 0


def _tuning_subset(tune_path, graph):
    ids, vals = read_scores(tune_path)
    oracle_scores = np.zeros(graph.num_nodes)
    oracle_scores[ids] = vals
    return ids, oracle_scores


def cmd_nora(args) -> int:
    from .nora import NoraConfig, nora_scores, tune_nora

    _, _, gv, pairs, model = _model_setup(args)
    if args.tune:
        ids, oracle_scores = _tuning_subset(args.tune, gv)
        cfg, val_r = tune_nora(model, gv, oracle_scores, ids, args.task, pairs, mode=args.mode)
        log.info("tuned config (subset pearson %.4f): %s", val_r, cfg.to_dict())
    elif args.config:
        cfg = NoraConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = NoraConfig()
    result = nora_scores(model, gv, cfg, args.task, pairs, mode=args.mode)
    write_scores(args.out, result.scores, meta=result)
    print(f"wrote {args.out} ({result.wall_time * 1000:.0f} ms)")
    return 0


def cmd_mask(args) -> int:
    from .baselines import MaskConfig, mask_scores, tune_mask

    _, _, gv, pairs, model = _model_setup(args)
    if args.tune:
        ids, oracle_scores = _tuning_subset(args.tune, gv)
        cfg, result, val_r = tune_mask(model, gv, oracle_scores, ids, args.task, pairs)
        log.info("tuned config (subset pearson %.4f): %s", val_r, cfg.to_dict())
    else:
        cfg = MaskConfig(**json.loads(Path(args.config).read_text())) if args.config else MaskConfig()
        result = mask_scores(model, gv, cfg, args.task, pairs)
    write_scores(args.out, result.scores, meta=result)
    print(f"wrote {args.out}")
    return 0


def cmd_predict_baseline(args) -> int:
    from .baselines import PredictConfig, predict_e_scores, predict_n_scores

    graph, _ = _load_graph_cli(args.data)
    split = make_split(graph, args.task, args.seed, args.split_cycle)
    gv, _ = inference_graph(graph, args.task, split)
    ids, vals = read_scores(args.labels)
    oracle_scores = np.zeros(graph.num_nodes)
    oracle_scores[ids] = vals
    rng = np.random.default_rng(args.seed)
    shuffled = rng.permutation(ids)
    n_train = max(2, int(round(0.7 * len(ids))))
    fn = predict_n_scores if args.variant == "n" else predict_e_scores
    result = fn(gv, oracle_scores, np.sort(shuffled[:n_train]), np.sort(shuffled[n_train:]),
                PredictConfig(seed=args.seed), task=args.task)
    write_scores(args.out, result.scores, meta=result)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .evalharness import draw_subset
    from .figures import save_score_scatter

    _, oracle_scores = read_scores(args.oracle)
    _, method_scores = read_scores(args.method)
    if len(oracle_scores) != len(method_scores):
        raise ValidationError("oracle and method score files differ in length")
    subset = draw_subset(len(oracle_scores), args.split_seed)
    meta = read_score_meta(args.method)
    report = evaluate_method(
        method_scores, oracle_scores, subset,
        method=meta.get("provenance", "method"), task=meta.get("task", "node"),
    )
    report.wall_time_oracle = read_score_meta(args.oracle).get("wall_time", 0.0)
    report.wall_time_method = meta.get("wall_time", 0.0)
    out = Path(args.out)
    payload = report.to_dict()
    payload["concentration"] = {
        str(k): v for k, v in concentration(np.abs(oracle_scores)).items()
    }
    out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    mask = np.ones(len(oracle_scores), dtype=bool)
    mask[subset] = False
    fig_path = save_score_scatter(
        oracle_scores, method_scores, out.with_suffix(".png"),
        method_name=report.method, test_ids=np.flatnonzero(mask), pearson_r=report.pearson,
    )
    print(f"wrote {out} and {fig_path} (pearson {report.pearson:.4f})")
    return 0


def cmd_bench(args) -> int:
    import csv as _csv

    from .evalharness import bench
    from .figures import save_bench_figure

    sizes = tuple(int(s) for s in args.sizes.split(","))
    rows_all = []
    results = {}
    for kind in args.models.split(","):
        results[kind] = bench(sizes, model_kind=kind, seed=args.seed)
        rows_all += [(kind, r.method, r.num_nodes, r.num_edges, r.seconds)
                     for r in results[kind]["rows"]]
    out = Path(args.out)
    with out.open("w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["model", "method", "num_nodes", "num_edges", "seconds"])
        w.writerows(rows_all)
    md = ["| model | method | nodes | edges | seconds |", "|---|---|---|---|---|"]
    md += [f"| {a} | {b} | {c} | {d} | {e:.4g} |" for a, b, c, d, e in rows_all]
    for kind, res in results.items():
        gap = res["slopes"]["oracle"] - res["slopes"]["nora"]
        md.append(f"\n{kind}: fitted log-log slopes oracle {res['slopes']['oracle']:.2f}, "
                  f"one-pass {res['slopes']['nora']:.2f} (gap {gap:.2f})")
    out.with_suffix(".md").write_text("\n".join(md) + "\n")
    save_bench_figure(results[args.models.split(",")[0]], out.with_suffix(".png"))
    print(f"wrote {out}, {out.with_suffix('.md')}, {out.with_suffix('.png')}")
    return 0


def cmd_pipeline(args) -> int:
    config = json.loads(Path(args.config).read_text())
    manifest = run_pipeline(config, cache_dir=args.cache_dir, out_dir=args.out,
                            workers=args.workers)
    for method, report in manifest.reports.items():
        print(f"{method}: pearson {report['pearson']:.4f} "
              f"(per-cycle {['%.4f' % r for r in report['per_run_pearson']]})")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "oracle": cmd_oracle,
    "nora": cmd_nora,
    "mask": cmd_mask,
    "predict-baseline": cmd_predict_baseline,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "pipeline": cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NieError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

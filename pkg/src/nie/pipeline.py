"""Run orchestration: train -> oracle -> tune -> approximate -> eval, with
content-keyed artifact caching and a reproducibility manifest.

A stage's cache key hashes its parameters plus the digests of its input
artifacts, so reruns skip stages whose inputs have not changed and a cleared
cache reproduces identical score files (all randomness is seeded).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NieError, ValidationError
from .evalharness import (
    EvalReport,
    draw_subset,
    evaluate_method,
    mean_report,
    subset_seed,
)
from .generators import citation_graph, generate_synthetic
from .graph import Graph, SplitSpec, load_dataset, make_split, message_graph, save_dataset
from .models import GnnModel, TrainConfig, init_model, load_checkpoint, save_checkpoint, train
from .oracle import InfluenceScores, oracle_link, oracle_node, read_score_meta, read_scores, write_scores

log = logging.getLogger("nie")

DEFAULT_CACHE = ".nie-cache"
METHODS = ("nora", "nora-t1", "nora-t2", "mask", "predict-n", "predict-e")

# the stand-in corpus used when no real citation dataset directory is given
CITATION_CORPUS = {"kind": "citation", "n": 2708, "features": 1433, "classes": 7, "seed": 11}


def resolve_cache_dir(explicit: str | None = None) -> Path:
    """NIE_CACHE_DIR overrides the flag, which overrides the default."""
    env = os.environ.get("NIE_CACHE_DIR")
    return Path(env or explicit or DEFAULT_CACHE)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Cache:
    root: Path

    def slot(self, stage: str, key: str) -> Path:
        d = self.root / stage / key
        d.mkdir(parents=True, exist_ok=True)
        return d

    def done(self, slot: Path) -> bool:
        return (slot / ".done.json").exists()

    def finish(self, slot: Path, info: dict) -> None:
        (slot / ".done.json").write_text(json.dumps(info, sort_keys=True, indent=2))

    def info(self, slot: Path) -> dict:
        return json.loads((slot / ".done.json").read_text())


_GRAPH_CACHE: dict[str, tuple[float, Graph, dict]] = {}


def load_graph(data_dir: str | Path) -> tuple[Graph, dict]:
    """Dataset loader with an in-process cache keyed by path and mtime."""
    key = str(Path(data_dir).resolve())
    mtime = (Path(data_dir) / "manifest.json").stat().st_mtime
    hit = _GRAPH_CACHE.get(key)
    if hit and hit[0] == mtime:
        return hit[1], hit[2]
    graph, manifest = load_dataset(data_dir)
    _GRAPH_CACHE[key] = (mtime, graph, manifest)
    return graph, manifest


def dataset_digest(data_dir: str | Path) -> str:
    d = Path(data_dir)
    parts = {
        f.name: file_sha256(f)
        for f in sorted(d.iterdir())
        if f.suffix in (".json", ".csv")
        and not f.name.endswith(".meta.json")
        and not f.name.startswith(".")  # cache markers are not dataset content
    }
    return _digest(parts)


def ensure_dataset(cache: Cache, dataset_cfg: dict | str) -> Path:
    """Materialize a dataset directory: a path is used as-is, a synth spec is
    generated into the cache."""
    if isinstance(dataset_cfg, (str, Path)):
        d = Path(dataset_cfg)
        if not (d / "manifest.json").exists():
            raise ValidationError(f"{d}: not a dataset directory (no manifest.json)")
        return d
    key = _digest(dataset_cfg)
    slot = cache.slot("dataset", key)
    if not cache.done(slot):
        t0 = time.perf_counter()
        cfg = dict(dataset_cfg)
        kind = cfg.pop("kind")
        if kind == "citation":
            g = citation_graph(
                cfg.get("n", 2708), seed=cfg.get("seed", 11),
                num_features=cfg.get("features", 1433), num_classes=cfg.get("classes", 7),
            )
        else:
            g = generate_synthetic(
                kind, cfg["n"], seed=cfg.get("seed", 0), p=cfg.get("p"), m=cfg.get("m"),
                num_features=cfg.get("features", 16), num_classes=cfg.get("classes", 3),
            )
        save_dataset(slot, g)
        cache.finish(slot, {"config": dataset_cfg, "wall_time": time.perf_counter() - t0})
    return slot


def citation_corpus_dir(cache: Cache) -> Path:
    """The corpus the acceptance protocol runs on: NIE_CORA_DIR when set,
    otherwise the deterministic stand-in."""
    env = os.environ.get("NIE_CORA_DIR")
    if env:
        return Path(env)
    return ensure_dataset(cache, CITATION_CORPUS)


def _split_for(graph: Graph, task: str, seed: int, cycle: int) -> SplitSpec:
    return make_split(graph, task, seed, cycle)


def inference_graph(graph: Graph, task: str, split: SplitSpec) -> tuple[Graph, np.ndarray | None]:
    """Graph the trained model sees at inference plus the link evaluation pairs."""
    if task == "node":
        return graph, None
    msg = message_graph(graph, split)
    pairs, _ = split.eval_edges()
    return msg, pairs


def ensure_checkpoint(
    cache: Cache, data_dir: Path, model_cfg: dict, task: str, cycle: int, seed: int
) -> Path:
    key = _digest(
        {"data": dataset_digest(data_dir), "model": model_cfg, "task": task,
         "cycle": cycle, "seed": seed}
    )
    slot = cache.slot("train", key)
    out = slot / "checkpoint.json"
    if not cache.done(slot):
        t0 = time.perf_counter()
        graph, manifest = load_graph(data_dir)
        split = _split_for(graph, task, seed, cycle)
        cfg = TrainConfig(
            lr=model_cfg.get("lr", 0.5),
            momentum=model_cfg.get("momentum", 0.9),
            weight_decay=model_cfg.get("weight_decay", 5e-4),
            epochs=model_cfg.get("epochs", 300),
            seed=seed,
            hidden=model_cfg.get("hidden", 64),
            num_layers=model_cfg.get("layers", 2),
        )
        out_dim = (
            int(manifest["num_classes"]) if task == "node" else cfg.hidden
        )
        train_graph = graph if task == "node" else message_graph(graph, split)
        model = init_model(
            model_cfg["kind"], task, graph.num_features, cfg.hidden, out_dim,
            num_layers=cfg.num_layers, seed=seed,
        )
        result = train(model, train_graph, split, cfg)
        save_checkpoint(out, result.model, extra={
            "metrics": result.metrics, "train_config": cfg.to_dict(),
            "model_config": model_cfg, "task": task, "cycle": cycle,
        })
        cache.finish(slot, {
            "wall_time": time.perf_counter() - t0, "metrics": result.metrics,
        })
        log.info("trained %s/%s cycle %d: %s", model_cfg["kind"], task, cycle, result.metrics)
    return out


def ensure_oracle(
    cache: Cache, data_dir: Path, ckpt_path: Path, task: str, cycle: int, seed: int,
    workers: int = 1,
) -> Path:
    key = _digest(
        {"ckpt": file_sha256(ckpt_path), "task": task, "cycle": cycle, "seed": seed}
    )
    slot = cache.slot("oracle", key)
    out = slot / "scores.csv"
    if not cache.done(slot):
        model, _ = load_checkpoint(ckpt_path)
        graph, _ = load_graph(data_dir)
        split = _split_for(graph, task, seed, cycle)
        gv, pairs = inference_graph(graph, task, split)
        progress = slot / "partial.csv"
        if task == "node":
            result = oracle_node(model, gv, workers=workers, progress_path=progress)
        else:
            result = oracle_link(model, gv, pairs, workers=workers, progress_path=progress)
        write_scores(out, result.scores, meta=result)
        cache.finish(slot, {"wall_time": result.wall_time})
    return out


def ensure_subset(
    cache: Cache, data_dir: Path, model_kind: str, task: str, cycle: int, seed: int
) -> Path:
    """Persisted 10% tuning-subset id list (re-drawn per cycle)."""
    graph, _ = load_graph(data_dir)
    sseed = subset_seed(dataset_digest(data_dir), model_kind, task, cycle, seed)
    key = _digest({"seed": sseed, "n": graph.num_nodes})
    slot = cache.slot("subset", key)
    out = slot / "subset_ids.json"
    if not cache.done(slot):
        ids = draw_subset(graph.num_nodes, sseed)
        out.write_text(json.dumps({"seed": sseed, "ids": ids.tolist()}, sort_keys=True))
        cache.finish(slot, {"count": int(len(ids))})
    return out


def read_subset(path: Path) -> np.ndarray:
    return np.array(json.loads(path.read_text())["ids"], dtype=np.int64)


def run_method(
    cache: Cache,
    method: str,
    data_dir: Path,
    ckpt_path: Path,
    oracle_path: Path,
    subset_path: Path,
    task: str,
    cycle: int,
    seed: int,
) -> Path:
    """Produce a method's full score vector (tuned on the subset where the
    method tunes)."""
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}; choose from {METHODS}")
    key = _digest({
        "method": method, "ckpt": file_sha256(ckpt_path),
        "oracle": file_sha256(oracle_path), "subset": file_sha256(subset_path),
        "task": task, "cycle": cycle, "seed": seed,
    })
    slot = cache.slot("method", key)
    out = slot / "scores.csv"
    if cache.done(slot):
        return out
    t_start = time.perf_counter()
    from .baselines import PredictConfig, predict_e_scores, predict_n_scores, tune_mask
    from .nora import nora_scores, tune_nora

    model, _ = load_checkpoint(ckpt_path)
    graph, _ = load_graph(data_dir)
    split = _split_for(graph, task, seed, cycle)
    gv, pairs = inference_graph(graph, task, split)
    _, oracle_scores = read_scores(oracle_path, num_nodes=graph.num_nodes)
    subset = read_subset(subset_path)
    info: dict = {"method": method}
    if method.startswith("nora"):
        mode = {"nora": "full", "nora-t1": "t1", "nora-t2": "t2"}[method]
        cfg, val_r = tune_nora(model, gv, oracle_scores, subset, task, pairs, mode=mode)
        result = nora_scores(model, gv, cfg, task, pairs, mode=mode)
        info.update({"config": cfg.to_dict(), "validation_pearson": val_r})
    elif method == "mask":
        cfg, result, val_r = tune_mask(model, gv, oracle_scores, subset, task, pairs)
        info.update({"config": cfg.to_dict(), "validation_pearson": val_r})
    else:
        n_train = max(2, int(round(0.7 * len(subset))))
        rng = np.random.default_rng(subset_seed("predict", method, task, cycle, seed))
        shuffled = rng.permutation(subset)
        train_ids, valid_ids = np.sort(shuffled[:n_train]), np.sort(shuffled[n_train:])
        fn = predict_n_scores if method == "predict-n" else predict_e_scores
        result = fn(gv, oracle_scores, train_ids, valid_ids, PredictConfig(seed=seed), task=task)
    write_scores(out, result.scores, meta=result)
    info["wall_time"] = result.wall_time
    info["wall_time_total"] = time.perf_counter() - t_start  # includes tuning
    cache.finish(slot, info)
    return out


def evaluate_run(
    method_path: Path, oracle_path: Path, subset_path: Path, *,
    method: str, task: str, cycle: int,
) -> EvalReport:
    ids, oracle_scores = read_scores(oracle_path)
    _, method_scores = read_scores(method_path)
    subset = read_subset(subset_path)
    report = evaluate_method(
        method_scores, oracle_scores, subset, method=method, task=task, cycle_index=cycle
    )
    report.wall_time_oracle = read_score_meta(oracle_path).get("wall_time", 0.0)
    report.wall_time_method = read_score_meta(method_path).get("wall_time", 0.0)
    return report


@dataclass
class RunManifest:
    config: dict
    tool_version: str = __version__
    created: str = ""
    seeds: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)

    def add(self, name: str, path: Path) -> None:
        self.artifacts[name] = {"path": str(path), "sha256": file_sha256(path)}

    def write(self, path: Path) -> None:
        payload = {
            "config": self.config, "tool_version": self.tool_version,
            "created": self.created, "seeds": self.seeds,
            "artifacts": self.artifacts, "reports": self.reports,
        }
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def run_pipeline(config: dict, cache_dir: Path | None = None, out_dir: Path | None = None,
                 workers: int = 1) -> RunManifest:
    """End-to-end protocol for one dataset/model/task configuration.

    Config keys: dataset (path or synth spec), model (dict with kind/...),
    task, methods (list), seed, cycles (list of split cycles).  Any stage
    failure aborts with the stage name; completed artifacts stay cached.
    """
    for req in ("dataset", "model", "task", "methods"):
        if req not in config:
            raise ValidationError(f"pipeline config missing {req!r}")
    for m in config["methods"]:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}; choose from {METHODS}")
    task = config["task"]
    if task not in ("node", "link"):
        raise ValidationError(f"unknown task {task!r}")
    seed = int(config.get("seed", 0))
    cycles = list(config.get("cycles", [0]))
    cache = Cache(resolve_cache_dir(str(cache_dir) if cache_dir else None))
    manifest = RunManifest(config=config, created=time.strftime("%Y-%m-%dT%H:%M:%S"))
    manifest.seeds = {"base": seed}

    stage = "dataset"
    try:
        data_dir = ensure_dataset(cache, config["dataset"])
        per_method: dict[str, list[EvalReport]] = {m: [] for m in config["methods"]}
        for cycle in cycles:
            stage = f"train[cycle={cycle}]"
            ckpt = ensure_checkpoint(cache, data_dir, config["model"], task, cycle, seed)
            manifest.add(f"checkpoint.c{cycle}", ckpt)
            stage = f"oracle[cycle={cycle}]"
            oracle_path = ensure_oracle(cache, data_dir, ckpt, task, cycle, seed, workers)
            manifest.add(f"oracle.c{cycle}", oracle_path)
            stage = f"subset[cycle={cycle}]"
            subset_path = ensure_subset(
                cache, data_dir, config["model"]["kind"], task, cycle, seed
            )
            manifest.add(f"subset.c{cycle}", subset_path)
            for method in config["methods"]:
                stage = f"{method}[cycle={cycle}]"
                mpath = run_method(
                    cache, method, data_dir, ckpt, oracle_path, subset_path, task, cycle, seed
                )
                manifest.add(f"{method}.c{cycle}", mpath)
                stage = f"eval[{method}, cycle={cycle}]"
                per_method[method].append(
                    evaluate_run(mpath, oracle_path, subset_path,
                                 method=method, task=task, cycle=cycle)
                )
        for method, reports in per_method.items():
            agg = mean_report(reports)
            manifest.reports[method] = agg.to_dict()
    except NieError:
        raise
    except Exception as e:
        raise NieError(f"stage {stage} failed: {e}") from e

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest.write(out_dir / "manifest.json")
    return manifest

"""Ground-truth removal influence by brute force.

One full inference per candidate removal; the base-graph prediction is
computed once and reused.  Candidates are embarrassingly parallel and each
writes to its own slot, so the result vector is identical (bitwise) no matter
how the work is scheduled.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .graph import Graph, RemovalView
from .models import GnnModel, edge_probabilities, model_forward


@dataclass
class InfluenceScores:
    """Per-node nonnegative influence with provenance."""

    scores: np.ndarray
    provenance: str            # oracle | nora | mask | predict
    task: str                  # node | link
    model_fingerprint: str = ""
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)


def oracle_node(
    model: GnnModel,
    graph: Graph,
    *,
    workers: int = 1,
    progress_path: str | Path | None = None,
    checkpoint_every: int = 500,
) -> InfluenceScores:
    """Exact node-classification influence: for each removal, the summed L1
    distance between base and modified predicted class distributions over all
    other nodes."""
    t0 = time.perf_counter()
    base = T._val(model_forward(model, graph).predictions)
    scores = np.full(graph.num_nodes, np.nan)
    done = _load_progress(progress_path, scores)

    def influence_of(r: int) -> float:
        pred = T._val(model_forward(model, RemovalView(graph, r)).predictions)
        d = np.abs(base - pred).sum(axis=1)
        return float(d.sum() - d[r])

    _run(influence_of, scores, done, workers, progress_path, checkpoint_every)
    return InfluenceScores(
        scores, "oracle", "node", model.fingerprint(), time.perf_counter() - t0
    )


def oracle_link(
    model: GnnModel,
    graph: Graph,
    eval_edges: np.ndarray,
    *,
    workers: int = 1,
    progress_path: str | Path | None = None,
    checkpoint_every: int = 500,
) -> InfluenceScores:
    """Exact link-prediction influence over the evaluation pair set.

    Pairs incident to the removed node are excluded from its sum (their
    endpoint embedding is meaningless once the node is gone).
    """
    pairs = np.asarray(eval_edges, dtype=np.int64).reshape(-1, 2)
    if pairs.size == 0:
        raise ValidationError("link oracle needs a non-empty evaluation edge set")
    keys = pairs[:, 0] * graph.num_nodes + pairs[:, 1]
    if np.unique(keys).size != keys.size:
        raise ValidationError("duplicate pair in the link evaluation set")
    t0 = time.perf_counter()
    base_emb = T._val(model_forward(model, graph).predictions)
    base_probs = T._val(edge_probabilities(base_emb, pairs)).reshape(-1)
    scores = np.full(graph.num_nodes, np.nan)
    done = _load_progress(progress_path, scores)

    def influence_of(r: int) -> float:
        emb = T._val(model_forward(model, RemovalView(graph, r)).predictions)
        probs = T._val(edge_probabilities(emb, pairs)).reshape(-1)
        keep = (pairs[:, 0] != r) & (pairs[:, 1] != r)
        return float(np.abs(base_probs[keep] - probs[keep]).sum())

    _run(influence_of, scores, done, workers, progress_path, checkpoint_every)
    return InfluenceScores(
        scores, "oracle", "link", model.fingerprint(), time.perf_counter() - t0
    )


def _run(influence_of, scores, done, workers, progress_path, checkpoint_every):
    todo = [r for r in range(scores.shape[0]) if r not in done]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for r, val in zip(todo, pool.map(influence_of, todo)):
                scores[r] = val
    else:
        since_flush = 0
        for r in todo:
            scores[r] = influence_of(r)
            since_flush += 1
            if progress_path and since_flush >= checkpoint_every:
                _save_progress(progress_path, scores)
                since_flush = 0
    if progress_path:
        Path(progress_path).unlink(missing_ok=True)


def _load_progress(progress_path, scores) -> set[int]:
    if not progress_path or not Path(progress_path).exists():
        return set()
    ids, vals = read_scores(progress_path, allow_partial=True)
    scores[ids] = vals
    return set(int(i) for i in ids)


def _save_progress(progress_path, scores):
    ids = np.flatnonzero(~np.isnan(scores))
    write_scores(progress_path, scores[ids], ids=ids)


# --- scores file format ------------------------------------------------------


def write_scores(
    path: str | Path,
    scores: np.ndarray,
    *,
    ids: np.ndarray | None = None,
    meta: InfluenceScores | None = None,
) -> None:
    """CSV ``node_id,score`` with 9 significant digits (+ JSON meta sidecar)."""
    path = Path(path)
    if ids is None:
        ids = np.arange(len(scores))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "score"])
        for i, s in zip(ids, scores):
            writer.writerow([int(i), f"{s:.9g}"])
    if meta is not None:
        sidecar = {
            "provenance": meta.provenance,
            "task": meta.task,
            "model_fingerprint": meta.model_fingerprint,
            "wall_time": meta.wall_time,
            **meta.extra,
        }
        path.with_suffix(path.suffix + ".meta.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
        )


def read_scores(
    path: str | Path, *, allow_partial: bool = False, num_nodes: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (ids, scores).  With ``num_nodes`` set, requires a full vector
    and returns it in id order."""
    ids, vals = [], []
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["node_id", "score"]:
            raise ValidationError(f"{path}: expected header 'node_id,score'")
        for row in reader:
            if not row:
                continue
            ids.append(int(row[0]))
            vals.append(float(row[1]))
    ids = np.array(ids, dtype=np.int64)
    vals = np.array(vals, dtype=np.float64)
    if num_nodes is not None:
        if not allow_partial and (len(ids) != num_nodes or not np.array_equal(
            np.sort(ids), np.arange(num_nodes)
        )):
            raise ValidationError(f"{path}: expected one score per node (N={num_nodes})")
        full = np.full(num_nodes, np.nan)
        full[ids] = vals
        return np.arange(num_nodes), full
    return ids, vals


def read_score_meta(path: str | Path) -> dict:
    sidecar = Path(path).with_suffix(Path(path).suffix + ".meta.json")
    if sidecar.exists():
        return json.loads(sidecar.read_text())
    return {}

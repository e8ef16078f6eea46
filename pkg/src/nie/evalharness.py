"""Few-shot evaluation protocol, correlation metrics, stability and
concentration analytics, label-usage sweeps, and runtime benchmarking."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedCorrelationError, ValidationError

SUBSET_FRACTION = 0.10


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Sample Pearson correlation; refuses short or zero-variance input."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValidationError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 3:
        raise UndefinedCorrelationError("need at least 3 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("zero variance")
    return float((xc * yc).sum() / (sx * sy))


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Rank correlation (ties averaged); diagnostic companion to pearson."""
    return pearson(rankdata(x), rankdata(y))


@dataclass
class EvalReport:
    method: str
    task: str
    pearson: float
    spearman: float
    cycle_index: int = 0
    label_fraction: float = SUBSET_FRACTION
    wall_time_oracle: float = 0.0
    wall_time_method: float = 0.0
    per_run_pearson: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def mean_report(reports: list[EvalReport]) -> EvalReport:
    """Aggregate over split cycles: mean Pearson/Spearman, per-run values kept."""
    if not reports:
        raise ValidationError("nothing to aggregate")
    return EvalReport(
        method=reports[0].method,
        task=reports[0].task,
        pearson=float(np.mean([r.pearson for r in reports])),
        spearman=float(np.mean([r.spearman for r in reports])),
        cycle_index=-1,
        label_fraction=reports[0].label_fraction,
        wall_time_oracle=float(np.sum([r.wall_time_oracle for r in reports])),
        wall_time_method=float(np.sum([r.wall_time_method for r in reports])),
        per_run_pearson=[r.pearson for r in reports],
    )


def subset_seed(dataset_id: str, model_kind: str, task: str, cycle: int, base_seed: int = 0) -> int:
    """Deterministic seed for the 10% tuning subset of one configuration."""
    import hashlib

    key = f"{dataset_id}|{model_kind}|{task}|{cycle}|{base_seed}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def draw_subset(num_nodes: int, seed: int, fraction: float = SUBSET_FRACTION) -> np.ndarray:
    """Uniform labeled subset (sorted ids) for tuning/training.

    At least 3 ids (Pearson needs them) and at least 3 held out.
    """
    if num_nodes < 6:
        raise ValidationError("few-shot protocol needs at least 6 nodes")
    rng = np.random.default_rng(seed)
    k = min(max(3, int(round(fraction * num_nodes))), num_nodes - 3)
    return np.sort(rng.choice(num_nodes, size=k, replace=False))


def evaluate_method(
    method_scores: np.ndarray,
    oracle_scores: np.ndarray,
    subset_ids: np.ndarray,
    *,
    method: str = "method",
    task: str = "node",
    cycle_index: int = 0,
    test_ids: np.ndarray | None = None,
) -> EvalReport:
    """Pearson/Spearman on the held-out complement of the tuning subset."""
    method_scores = np.asarray(method_scores, dtype=np.float64)
    oracle_scores = np.asarray(oracle_scores, dtype=np.float64)
    if method_scores.shape != oracle_scores.shape:
        raise ValidationError("score vectors differ in length")
    subset_ids = np.asarray(subset_ids, dtype=np.int64)
    if test_ids is None:
        mask = np.ones(len(oracle_scores), dtype=bool)
        mask[subset_ids] = False
        test_ids = np.flatnonzero(mask)
    else:
        test_ids = np.asarray(test_ids, dtype=np.int64)
        if np.intersect1d(test_ids, subset_ids).size:
            raise ValidationError("tuning subset overlaps the test subset")
    return EvalReport(
        method=method,
        task=task,
        pearson=pearson(method_scores[test_ids], oracle_scores[test_ids]),
        spearman=spearman(method_scores[test_ids], oracle_scores[test_ids]),
        cycle_index=cycle_index,
        label_fraction=len(subset_ids) / len(oracle_scores),
    )


def stability_analysis(scores_by_key: dict[tuple[str, int], np.ndarray]) -> dict:
    """Pairwise Pearson over oracle score vectors keyed by (model_kind, hidden).

    Returns the label list, the full matrix, the mean of the upper triangle,
    and separate means over same-kind and cross-kind pairs.
    """
    keys = list(scores_by_key)
    if len(keys) < 2:
        raise ValidationError("stability analysis needs at least two score vectors")
    n = len(scores_by_key[keys[0]])
    for k in keys:
        if len(scores_by_key[k]) != n:
            raise ValidationError("score vectors differ in length")
    m = len(keys)
    mat = np.eye(m)
    intra, inter = [], []
    for i in range(m):
        for j in range(i + 1, m):
            r = pearson(scores_by_key[keys[i]], scores_by_key[keys[j]])
            mat[i, j] = mat[j, i] = r
            (intra if keys[i][0] == keys[j][0] else inter).append(r)
    upper = mat[np.triu_indices(m, k=1)]
    return {
        "keys": [f"{k[0]}/h{k[1]}" for k in keys],
        "matrix": mat,
        "mean": float(upper.mean()),
        "intra_model_mean": float(np.mean(intra)) if intra else None,
        "inter_model_mean": float(np.mean(inter)) if inter else None,
    }


def concentration(scores: np.ndarray, ks: tuple[int, ...] = (1, 3, 10)) -> dict[int, float]:
    """Share of total influence held by the top k% of nodes."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0 or np.any(scores < 0):
        raise ValidationError("concentration needs nonnegative scores")
    total = scores.sum()
    if total == 0:
        raise ValidationError("concentration undefined for all-zero scores")
    ordered = np.sort(scores)[::-1]
    cum = np.cumsum(ordered)
    out = {}
    for k in ks:
        top = int(np.ceil(k * len(scores) / 100.0))
        out[k] = float(cum[top - 1] / total)
    return out


def label_sweep(
    run_method,
    oracle_scores: np.ndarray,
    fractions: tuple[float, ...] = (0.10, 0.20, 0.30, 0.40),
    *,
    seed: int = 0,
    method: str = "predict-n",
    task: str = "node",
) -> list[EvalReport]:
    """Evaluate a label-hungry method at nested label fractions.

    ``run_method(train_ids, valid_ids)`` must return a full score vector.
    Larger fractions reuse the smaller fractions' ids (nested prefixes of one
    permutation) so the sweep is comparable.
    """
    n = len(oracle_scores)
    for f in fractions:
        if not (0.0 < f < 1.0):
            raise ValidationError("label fractions must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    reports = []
    for f in sorted(fractions):
        k = max(3, int(round(f * n)))
        subset = order[:k]
        n_train = max(2, int(round(0.7 * k)))       # train : valid = 7 : 3
        scores = run_method(np.sort(subset[:n_train]), np.sort(subset[n_train:]))
        rep = evaluate_method(
            scores, oracle_scores, np.sort(subset), method=method, task=task
        )
        rep.label_fraction = f
        reports.append(rep)
    return reports


# --- runtime benchmarking ---------------------------------------------------


@dataclass
class BenchRow:
    method: str
    num_nodes: int
    num_edges: int
    seconds: float


def fit_loglog_slope(sizes: list[int], times: list[float]) -> float:
    """Least-squares exponent of time vs. size on the log-log plane."""
    if len(sizes) < 3:
        raise ValidationError("slope fit needs at least 3 sizes")
    return float(np.polyfit(np.log(np.asarray(sizes, dtype=float)),
                            np.log(np.asarray(times, dtype=float)), 1)[0])


def bench(
    sizes: tuple[int, ...] = (500, 1000, 2000, 4000),
    *,
    model_kind: str = "gcn",
    mean_degree: float = 8.0,
    num_features: int = 32,
    hidden: int = 32,
    epochs: int = 40,
    seed: int = 0,
    repeats: int = 3,
) -> dict:
    """Brute force vs. one-pass approximation on an ER family of graphs.

    Trains a small node-classification model per size, then times each
    method (median of ``repeats``) and fits log-log scaling exponents.
    """
    from .generators import generate_synthetic
    from .graph import make_split
    from .models import TrainConfig, init_model, train
    from .nora import NoraConfig, nora_scores
    from .oracle import oracle_node

    if len(sizes) < 3:
        raise ValidationError("bench needs at least 3 sizes for the scaling fit")
    rows: list[BenchRow] = []
    times: dict[str, list[float]] = {"oracle": [], "nora": []}
    for n in sizes:
        g = generate_synthetic(
            "erdos-renyi", n, p=min(1.0, mean_degree / (n - 1)), seed=seed,
            num_features=num_features, num_classes=3,
        )
        split = make_split(g, "node", seed)
        cfg = TrainConfig(lr=0.2, epochs=epochs, seed=seed, hidden=hidden)
        model = init_model(model_kind, "node", g.num_features, hidden, 3, seed=seed)
        model = train(model, g, split, cfg).model
        nora_scores(model, g, NoraConfig(), "node")  # warm caches before timing
        for name, fn in (
            ("oracle", lambda: oracle_node(model, g)),
            ("nora", lambda: nora_scores(model, g, NoraConfig(), "node")),
        ):
            samples = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                samples.append(time.perf_counter() - t0)
            sec = float(np.median(samples))
            times[name].append(sec)
            rows.append(BenchRow(name, n, g.num_edges, sec))
    slopes = {name: fit_loglog_slope(list(sizes), ts) for name, ts in times.items()}
    return {"rows": rows, "times": times, "sizes": list(sizes), "slopes": slopes}

"""Message-passing layers (GCN, GraphSAGE-mean, single-head GAT), task heads,
full-model forward with per-layer checkpoints, and full-batch training.

Every layer follows the same parameterization: the updated representation is
``act((H @ W_s + Agg(alpha, H @ W_m)) @ W_u)`` where ``alpha`` are per-slot
aggregation coefficients over each node's neighbors plus itself.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DivergenceError, ShapeError, ValidationError
from .graph import Graph, SplitSpec, sample_negative_edges
from .tensor import AggSlots, GradTape, agg_slots

LAYER_KINDS = ("gcn", "sage-mean", "gat1")
HEADS = ("softmax", "dot-sigmoid", "identity")
LEAKY_SLOPE = 0.2

# completed model_forward calls, for cost-contract assertions
FORWARD_CALLS = 0


@dataclass
class GnnLayer:
    kind: str
    W_s: np.ndarray            # d_in x d_out
    W_m: np.ndarray            # d_in x d_out
    W_u: np.ndarray            # d_out x d_out
    activation: str = "relu"   # "relu" | "none"
    att_src: np.ndarray | None = None   # d_out x 1, gat1 only
    att_dst: np.ndarray | None = None

    def weights(self) -> dict[str, np.ndarray]:
        out = {"W_s": self.W_s, "W_m": self.W_m, "W_u": self.W_u}
        if self.kind == "gat1":
            out["att_src"] = self.att_src
            out["att_dst"] = self.att_dst
        return out


@dataclass
class GnnModel:
    layers: list[GnnLayer]
    head: str                  # "softmax" | "dot-sigmoid" | "identity"
    task: str                  # "node" | "link"
    hidden: int

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def weights(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, w in layer.weights().items():
                out[f"layer{i}.{name}"] = w
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights()):
            h.update(name.encode())
            h.update(self.weights()[name].tobytes())
        return h.hexdigest()[:16]

    def copy(self) -> "GnnModel":
        layers = [
            replace(
                l,
                W_s=l.W_s.copy(), W_m=l.W_m.copy(), W_u=l.W_u.copy(),
                att_src=None if l.att_src is None else l.att_src.copy(),
                att_dst=None if l.att_dst is None else l.att_dst.copy(),
            )
            for l in self.layers
        ]
        return GnnModel(layers, self.head, self.task, self.hidden)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_model(
    kind: str,
    task: str,
    in_dim: int,
    hidden: int,
    out_dim: int,
    num_layers: int = 2,
    seed: int = 0,
    head: str | None = None,
) -> GnnModel:
    """Seeded Glorot initialization; last layer has no activation."""
    if kind not in LAYER_KINDS:
        raise ValidationError(f"unknown model kind {kind!r}; choose from {LAYER_KINDS}")
    if task not in ("node", "link"):
        raise ValidationError(f"unknown task {task!r}")
    if num_layers < 1:
        raise ValidationError("num_layers must be >= 1")
    if head is None:
        head = "softmax" if task == "node" else "dot-sigmoid"
    if head not in HEADS:
        raise ValidationError(f"unknown head {head!r}")
    rng = np.random.default_rng(seed)
    dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
    layers = []
    for l in range(num_layers):
        d_in, d_out = dims[l], dims[l + 1]
        layer = GnnLayer(
            kind=kind,
            W_s=_glorot(rng, d_in, d_out),
            W_m=_glorot(rng, d_in, d_out),
            W_u=_glorot(rng, d_out, d_out),
            activation="relu" if l < num_layers - 1 else "none",
        )
        if kind == "gat1":
            layer.att_src = _glorot(rng, d_out, 1)
            layer.att_dst = _glorot(rng, d_out, 1)
        layers.append(layer)
    return GnnModel(layers, head, task, hidden)


# --- forward -------------------------------------------------------------


def structural_coefficients(kind: str, agg: AggSlots) -> np.ndarray:
    """Degree-based aggregation coefficients over neighbors-plus-self slots.

    gcn: 1/sqrt((d_i+1)(d_j+1)); sage-mean: 1/(d_i+1).  Degrees are the
    self-loop-free degrees of the (possibly removal-viewed) graph.
    """
    d_plus = agg.deg.astype(np.float64) + 1.0
    if kind == "gcn":
        return 1.0 / np.sqrt(d_plus[agg.dst] * d_plus[agg.src])
    if kind == "sage-mean":
        return 1.0 / d_plus[agg.dst]
    raise ValidationError(f"no structural coefficients for kind {kind!r}")


def _attention_coefficients(layer: GnnLayer, agg: AggSlots, Hm):
    src_score = T.matmul(Hm, layer.att_src)
    dst_score = T.matmul(Hm, layer.att_dst)
    e = T.add(T.gather_rows(src_score, agg.src), T.gather_rows(dst_score, agg.dst))
    return T.edge_softmax(T.leaky_relu(e, LEAKY_SLOPE), agg)


def layer_forward(layer: GnnLayer, agg: AggSlots, H, x_sparse=None):
    """One layer per the shared parameterization; H may be taped or plain."""
    if T._val(H).shape[1] != T._val(layer.W_s).shape[0]:
        raise ShapeError(
            f"layer expects {T._val(layer.W_s).shape[0]} input columns, "
            f"got {T._val(H).shape[1]}"
        )
    if x_sparse is not None and not isinstance(H, T.Tensor):
        Hs = x_sparse @ T._val(layer.W_s)
        Hm = x_sparse @ T._val(layer.W_m)
    else:
        Hs = T.matmul(H, layer.W_s)
        Hm = T.matmul(H, layer.W_m)
    if layer.kind == "gat1":
        coeffs = _attention_coefficients(layer, agg, Hm)
    else:
        coeffs = structural_coefficients(layer.kind, agg)
    Z = T.matmul(T.add(Hs, T.spmm_aggregate(agg, coeffs, Hm)), layer.W_u)
    return T.relu(Z) if layer.activation == "relu" else Z


@dataclass
class ForwardResult:
    hidden: list                     # H^(0)..H^(L) (tensors when taped, arrays otherwise)
    predictions: np.ndarray | object  # N x c probabilities (node) or N x h embeddings (link)
    tape: GradTape | None

    def hidden_values(self) -> list[np.ndarray]:
        return [T._val(h) for h in self.hidden]


def model_forward(model: GnnModel, gv, tape: GradTape | None = None) -> ForwardResult:
    """Full forward on a graph or removal view.

    Checkpoints H^(0)..H^(L) on the tape when one is given.  For the node
    task H^(L) is the row-stochastic prediction matrix; for the link task it
    is the final embedding matrix (use :func:`edge_probabilities` to score
    edges).
    """
    global FORWARD_CALLS
    x = gv.features
    if x.shape[1] != model.layers[0].W_s.shape[0]:
        raise ShapeError(
            f"model expects {model.layers[0].W_s.shape[0]} features, graph has {x.shape[1]}"
        )
    x_sparse = gv.features_csr()
    agg = agg_slots(gv, with_self_loops=True)
    H = tape.input(x, sparse_alias=x_sparse) if tape is not None else x
    hidden = [H]
    if tape is not None:
        tape.checkpoint("H0", H)
    for l, layer in enumerate(model.layers):
        H = layer_forward(layer, agg, H, x_sparse=x_sparse if l == 0 else None)
        if model.head == "softmax" and l == model.num_layers - 1:
            H = T.softmax_rows(H)
        hidden.append(H)
        if tape is not None:
            tape.checkpoint(f"H{l + 1}", H)
    FORWARD_CALLS += 1
    return ForwardResult(hidden, H, tape)


def edge_probabilities(embeddings, pairs: np.ndarray):
    """Link head: sigmoid of the dot product of the two endpoint embeddings."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    hi = T.gather_rows(embeddings, pairs[:, 0])
    hj = T.gather_rows(embeddings, pairs[:, 1])
    return T.sigmoid(T.row_sums(T.mul(hi, hj)))


def edge_logits(embeddings, pairs: np.ndarray):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    hi = T.gather_rows(embeddings, pairs[:, 0])
    hj = T.gather_rows(embeddings, pairs[:, 1])
    return T.row_sums(T.mul(hi, hj))


# --- training --------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 200
    seed: int = 0
    hidden: int = 64
    num_layers: int = 2
    label_smoothing: float = 0.05     # node task: keeps checkpoints calibrated
    resample_negatives: bool = True   # link task: fresh train negatives each epoch

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _leaf_tensors(model: GnnModel, tape: GradTape) -> tuple[GnnModel, list]:
    """Taped clone of the model: weights become tape inputs."""
    leaves = []
    layers = []
    for layer in model.layers:
        kw = {}
        for name, w in layer.weights().items():
            t = tape.input(w)
            leaves.append(t)
            kw[name] = t
        layers.append(replace(layer, **kw))
    return GnnModel(layers, model.head, model.task, model.hidden), leaves


def task_loss(
    model: GnnModel,
    graph: Graph,
    split: SplitSpec,
    tape: GradTape | None,
    neg_train: np.ndarray | None = None,
    label_smoothing: float = 0.0,
):
    """Training-portion loss as a deterministic function of the weights.

    Node task: cross entropy over the train mask.  Link task: BCE over the
    training edges plus the supplied negatives (callers fix them, which keeps
    the function exact for finite differencing).
    """
    body = _forward_logits(model, graph, tape)
    if model.task == "node":
        return T.cross_entropy_with_logits(
            body, graph.labels, np.flatnonzero(split.train_mask), label_smoothing
        )
    if neg_train is None:
        raise ValidationError("link task_loss needs an explicit negative edge set")
    pairs = np.concatenate([split.train_edges, neg_train])
    targets = np.zeros(len(pairs))
    targets[: len(split.train_edges)] = 1.0
    return T.bce_with_logits(edge_logits(body, pairs), targets)


def _forward_logits(model: GnnModel, gv, tape):
    """Body forward without the softmax head (training wants raw logits)."""
    x = gv.features
    x_sparse = gv.features_csr()
    agg = agg_slots(gv, with_self_loops=True)
    if tape is not None:
        H = tape.checkpoint("H0", tape.input(x, sparse_alias=x_sparse))
    else:
        H = x
    for l, layer in enumerate(model.layers):
        H = layer_forward(layer, agg, H, x_sparse=x_sparse if l == 0 else None)
    return H


def _accuracy(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    if not np.any(mask):
        return float("nan")
    pred = probs.argmax(axis=1)
    return float(np.mean(pred[mask] == labels[mask]))


@dataclass
class TrainResult:
    model: GnnModel
    metrics: dict
    history: list = field(default_factory=list)


def train(model: GnnModel, graph: Graph, split: SplitSpec, cfg: TrainConfig) -> TrainResult:
    """Full-batch gradient descent with momentum; returns the best-validation
    checkpoint.  Raises :class:`DivergenceError` if the loss goes non-finite.
    """
    rng = np.random.default_rng((cfg.seed, 0xBEEF))
    names = sorted(model.weights())
    velocity = {n: np.zeros_like(model.weights()[n]) for n in names}
    best = (-np.inf, model.copy(), 0)  # (score, weights, epoch); score = -val_loss or val_acc
    history = []
    fixed_neg = None
    if model.task == "link" and not cfg.resample_negatives:
        fixed_neg = sample_negative_edges(graph, len(split.train_edges), rng)

    for epoch in range(cfg.epochs):
        tape = GradTape()
        taped_model, _ = _leaf_tensors(model, tape)
        try:
            if model.task == "node":
                loss_t = task_loss(taped_model, graph, split, tape,
                                   label_smoothing=cfg.label_smoothing)
            else:
                neg = fixed_neg
                if neg is None:
                    neg = sample_negative_edges(graph, len(split.train_edges), rng)
                loss_t = task_loss(taped_model, graph, split, tape, neg_train=neg)
        except ShapeError as e:
            raise DivergenceError(f"forward overflowed at epoch {epoch}: {e}") from e
        loss = loss_t.item()
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
        grads = tape.backward(loss_t)

        taped_weights = taped_model.weights()
        weights = model.weights()
        for n in names:
            g = grads.of(taped_weights[n]) + cfg.weight_decay * weights[n]
            velocity[n] = cfg.momentum * velocity[n] - cfg.lr * g
            weights[n] += velocity[n]
            if not np.isfinite(weights[n]).all():
                raise DivergenceError(
                    f"weights became non-finite at epoch {epoch} (learning rate too high?)"
                )

        # checkpoint selection by validation loss (calibration-aware); tiny
        # graphs can have an empty validation window, fall back to train loss
        body = _forward_logits(model, graph, None)
        if model.task == "node":
            valid_ids = np.flatnonzero(split.valid_mask)
            if valid_ids.size:
                val_loss = T.cross_entropy_with_logits(body, graph.labels, valid_ids)
                val_score = -float(T._val(val_loss)[0, 0])
            else:
                val_score = -loss
        else:
            pairs, targets = _valid_link_set(split)
            if len(pairs):
                val_loss = T.bce_with_logits(edge_logits(body, pairs), targets)
                val_score = -float(T._val(val_loss)[0, 0])
            else:
                val_score = -loss
        history.append({"epoch": epoch, "loss": loss, "val_score": val_score})
        if val_score > best[0]:
            best = (val_score, model.copy(), epoch)

    final = best[1]
    metrics = {"best_epoch": best[2], "best_val_score": best[0], "final_loss": history[-1]["loss"]}
    if final.task == "node":
        probs = model_forward(final, graph).predictions
        metrics["train_acc"] = _accuracy(probs, graph.labels, split.train_mask)
        metrics["valid_acc"] = _accuracy(probs, graph.labels, split.valid_mask)
        metrics["test_acc"] = _accuracy(probs, graph.labels, split.test_mask)
    else:
        emb = model_forward(final, graph).predictions
        for role, pairs, targets in (
            ("valid", *_valid_link_set(split)),
            ("test", *_test_link_set(split)),
        ):
            if len(pairs) == 0:
                continue
            p = T._val(edge_probabilities(emb, pairs)).reshape(-1)
            metrics[f"{role}_acc"] = float(np.mean((p > 0.5) == (targets > 0.5)))
    return TrainResult(final, metrics, history)


def _valid_link_set(split: SplitSpec):
    pairs = np.concatenate([split.valid_edges, split.negative_valid])
    targets = np.zeros(len(pairs))
    targets[: len(split.valid_edges)] = 1.0
    return pairs, targets


def _test_link_set(split: SplitSpec):
    pairs = np.concatenate([split.test_edges, split.negative_test])
    targets = np.zeros(len(pairs))
    targets[: len(split.test_edges)] = 1.0
    return pairs, targets


# --- persistence ------------------------------------------------------------

CHECKPOINT_FORMAT = "nie-checkpoint-v1"


def save_checkpoint(path: str | Path, model: GnnModel, extra: dict | None = None) -> None:
    """JSON of named weight matrices with shapes (float64 round-trips exactly)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model": {
            "kinds": [l.kind for l in model.layers],
            "activations": [l.activation for l in model.layers],
            "head": model.head,
            "task": model.task,
            "hidden": model.hidden,
        },
        "weights": {
            name: {"shape": list(w.shape), "data": w.reshape(-1).tolist()}
            for name, w in model.weights().items()
        },
        "fingerprint": model.fingerprint(),
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[GnnModel, dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    meta = payload["model"]
    layers = []
    for i, kind in enumerate(meta["kinds"]):
        def w(name):
            entry = payload["weights"][f"layer{i}.{name}"]
            return np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])

        layer = GnnLayer(
            kind=kind, W_s=w("W_s"), W_m=w("W_m"), W_u=w("W_u"),
            activation=meta["activations"][i],
        )
        if kind == "gat1":
            layer.att_src = w("att_src")
            layer.att_dst = w("att_dst")
        layers.append(layer)
    model = GnnModel(layers, meta["head"], meta["task"], meta["hidden"])
    if model.fingerprint() != payload["fingerprint"]:
        raise ValidationError(f"{path}: fingerprint mismatch (corrupt checkpoint)")
    return model, payload.get("extra", {})

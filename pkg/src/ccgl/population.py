"""Population graph construction and transductive dynamic-edge classification.

One node per patient, features from the contrastive view embeddings.
Each edge-convolution layer rebuilds its K-nearest-neighbour edges on the
current features, so message passing follows whichever patients currently
sit close together; only training nodes contribute to the focal loss.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .config import DgcSettings, RunConfig

PROB_FLOOR = 1e-12


@dataclass
class PopulationGraph:
    node_features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    ids: tuple = ()
    current_edges: dict = field(default_factory=dict)

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for name in ("train_mask", "val_mask", "test_mask"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=bool))
        n = self.node_features.shape[0]
        if self.node_features.ndim != 2:
            raise ValueError("node features must be a P x d matrix")
        for name in ("labels", "train_mask", "val_mask", "test_mask"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have length {n}")
        overlap = (
            (self.train_mask & self.val_mask)
            | (self.train_mask & self.test_mask)
            | (self.val_mask & self.test_mask)
        )
        if overlap.any():
            raise ValueError("split masks must be disjoint")
        if not (self.train_mask | self.val_mask | self.test_mask).all():
            raise ValueError("every node needs a split role")
        if not self.ids:
            self.ids = tuple(str(i) for i in range(n))

    @property
    def n_patients(self) -> int:
        return self.node_features.shape[0]


def patient_embedding(view_embeddings) -> np.ndarray:
    """Mean of a patient's view embeddings, renormalised to unit length."""
    if len(view_embeddings) == 0:
        raise ValueError("patient has no view embeddings")
    mean = np.mean(np.asarray(view_embeddings, dtype=np.float64), axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise ValueError("zero-norm aggregate")
    return mean / norm


def population_from_embeddings(cohort, per_patient_views) -> PopulationGraph:
    """Aggregate per-view embeddings into a population graph matching the cohort."""
    features = np.stack([patient_embedding(views) for views in per_patient_views])
    splits = [p.split for p in cohort.patients]
    if "unassigned" in splits:
        raise ValueError("cohort has unassigned patients; run split assignment first")
    return PopulationGraph(
        node_features=features,
        labels=cohort.labels(),
        train_mask=np.array([s == "train" for s in splits]),
        val_mask=np.array([s == "val" for s in splits]),
        test_mask=np.array([s == "test" for s in splits]),
        ids=tuple(p.id for p in cohort.patients),
    )


def knn_edges(features: np.ndarray, k: int) -> np.ndarray:
    """Directed edges i -> j to each node's k nearest neighbours (Euclidean).

    Self-edges are excluded and distance ties resolve toward the lower
    index. Returns an (P*k, 2) int array sorted by source node.
    """
    x = np.asarray(features, dtype=np.float64)
    p = x.shape[0]
    if not (1 <= k <= p - 1):
        raise ValueError(f"k must be in [1, {p - 1}], got {k}")
    sq = (x * x).sum(axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(dist, np.inf)
    edges = np.empty((p * k, 2), dtype=np.int64)
    for i in range(p):
        order = np.argsort(dist[i], kind="stable")
        edges[i * k : (i + 1) * k, 0] = i
        edges[i * k : (i + 1) * k, 1] = order[:k]
    return edges


def _phi_t(x: Tensor, leaves: dict, prefix: str) -> Tensor:
    """Two-layer fully connected map applied row-wise."""
    h = ad.relu(ad.add(ad.matmul(x, leaves[f"{prefix}/w1"]), leaves[f"{prefix}/b1"]))
    return ad.add(ad.matmul(h, leaves[f"{prefix}/w2"]), leaves[f"{prefix}/b2"])


def _edge_conv_t(
    x: Tensor,
    edges: np.ndarray,
    leaves: dict,
    prefix: str,
    aggregation: str = "sum",
) -> Tensor:
    n = x.data.shape[0]
    src, dst = edges[:, 0], edges[:, 1]
    counts = np.bincount(src, minlength=n)
    if np.any(counts == 0):
        raise ValueError(f"isolated node {int(np.flatnonzero(counts == 0)[0])}")
    h_src = ad.gather_rows(x, src)
    h_dst = ad.gather_rows(x, dst)
    messages = _phi_t(ad.concat([h_src, ad.sub(h_dst, h_src)], axis=1), leaves, prefix)
    if aggregation == "sum":
        return ad.segment_sum(messages, src, n)
    if aggregation == "max":
        return ad.segment_max(messages, src, n)
    raise ValueError(f"unknown aggregation {aggregation!r}")


def edge_conv(features: np.ndarray, edges: np.ndarray, phi_weights: dict, aggregation: str = "sum") -> np.ndarray:
    """Aggregate phi(v_i || v_m - v_i) over each node's out-neighbours m."""
    x = Tensor(np.asarray(features, dtype=np.float64))
    leaves = {f"phi/{k}": Tensor(np.asarray(v, dtype=np.float64)) for k, v in phi_weights.items()}
    return _edge_conv_t(x, np.asarray(edges, dtype=np.int64), leaves, "phi", aggregation).data


def focal_loss(prob_true_class, gamma: float):
    """-(1 - p)^gamma * log(p) with p clamped to [1e-12, 1]; gamma=0 is cross-entropy."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    p = np.clip(np.asarray(prob_true_class, dtype=np.float64), PROB_FLOOR, 1.0)
    out = -((1.0 - p) ** gamma) * np.log(p)
    return out if out.ndim else float(out)


def init_dgc_params(in_dim: int, settings: DgcSettings, seed: int) -> ParamStore:
    rng = np.random.default_rng([seed, 2])
    store = ParamStore()

    def glorot(shape):
        limit = math.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-limit, limit, size=shape)

    dims = [(in_dim, settings.hidden1), (settings.hidden1, settings.hidden2)]
    for layer, (d_in, d_out) in enumerate(dims, start=1):
        store.add(f"layer{layer}/w1", glorot((2 * d_in, d_out)))
        store.add(f"layer{layer}/b1", np.zeros(d_out))
        store.add(f"layer{layer}/w2", glorot((d_out, d_out)))
        store.add(f"layer{layer}/b2", np.zeros(d_out))
    store.add("classifier", glorot((settings.hidden2, 2)))
    return store


def _dgc_forward_t(
    features: np.ndarray,
    leaves: dict,
    settings: DgcSettings,
    fixed_edges=None,
):
    """Two dynamic edge-conv layers and a softmax head on the tape.

    Edge sets are rebuilt from the running features unless ``fixed_edges``
    pins them (used by gradient checks); neighbour choice itself carries
    no gradient.
    """
    p = features.shape[0]
    k = min(settings.k, p - 1)
    x = Tensor(features)
    edge_record = {}
    for layer in (1, 2):
        if fixed_edges is not None:
            edges = fixed_edges[layer - 1]
        else:
            edges = knn_edges(x.data, k)
        edge_record[f"layer{layer}"] = edges
        x = _edge_conv_t(x, edges, leaves, f"layer{layer}", settings.aggregation)
    logits = ad.matmul(x, leaves["classifier"])
    shift = logits.data.max(axis=1, keepdims=True)
    e = ad.exp(ad.sub(logits, shift))
    probs = ad.div(e, ad.reduce_sum(e, axis=1, keepdims=True))
    return probs, edge_record


def dgc_forward(pop: PopulationGraph, params: ParamStore, k: int | None = None, settings: DgcSettings | None = None) -> np.ndarray:
    """Class probabilities for every patient node; records the edges used."""
    settings = settings or DgcSettings()
    if k is not None:
        settings = dataclasses.replace(settings, k=int(k))
    if pop.n_patients < 2:
        raise ValueError(f"population needs >= 2 patients, got {pop.n_patients}")
    probs, edges = _dgc_forward_t(pop.node_features, ad.make_leaves(params), settings)
    pop.current_edges = edges
    return probs.data


def _focal_batch_t(probs: Tensor, labels: np.ndarray, mask: np.ndarray, gamma: float) -> Tensor:
    rows = np.flatnonzero(mask)
    pt = ad.take_pairs(probs, rows, labels[rows])
    pt = ad.clamp_min(pt, PROB_FLOOR)
    return ad.reduce_mean(ad.mul(ad.power(ad.sub(1.0, pt), gamma), ad.neg(ad.log(pt))))


def _selection_metric(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray, gamma: float) -> float:
    """Validation score for early tracking: negative mean focal loss.

    Small validation masks make rank statistics too coarse to compare
    epochs, so the continuous loss is tracked instead (higher is better).
    """
    if not mask.any():
        return 0.0
    pt = np.clip(probs[mask, labels[mask]], PROB_FLOOR, 1.0)
    return -float(np.mean(focal_loss(pt, gamma)))


def train_dgc(pop: PopulationGraph, cfg: RunConfig, seed: int | None = None):
    """Full-graph training with focal loss on training nodes only.

    Tracks the validation metric every epoch and returns the parameters of
    the best validation epoch together with the training history. Test
    labels are never read.
    """
    seed = cfg.seeds[0] if seed is None else int(seed)
    if not pop.train_mask.any():
        raise ValueError("population graph has no training nodes")
    settings = cfg.dgc
    store = init_dgc_params(pop.node_features.shape[1], settings, seed)

    best_store = store.copy()
    best_metric = -np.inf
    history = []
    for epoch in range(cfg.train.dgc_epochs):
        leaves = ad.make_leaves(store)
        probs, _ = _dgc_forward_t(pop.node_features, leaves, settings)
        loss = _focal_batch_t(probs, pop.labels, pop.train_mask, settings.gamma)
        loss_val = loss.data.item()
        if not np.isfinite(loss_val):
            raise RuntimeError(f"non-finite classification loss at epoch {epoch}")

        # the metric belongs to the parameters that produced this forward pass;
        # ties keep the latest epoch so training can refine past val saturation
        val_metric = _selection_metric(probs.data, pop.labels, pop.val_mask, settings.gamma)
        if val_metric >= best_metric:
            best_metric = val_metric
            best_store = store.copy()
        history.append({"epoch": epoch, "loss": loss_val, "val_metric": val_metric})

        ad.backward(loss)
        grads = {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
            for name, leaf in leaves.items()
        }
        store = ad.adam_step(store, grads, cfg.train.dgc_lr)
    return best_store, history

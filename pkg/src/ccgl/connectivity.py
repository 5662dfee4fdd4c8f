"""Functional-connectivity estimation and per-view graph assembly.

Node features of a view graph are the Pearson correlation rows of each ROI
with the patient's personal characteristics appended; edges carry the
retained partial correlations, which give a sparser conditional-dependence
structure than the marginal Pearson matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import PCD_SIZE, RoiTimeSeries

CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class CorrelationMatrix:
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"correlation matrix must be square, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("correlation matrix contains non-finite entries")
        if not np.allclose(arr, arr.T, atol=1e-10):
            raise ValueError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(arr), 1.0, atol=1e-10):
            raise ValueError("correlation matrix must have unit diagonal")
        if arr.min() < -1.0 - 1e-10 or arr.max() > 1.0 + 1e-10:
            raise ValueError("correlation entries must lie in [-1, 1]")
        object.__setattr__(self, "values", arr)

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class EdgePolicy:
    """How view-graph edges are retained from the partial-correlation matrix."""

    per_node_top: int = 10
    shrinkage: float = 0.1

    def __post_init__(self):
        if self.per_node_top < 1:
            raise ValueError(f"per_node_top must be >= 1, got {self.per_node_top}")
        if not (0.0 <= self.shrinkage <= 1.0):
            raise ValueError(f"shrinkage must be in [0, 1], got {self.shrinkage}")


@dataclass(frozen=True)
class ViewGraph:
    """One view's graph: R x F node features plus weighted undirected edges (i < j)."""

    node_features: np.ndarray
    edges: tuple
    roi_count: int

    def __post_init__(self):
        feats = np.asarray(self.node_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.roi_count:
            raise ValueError(f"node features must be ({self.roi_count}, F), got {feats.shape}")
        edges = tuple((int(i), int(j), float(w)) for i, j, w in self.edges)
        for i, j, w in edges:
            if i == j:
                raise ValueError(f"self-edge at node {i}")
            if not (0 <= i < j < self.roi_count):
                raise ValueError(f"edge ({i}, {j}) out of range for {self.roi_count} nodes")
            if not np.isfinite(w):
                raise ValueError(f"edge ({i}, {j}) has non-finite weight")
        object.__setattr__(self, "node_features", feats)
        object.__setattr__(self, "edges", edges)

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]


def pearson_matrix(view: RoiTimeSeries) -> CorrelationMatrix:
    """Sample Pearson correlation between every pair of ROI columns."""
    x = view.values
    if x.shape[0] < 3:
        raise ValueError(f"need >= 3 timepoints for correlation, got {x.shape[0]}")
    centered = x - x.mean(axis=0)
    std = centered.std(axis=0, ddof=1)
    zero = np.flatnonzero(std == 0.0)
    if zero.size:
        raise ValueError(f"constant column: roi {zero[0]} has zero variance")
    cov = centered.T @ centered / (x.shape[0] - 1)
    corr = cov / np.outer(std, std)
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return CorrelationMatrix(corr)


def partial_corr_matrix(view: RoiTimeSeries, shrinkage: float = 0.1) -> CorrelationMatrix:
    """Partial correlations via the inverted (shrunk) sample covariance.

    The covariance is shrunk toward its own diagonal,
    S' = (1 - shrinkage) * S + shrinkage * diag(S), which keeps S' invertible
    when a view has fewer timepoints than ROIs. Entry (a, b) is
    -P(a, b) / sqrt(P(a, a) * P(b, b)) for the precision P = inv(S').
    """
    x = view.values
    if x.shape[0] < 3:
        raise ValueError(f"need >= 3 timepoints for correlation, got {x.shape[0]}")
    if not (0.0 <= shrinkage <= 1.0):
        raise ValueError(f"shrinkage must be in [0, 1], got {shrinkage}")
    cov = np.cov(x, rowvar=False, ddof=1)
    shrunk = (1.0 - shrinkage) * cov + shrinkage * np.diag(np.diag(cov))
    cond = np.linalg.cond(shrunk)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise ValueError(
            f"shrunk covariance is numerically singular (condition {cond:.3g}); "
            f"increase shrinkage above {shrinkage}"
        )
    precision = np.linalg.inv(shrunk)
    d = np.sqrt(np.diag(precision))
    pcorr = -precision / np.outer(d, d)
    pcorr = np.clip((pcorr + pcorr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(pcorr, 1.0)
    return CorrelationMatrix(pcorr)


def build_fc_graph(view: RoiTimeSeries, pcd: np.ndarray, policy: EdgePolicy = EdgePolicy()) -> ViewGraph:
    """Assemble the view graph: Pearson rows + pcd as node features, partial-correlation edges.

    Each node nominates its ``per_node_top`` strongest partners by absolute
    partial correlation; the nominated pairs are unioned and deduplicated as
    undirected edges. Weights keep their sign, magnitude decides retention.
    """
    pcd = np.asarray(pcd, dtype=np.float64)
    if pcd.shape != (PCD_SIZE,):
        raise ValueError(f"pcd must have length {PCD_SIZE}, got {pcd.shape}")
    pearson = pearson_matrix(view).values
    partial = partial_corr_matrix(view, policy.shrinkage).values
    r = view.n_rois
    e = min(policy.per_node_top, r - 1)

    strength = np.abs(partial).copy()
    np.fill_diagonal(strength, -np.inf)
    pairs = set()
    for i in range(r):
        order = np.argsort(-strength[i], kind="stable")
        for j in order[:e]:
            pairs.add((min(i, int(j)), max(i, int(j))))

    edges = tuple((i, j, float(partial[i, j])) for i, j in sorted(pairs))
    features = np.hstack([pearson, np.tile(pcd, (r, 1))])
    return ViewGraph(node_features=features, edges=edges, roi_count=r)

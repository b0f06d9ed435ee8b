"""SAGE bisection networks, the expected normalized cut loss and training."""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from .engine import normalize_features
from .graph import Graph

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = 300
DEFAULT_LR = 1e-5
DEFAULT_WEIGHT_DECAY = 1e-5
DEFAULT_BATCH = 4
DEFAULT_HETERO_COEF = 1.0
VALIDATION_FRACTION = 0.1


class SageBaseNet(ad.Module):
    """Four SAGE layers, then dense layers ``h_dense -> h_dense -> h_dense/2 -> 2``.

    tanh follows every layer except the last; a row softmax gives class
    probabilities.
    """

    arch = "sage-base"

    def __init__(self, h_sage: int = 64, h_dense: int = 32, in_features: int = 3,
                 out_classes: int = 2, seed: int = 0):
        if out_classes != 2:
            raise ValueError("only bisection heads (out_classes=2) are supported")
        rng = np.random.default_rng(seed)
        self.h_sage, self.h_dense = h_sage, h_dense
        self.in_features, self.out_classes = in_features, out_classes
        self.seed = seed
        widths = [in_features, h_sage, h_sage, h_sage, h_sage]
        self.convs = [ad.SageConv(widths[k], widths[k + 1], rng) for k in range(4)]
        half = max(h_dense // 2, 1)
        dense = [h_sage, h_dense, h_dense, half, out_classes]
        self.dense = [ad.Dense(dense[k], dense[k + 1], rng) for k in range(4)]

    def descriptor(self) -> dict:
        return {"arch": self.arch, "h_sage": self.h_sage, "h_dense": self.h_dense,
                "in_features": self.in_features, "out_classes": self.out_classes}

    def features(self, graph: Graph) -> np.ndarray:
        x = normalize_features(graph)
        return x[:, : graph.dim + 1]

    def __call__(self, x, graph: Graph) -> ad.Tensor:
        x = ad.as_tensor(x)
        if x.shape[1] != self.in_features:
            raise ValueError(f"network expects {self.in_features} features, got {x.shape[1]}")
        m = graph.mean_adjacency()
        for conv in self.convs:
            x = ad.tanh(conv(x, m))
        for k, layer in enumerate(self.dense):
            x = layer(x)
            if k < len(self.dense) - 1:
                x = ad.tanh(x)
        return ad.softmax_rows(x)


class SageHeteroNet(SageBaseNet):
    """SAGE-Base with the physical tag as an extra input feature."""

    arch = "sage-hetero"

    def __init__(self, h_sage: int = 64, h_dense: int = 32, in_features: int = 4,
                 out_classes: int = 2, seed: int = 0, hetero_coef: float = DEFAULT_HETERO_COEF):
        super().__init__(h_sage, h_dense, in_features, out_classes, seed)
        self.hetero_coef = hetero_coef

    def features(self, graph: Graph) -> np.ndarray:
        if graph.tags is None:
            raise ValueError("heterogeneous network needs per-node physical tags")
        return normalize_features(graph)


def build_net(descriptor: dict, seed: int = 0) -> SageBaseNet:
    d = dict(descriptor)
    arch = d.pop("arch")
    cls = {SageBaseNet.arch: SageBaseNet, SageHeteroNet.arch: SageHeteroNet}.get(arch)
    if cls is None:
        raise ValueError(f"unknown architecture {arch!r}")
    return cls(seed=seed, **d)


def default_net(arch: str = "sage", dims: int = 2, seed: int = 0) -> SageBaseNet:
    """Widths 64/32 in 2D and 128/64 in 3D."""
    hs, hd = (64, 32) if dims == 2 else (128, 64)
    if arch == "sage":
        return SageBaseNet(hs, hd, dims + 1, 2, seed=seed)
    if arch == "sage-hetero":
        return SageHeteroNet(hs, hd, dims + 2, 2, seed=seed)
    raise ValueError(f"unknown architecture {arch!r}")


def forward(net: SageBaseNet, graph: Graph, x=None) -> ad.Tensor:
    return net(net.features(graph) if x is None else x, graph)


# ----------------------------------------------------------------------
# losses

def expected_normalized_cut(y: ad.Tensor, graph: Graph) -> ad.Tensor:
    """Differentiable expected NC: sum_k [sum_ij A_ij Y_ik (1 - Y_jk)] / [sum_i Y_ik deg_i]."""
    y = ad.as_tensor(y)
    crossing = ad.total(y * ad.spmm(graph.adjacency, 1.0 - y), axis=0)
    vols = ad.total(y * graph.degrees[:, None], axis=0)
    if np.any(vols.data <= 0):
        raise ValueError("a class has zero expected volume")
    return ad.total(crossing / vols)


def expected_nc_double_sum(y: np.ndarray, graph: Graph) -> float:
    y = np.asarray(y, dtype=float)
    ip, ix, wd = graph.neighbor_lists()
    loss = 0.0
    for k in range(y.shape[1]):
        num = 0.0
        for i in range(graph.n):
            for e in range(ip[i], ip[i + 1]):
                num += wd[e] * y[i, k] * (1.0 - y[ix[e], k])
        den = sum(y[i, k] * graph.degrees[i] for i in range(graph.n))
        loss += num / den
    return loss


def expected_nc_matrix(y: np.ndarray, graph: Graph) -> float:
    """``sum((Y / (Y^T D)) (1 - Y)^T * A)`` with dense intermediates."""
    y = np.asarray(y, dtype=float)
    gamma = y.T @ graph.degrees
    a = graph.adjacency.toarray() if sp.issparse(graph.adjacency) else graph.adjacency
    return float((((y / gamma) @ (1.0 - y).T) * a).sum())


def hetero_penalty(y, tags, coef: float = DEFAULT_HETERO_COEF):
    """``coef / N * sum_i (p_i Y_i0 + (1 - p_i) Y_i1)``; works on arrays and tensors."""
    p = np.asarray(tags, dtype=float).reshape(-1, 1)
    pmat = np.hstack([p, 1.0 - p])
    n = len(p)
    if isinstance(y, ad.Tensor):
        return ad.total(y * pmat) * (coef / n)
    return float(coef / n * (np.asarray(y) * pmat).sum())


def bisect_from_probs(y) -> np.ndarray:
    y = np.asarray(y.data if isinstance(y, ad.Tensor) else y, dtype=float)
    labels = (y[:, 1] > y[:, 0]).astype(np.int64)
    if len(labels) >= 2:
        if labels.max() == 0:
            labels[int(np.argmax(y[:, 1]))] = 1
        elif labels.min() == 1:
            labels[int(np.argmax(y[:, 0]))] = 0
    return labels


def loss_for(net: SageBaseNet, graph: Graph, x=None) -> ad.Tensor:
    y = forward(net, graph, x)
    loss = expected_normalized_cut(y, graph)
    if isinstance(net, SageHeteroNet):
        loss = loss + hetero_penalty(y, graph.tags, net.hetero_coef)
    return loss


# ----------------------------------------------------------------------
# training

def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    if dim == 2:
        t = rng.uniform(0.0, 2.0 * np.pi)
        return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return Rotation.random(random_state=rng).as_matrix()


def _augmented_features(net: SageBaseNet, graph: Graph, rng: np.random.Generator) -> np.ndarray:
    rot = random_rotation(graph.dim, rng)
    return net.features(graph.with_centroids(graph.centroids @ rot.T))


def split_dataset(n: int, seed: int, fraction: float = VALIDATION_FRACTION):
    """Shuffled (train, validation) index arrays; validation is empty for n < 2."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = 0 if n < 2 else max(1, int(round(fraction * n)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train_gnn(net: SageBaseNet, dataset, epochs: int = DEFAULT_EPOCHS, lr: float = DEFAULT_LR,
              weight_decay: float = DEFAULT_WEIGHT_DECAY, batch: int = DEFAULT_BATCH,
              seed: int = 0, augment: bool = True):
    """Train on a list of graphs; returns rows ``(epoch, train_loss, val_loss)``.

    Gradients of ``batch`` graphs are averaged before each optimiser step.
    ``train_loss`` is the mean per-graph loss over the epoch.
    """
    graphs = list(dataset)
    if not graphs:
        raise ValueError("training dataset is empty")
    if batch < 1 or epochs < 1:
        raise ValueError("epochs and batch must be >= 1")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = split_dataset(len(graphs), seed)
    val_features = [net.features(graphs[i]) for i in val_idx]
    opt = ad.Adam(net.parameters(), lr=lr, weight_decay=weight_decay)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), batch):
            chunk = order[start:start + batch]
            opt.zero_grad()
            for i in chunk:
                g = graphs[i]
                x = _augmented_features(net, g, rng) if augment else None
                loss = loss_for(net, g, x) * (1.0 / len(chunk))
                loss.backward()
                losses.append(float(loss.data) * len(chunk))
            opt.step()
        val = (float(np.mean([loss_for(net, graphs[i], x).data for i, x in zip(val_idx, val_features)]))
               if len(val_idx) else float("nan"))
        history.append((epoch, float(np.mean(losses)), val))
        log.info("epoch %d train %.6f val %.6f", epoch, history[-1][1], val)
    return history


def gnn_bisect(net: SageBaseNet, graph: Graph) -> np.ndarray:
    return bisect_from_probs(forward(net, graph))

"""Advantage actor-critic partitioner and refiner.

The partitioner starts with every node on side 0 except a minimum-degree
seed and moves one node per step to side 1; the reward is the decrease in
normalized cut. The refiner works on the k-hop neighbourhood of the cut,
may move nodes either way (each at most once per episode) and is rewarded
by the decrease of ``NC + b * (vol0 - vol1)^2 / vol(V)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .engine import normalize_features
from .graph import Graph, cut_and_volumes, k_hop_subgraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class A2CConfig:
    gamma: float = 0.9
    alpha: float = 0.1
    lr: float = 1e-3
    update_every: int | None = None   # None: update at episode end
    b: float = 0.35
    k_hop: int = 3

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.update_every is not None and self.update_every < 1:
            raise ValueError("update_every must be >= 1")
        if self.k_hop < 1:
            raise ValueError("k_hop must be >= 1")


PARTITIONER_CONFIG = A2CConfig()
REFINER_CONFIG = A2CConfig(update_every=8)


def _nc(cut: float, vols) -> float:
    """Normalized cut of a bisection; an empty side contributes nothing."""
    return sum(cut / v for v in vols if v > 0)


def refine_objective(graph: Graph, labels, b: float = 0.35) -> float:
    cuts, vols = cut_and_volumes(graph, np.asarray(labels, dtype=np.int64))
    vols = np.pad(vols, (0, max(0, 2 - len(vols))))
    c = cuts[0] if len(cuts) else 0.0
    return _nc(c, vols) + b * (vols[0] - vols[1]) ** 2 / graph.degrees.sum()


@dataclass
class EpisodeState:
    """Bisection being edited. ``side`` covers the full graph; the policy
    sees ``sub`` whose nodes are ``nodes`` in the full graph."""

    kind: str
    graph: Graph
    side: np.ndarray
    mask: np.ndarray            # over sub nodes: True = no longer movable
    cut: float
    vols: np.ndarray
    t: int
    length: int
    sub: Graph
    nodes: np.ndarray
    static: np.ndarray
    b: float = 0.0
    debug: bool = False
    history: list = field(default_factory=list)

    @property
    def nc(self) -> float:
        return _nc(self.cut, self.vols)

    @property
    def objective(self) -> float:
        if self.kind == "partitioner":
            return self.nc
        return self.nc + self.b * (self.vols[0] - self.vols[1]) ** 2 / self.graph.degrees.sum()

    @property
    def done(self) -> bool:
        return self.t >= self.length or not self.allowed().any()

    @property
    def proper(self) -> bool:
        return 0 < self.side.sum() < len(self.side)

    def allowed(self) -> np.ndarray:
        ok = ~self.mask
        if self.kind == "refiner":
            local = self.side[self.nodes]
            n1 = int(self.side.sum())
            n0 = len(self.side) - n1
            ok &= ~((local == 0) & (n0 <= 1)) & ~((local == 1) & (n1 <= 1))
        return ok

    def features(self) -> np.ndarray:
        local = self.side[self.nodes]
        onehot = np.stack([1.0 - local, local.astype(float)], axis=1)
        if self.kind == "partitioner":
            return np.hstack([self.static, onehot])
        bal = (self.vols[0] - self.vols[1]) / self.graph.degrees.sum()
        rows = self.static  # adjacency rows of sub nodes in the full graph
        other = rows @ (1.0 - self.side) * local + rows @ self.side.astype(float) * (1.0 - local)
        boundary = (other > 0).astype(float)
        n = len(self.nodes)
        return np.hstack([onehot, np.full((n, 1), bal), np.full((n, 1), -bal), boundary[:, None]])


def partitioner_reset(graph: Graph, debug: bool = False) -> EpisodeState:
    if graph.n < 2:
        raise ValueError("partitioner needs at least 2 nodes")
    seed = int(np.argmin(graph.degrees))
    side = np.zeros(graph.n, dtype=np.int64)
    side[seed] = 1
    mask = np.zeros(graph.n, dtype=bool)
    mask[seed] = True
    d = graph.degrees[seed]
    vols = np.array([graph.degrees.sum() - d, d])
    coords = normalize_features(graph)[:, : graph.dim]
    return EpisodeState("partitioner", graph, side, mask, float(d), vols, 0, graph.n // 2,
                        graph, np.arange(graph.n), coords, debug=debug)


def refiner_reset(graph: Graph, labels, k_hop: int = 3, b: float = 0.35,
                  debug: bool = False) -> EpisodeState | None:
    """Refinement episode around the cut; ``None`` when the cut is empty."""
    side = np.asarray(labels, dtype=np.int64).copy()
    i, j, w = graph.edges()
    crossing = side[i] != side[j]
    c = float(w[crossing].sum())
    if c == 0:
        return None
    seeds = np.unique(np.concatenate([i[crossing], j[crossing]]))
    sub, nodes = k_hop_subgraph(graph, seeds, k_hop)
    vols = np.array([graph.degrees[side == 0].sum(), graph.degrees[side == 1].sum()])
    rows = graph.adjacency[nodes]
    length = int(min(round(c), len(nodes)))
    return EpisodeState("refiner", graph, side, np.zeros(len(nodes), dtype=bool), c, vols, 0,
                        max(length, 1), sub, nodes, rows, b=b, debug=debug)


def step(state: EpisodeState, action: int) -> float:
    """Move sub-node ``action`` to the other side in place; returns the reward."""
    if state.mask[action] or not state.allowed()[action]:
        raise ValueError(f"action {action} is masked")
    v = int(state.nodes[action])
    g = state.graph
    before = state.objective
    ip, ix, wd = g.neighbor_lists()
    old = state.side[v]
    side = state.side
    delta = 0.0
    for k in range(ip[v], ip[v + 1]):
        delta += wd[k] if side[ix[k]] == old else -wd[k]
    side[v] = 1 - old
    state.cut += delta
    state.vols[old] -= g.degrees[v]
    state.vols[1 - old] += g.degrees[v]
    state.mask[action] = True
    state.t += 1
    if state.debug:
        cuts, vols = cut_and_volumes(g, side)
        assert abs(cuts[0] - state.cut) < 1e-9 and np.allclose(vols, state.vols)
    return before - state.objective


# ----------------------------------------------------------------------
# networks

class ActorCriticNet(ad.Module):
    """Shared trunk of four SAGE and two dense layers; the actor scores nodes,
    the critic pools the graph with attentional aggregation."""

    arch = "rl-partitioner"

    def __init__(self, in_features: int = 4, hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_features, self.hidden, self.seed = in_features, hidden, seed
        w = [in_features, hidden, hidden, hidden, hidden]
        self.convs = [ad.SageConv(w[k], w[k + 1], rng) for k in range(4)]
        self.trunk = [ad.Dense(hidden, hidden, rng), ad.Dense(hidden, hidden, rng)]
        self.actor = [ad.Dense(hidden, hidden, rng), ad.Dense(hidden, 1, rng)]
        half = max(hidden // 2, 1)
        self.pool = ad.AttentionalAggregation(hidden, hidden, rng)
        self.critic = [ad.Dense(hidden, half, rng), ad.Dense(half, 1, rng)]

    def descriptor(self) -> dict:
        return {"arch": self.arch, "in_features": self.in_features, "hidden": self.hidden}

    def __call__(self, x, graph: Graph):
        m = graph.mean_adjacency()
        h = ad.as_tensor(x)
        for conv in self.convs:
            h = ad.tanh(conv(h, m))
        for layer in self.trunk:
            h = ad.tanh(layer(h))
        logits = self.actor[1](ad.tanh(self.actor[0](h)))
        value = self.critic[1](ad.tanh(self.critic[0](ad.tanh(self.pool(h)))))
        return logits, value


class RefinerNet(ad.Module):
    """Two shared SAGE layers; actor and critic each add one SAGE and one dense layer."""

    arch = "rl-refiner"

    def __init__(self, in_features: int = 5, hidden: int = 10, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_features, self.hidden, self.seed = in_features, hidden, seed
        self.shared = [ad.SageConv(in_features, hidden, rng), ad.SageConv(hidden, hidden, rng)]
        self.actor_conv = ad.SageConv(hidden, hidden, rng)
        self.actor_out = ad.Dense(hidden, 1, rng)
        self.critic_conv = ad.SageConv(hidden, hidden, rng)
        self.critic_out = ad.Dense(hidden, 1, rng)

    def descriptor(self) -> dict:
        return {"arch": self.arch, "in_features": self.in_features, "hidden": self.hidden}

    def __call__(self, x, graph: Graph):
        m = graph.mean_adjacency()
        h = ad.as_tensor(x)
        for conv in self.shared:
            h = ad.tanh(conv(h, m))
        logits = self.actor_out(ad.tanh(self.actor_conv(h, m)))
        per_node = self.critic_out(ad.tanh(self.critic_conv(h, m)))
        value = ad.total(per_node, axis=0, keepdims=True) * (1.0 / graph.n)
        return logits, value


def build_rl_net(descriptor: dict, seed: int = 0):
    d = dict(descriptor)
    arch = d.pop("arch")
    cls = {ActorCriticNet.arch: ActorCriticNet, RefinerNet.arch: RefinerNet}.get(arch)
    if cls is None:
        raise ValueError(f"unknown architecture {arch!r}")
    return cls(seed=seed, **d)


def policy(net, state: EpisodeState):
    """(log-probabilities over sub nodes, value) for the current state."""
    logits, value = net(state.features(), state.sub)
    return ad.masked_log_softmax_nodes(logits, state.allowed()), value


# ----------------------------------------------------------------------
# training

def discounted_returns(rewards, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    out = np.zeros(len(rewards))
    running = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def _update(opt: ad.Adam, net, log_probs, values, rewards, config: A2CConfig, bootstrap: float) -> None:
    returns = discounted_returns(rewards, config.gamma, bootstrap)
    opt.zero_grad()
    loss = None
    for lp, v, r in zip(log_probs, values, returns):
        adv = r - float(v.data.ravel()[0])
        diff = r - v
        term = lp * (-adv) + diff * diff * config.alpha
        loss = term if loss is None else loss + term
    ad.total(loss).backward()
    opt.step()


def perturbed_bisection(graph: Graph, rng: np.random.Generator, flip_prob: float = 0.3) -> np.ndarray:
    """Good bisection with some boundary nodes flipped: refiner training starts."""
    from .baselines import classic_bisect
    lab = classic_bisect(graph).copy()
    i, j, _ = graph.edges()
    crossing = lab[i] != lab[j]
    boundary = np.unique(np.concatenate([i[crossing], j[crossing]]))
    flip = boundary[rng.random(len(boundary)) < flip_prob]
    lab[flip] = 1 - lab[flip]
    if lab.min() == lab.max():
        lab[flip[0]] = 1 - lab[flip[0]]
    return lab


def a2c_train(kind: str, net, dataset, config: A2CConfig | None = None, episodes: int = 100,
              seed: int = 0, initial_labels=None):
    """Synchronous A2C; returns rows ``(episode, return, final_nc)``.

    ``kind`` is ``"partitioner"`` or ``"refiner"``. Refiner episodes start from
    ``initial_labels(graph, rng)`` (default: a perturbed classic bisection).
    """
    graphs = list(dataset)
    if not graphs:
        raise ValueError("dataset is empty")
    if kind not in ("partitioner", "refiner"):
        raise ValueError(f"unknown environment kind {kind!r}")
    if config is None:
        config = PARTITIONER_CONFIG if kind == "partitioner" else REFINER_CONFIG
    rng = np.random.default_rng(seed)
    opt = ad.Adam(net.parameters(), lr=config.lr)
    starts = initial_labels or perturbed_bisection
    history = []
    for ep in range(1, episodes + 1):
        g = graphs[int(rng.integers(len(graphs)))]
        if kind == "partitioner":
            state = partitioner_reset(g)
        else:
            state = refiner_reset(g, starts(g, rng), config.k_hop, config.b)
            if state is None:
                continue
        log_probs, values, rewards = [], [], []
        ret = 0.0
        while not state.done:
            lp, v = policy(net, state)
            p = np.exp(lp.data.ravel())
            p[~state.allowed()] = 0.0
            a = int(rng.choice(len(p), p=p / p.sum()))
            r = step(state, a)
            ret += r
            log_probs.append(lp[np.array([a])])
            values.append(v)
            rewards.append(r)
            if config.update_every is not None and len(rewards) >= config.update_every and not state.done:
                _, v_next = policy(net, state)
                _update(opt, net, log_probs, values, rewards, config, float(v_next.data.ravel()[0]))
                log_probs, values, rewards = [], [], []
        if rewards:
            _update(opt, net, log_probs, values, rewards, config, 0.0)
        history.append((ep, ret, state.nc))
        log.debug("episode %d return %.5f nc %.5f", ep, ret, state.nc)
    return history


# ----------------------------------------------------------------------
# inference

def _greedy_rollout(net, state: EpisodeState, require_proper: bool) -> np.ndarray:
    best_side = state.side.copy()
    best = state.objective if (state.proper or not require_proper) else np.inf
    while not state.done:
        lp, _ = policy(net, state)
        scores = np.where(state.allowed(), lp.data.ravel(), -np.inf)
        step(state, int(np.argmax(scores)))
        if (state.proper or not require_proper) and state.objective < best - 1e-15:
            best = state.objective
            best_side = state.side.copy()
    return best_side


def rl_bisect(net: ActorCriticNet, graph: Graph) -> np.ndarray:
    """Greedy rollout; the lowest-NC proper state visited is returned."""
    return _greedy_rollout(net, partitioner_reset(graph), True)


def refine(net: RefinerNet, graph: Graph, labels, config: A2CConfig = REFINER_CONFIG) -> np.ndarray:
    """Greedy refinement; never increases ``NC + b * imbalance``."""
    state = refiner_reset(graph, labels, config.k_hop, config.b)
    if state is None:
        return np.asarray(labels, dtype=np.int64).copy()
    return _greedy_rollout(net, state, True)

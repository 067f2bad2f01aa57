"""Graph encoders (convolutional and topological TGNN branches, GIN) and the MLP head.

Every forward function takes a :class:`~lptgnn.autodiff.ParamStore`; when
the store is tracking gradients the result is an autodiff ``Var``,
otherwise a plain array.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ContractError
from .tensor import LowRankWeight, TTLConfig, init_ttl, ttl_forward
from .topology import TopologyConfig, build_pi_tensor


@dataclass
class GCNBranchConfig:
    layer_count: int = 3
    reshape_base: int = 6  # layer width D*D
    adjacency_power: int = 1
    ttl_shapes: tuple = None  # after the input (L, D, D); default: two more (L, D, D)
    structure: str = "tucker"
    readout: str = "mean"  # node-mode pooling after the TTL: "mean" or "sum"

    def __post_init__(self):
        if self.ttl_shapes is not None:
            self.ttl_shapes = tuple(tuple(int(d) for d in shape) for shape in self.ttl_shapes)
        if self.readout not in ("mean", "sum"):
            raise ContractError(f"readout must be 'mean' or 'sum', got {self.readout!r}")
        if self.layer_count < 1:
            raise ContractError("GCN branch needs at least one layer")
        if self.adjacency_power < 1:
            raise ContractError("adjacency power must be >= 1")

    @property
    def width(self):
        return self.reshape_base**2

    def ttl(self):
        first = (self.layer_count, self.reshape_base, self.reshape_base)
        rest = self.ttl_shapes or (first, first)
        return TTLConfig((first,) + tuple(tuple(s) for s in rest), self.structure)


@dataclass
class TopoBranchConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    channels: int = 8
    kernel: int = 3
    pool: int = 2
    ttl_shapes: tuple = ((4, 8, 8), (4, 8, 8))
    structure: str = "tucker"

    def __post_init__(self):
        self.ttl_shapes = tuple(tuple(int(d) for d in shape) for shape in self.ttl_shapes)
        if self.topology.resolution < 2:
            raise ContractError("PI resolution must be >= 2")
        if self.kernel % 2 != 1:
            raise ContractError("kernel size must be odd (same padding)")

    def ttl(self):
        side = self.topology.resolution // self.pool
        first = (self.channels, side, side)
        return TTLConfig((first,) + tuple(tuple(s) for s in self.ttl_shapes), self.structure)


@dataclass
class ModelConfig:
    feature_width: int
    class_count: int = 2
    encoder: str = "tgnn"
    rep_dim: int = 32
    dropout: float = 0.5
    use_conv: bool = True
    use_topo: bool = True
    gcn: GCNBranchConfig = field(default_factory=GCNBranchConfig)
    topo: TopoBranchConfig = field(default_factory=TopoBranchConfig)
    gin_layers: int = 3
    gin_hidden: int = 32

    def __post_init__(self):
        if self.encoder not in ("tgnn", "gin"):
            raise ContractError(f"unknown encoder {self.encoder!r}")
        if self.encoder == "tgnn" and not (self.use_conv or self.use_topo):
            raise ContractError("at least one TGNN branch must be enabled")

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------ graph batches


@dataclass
class GraphBatch:
    """Constant inputs for a batch of graphs, stacked block-diagonally."""

    x: np.ndarray
    propagation: sp.csr_matrix  # block-diag of normalised adjacency powers
    adjacency: sp.csr_matrix  # block-diag plain adjacency (GIN)
    mean_pool: sp.csr_matrix  # (B, N_total)
    sum_pool: sp.csr_matrix
    pi: np.ndarray  # (B, K, Q, P, P) or None

    @property
    def size(self):
        return self.mean_pool.shape[0]


def normalized_adjacency(graph):
    """D~^(-1/2) (A + I) D~^(-1/2)."""
    a = graph.adjacency() + np.eye(graph.node_count)
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


class GraphCache:
    """Per-graph precomputation (propagation matrices, PI tensors) for a dataset."""

    def __init__(self, graphs, config):
        self.graphs = list(graphs)
        self.config = config
        power = config.gcn.adjacency_power
        self.propagation = []
        self.adjacency = []
        for g in self.graphs:
            a_hat = normalized_adjacency(g)
            self.propagation.append(sp.csr_matrix(np.linalg.matrix_power(a_hat, power)))
            self.adjacency.append(sp.csr_matrix(g.adjacency()))
        needs_pi = config.encoder == "tgnn" and config.use_topo
        self.pi = (
            np.stack([build_pi_tensor(g, config.topo.topology) for g in self.graphs])
            if needs_pi and self.graphs else None
        )

    def __len__(self):
        return len(self.graphs)

    def batch(self, index):
        index = np.asarray(index, dtype=np.intp)
        graphs = [self.graphs[i] for i in index]
        sizes = np.array([g.node_count for g in graphs])
        rows = np.repeat(np.arange(len(graphs)), sizes)
        cols = np.arange(sizes.sum())
        sum_pool = sp.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(len(graphs), sizes.sum()))
        mean_pool = sp.csr_matrix(
            (1.0 / sizes[rows], (rows, cols)), shape=(len(graphs), sizes.sum())
        )
        return GraphBatch(
            x=np.concatenate([g.node_features for g in graphs]),
            propagation=sp.block_diag([self.propagation[i] for i in index], format="csr"),
            adjacency=sp.block_diag([self.adjacency[i] for i in index], format="csr"),
            mean_pool=mean_pool,
            sum_pool=sum_pool,
            pi=None if self.pi is None else self.pi[index],
        )


# ------------------------------------------------------------- parameters


def _dense_init(rng, fan_in, fan_out, gain=2.0):
    return rng.normal(0.0, math.sqrt(gain / fan_in), (fan_in, fan_out))


def _add_ttl(store, prefix, ttl_config, rng):
    weights, biases = init_ttl(ttl_config, rng)
    for i, (w, b) in enumerate(zip(weights, biases)):
        for j, f in enumerate(w.factors):
            store.add(f"{prefix}.{i}.f{j}", f)
        store.add(f"{prefix}.{i}.bias", b)
    return [(w.structure, w.input_shape, w.output_shape, w.ranks) for w in weights]


def init_params(config, seed):
    """Build a ParamStore with every trainable tensor of ``config``."""
    store = ad.ParamStore()
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    layout = {}
    d = config.rep_dim
    if config.encoder == "tgnn":
        if config.use_conv:
            g = config.gcn
            width_in = config.feature_width
            for layer in range(g.layer_count):
                store.add(f"gcn.theta{layer}", _dense_init(rng, width_in, g.width))
                width_in = g.width
            ttl = g.ttl()
            layout["conv.ttl"] = _add_ttl(store, "conv.ttl", ttl, rng)
            flat = int(np.prod(ttl.shapes[-1]))
            store.add("conv.out.w", _dense_init(rng, flat, d, 1.0))
            store.add("conv.out.b", np.zeros(d))
        if config.use_topo:
            t = config.topo
            k = t.topology.k
            fan_in = k * t.kernel * t.kernel
            store.add("topo.cnn.w", rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                               (t.channels, k, t.kernel, t.kernel)))
            store.add("topo.cnn.b", np.zeros(t.channels))
            ttl = t.ttl()
            layout["topo.ttl"] = _add_ttl(store, "topo.ttl", ttl, rng)
            flat = int(np.prod(ttl.shapes[-1]))
            store.add("topo.out.w", _dense_init(rng, flat, d, 1.0))
            store.add("topo.out.b", np.zeros(d))
    else:
        width_in = config.feature_width
        for layer in range(config.gin_layers):
            store.add(f"gin.{layer}.eps", np.zeros(1))
            store.add(f"gin.{layer}.w1", _dense_init(rng, width_in, config.gin_hidden))
            store.add(f"gin.{layer}.b1", np.zeros(config.gin_hidden))
            store.add(f"gin.{layer}.w2", _dense_init(rng, config.gin_hidden, config.gin_hidden))
            store.add(f"gin.{layer}.b2", np.zeros(config.gin_hidden))
            width_in = config.gin_hidden
        store.add("gin.out.w", _dense_init(rng, config.gin_hidden, d, 1.0))
        store.add("gin.out.b", np.zeros(d))
    store.add("mlp.w1", _dense_init(rng, d, d))
    store.add("mlp.b1", np.zeros(d))
    store.add("mlp.bn.gamma", np.ones(d))
    store.add("mlp.bn.beta", np.zeros(d))
    store.add("mlp.w2", _dense_init(rng, d, config.class_count, 1.0))
    store.add("mlp.b2", np.zeros(config.class_count))
    store.buffer("mlp.bn", mean=np.zeros(d), var=np.ones(d))
    store.layout = layout
    return store


def _ttl_weights(store, prefix, ttl_config):
    weights, biases = [], []
    for i in range(len(ttl_config.shapes) - 1):
        n_factors = 0
        while f"{prefix}.{i}.f{n_factors}" in store:
            n_factors += 1
        factors = [store.get(f"{prefix}.{i}.f{j}") for j in range(n_factors)]
        structure, inp, out, ranks = store.layout[prefix][i]
        weights.append(LowRankWeight(structure, inp, out, factors, ranks))
        biases.append(store.get(f"{prefix}.{i}.bias"))
    return weights, biases


def _dense(store, prefix, h):
    return ad.add(ad.matmul(h, store.get(f"{prefix}.w")), store.get(f"{prefix}.b"))


# --------------------------------------------------------------- forwards


def gcn_layer(propagation, h_prev, weight):
    """ReLU(A_hat^tau . H . Theta); ``propagation`` is the precomputed A_hat^tau."""
    if np.shape(ad._val(h_prev))[1] != np.shape(ad._val(weight))[0]:
        raise ContractError(
            f"gcn_layer: features of width {np.shape(ad._val(h_prev))[1]} "
            f"vs weight with {np.shape(ad._val(weight))[0]} rows"
        )
    return ad.relu(ad.const_matmul(propagation, ad.matmul(h_prev, weight)))


def conv_branch_forward(store, config, batch):
    g = config.gcn
    h = batch.x
    layers = []
    for layer in range(g.layer_count):
        h = gcn_layer(batch.propagation, h, store.get(f"gcn.theta{layer}"))
        layers.append(h)
    n = batch.x.shape[0]
    z = ad.reshape(ad.stack(layers, axis=1), (n, g.layer_count, g.reshape_base, g.reshape_base))
    ttl = g.ttl()
    weights, biases = _ttl_weights(store, "conv.ttl", ttl)
    t = ttl_forward(ttl, weights, biases, z)
    t = ad.reshape(t, (n, -1))
    pool = batch.mean_pool if g.readout == "mean" else batch.sum_pool
    pooled = ad.const_matmul(pool, t)
    return _dense(store, "conv.out", pooled)


def topo_branch_forward(store, config, batch):
    t = config.topo
    pi = batch.pi
    b, k, q, p, _ = pi.shape
    x = pi.transpose(0, 2, 1, 3, 4).reshape(b * q, k, p, p)
    h = ad.conv2d(x, store.get("topo.cnn.w"), store.get("topo.cnn.b"), padding=t.kernel // 2)
    h = ad.maxpool2d(ad.relu(h), t.pool)
    side = p // t.pool
    h = ad.reshape(h, (b, q, t.channels, side, side))
    h = ad.max_(h, axis=1) if q > 1 else ad.reshape(h, (b, t.channels, side, side))
    ttl = t.ttl()
    weights, biases = _ttl_weights(store, "topo.ttl", ttl)
    h = ad.reshape(ttl_forward(ttl, weights, biases, h), (b, -1))
    return _dense(store, "topo.out", h)


def gin_encoder_forward(store, config, batch):
    h = batch.x
    for layer in range(config.gin_layers):
        scale = ad.add(store.get(f"gin.{layer}.eps"), 1.0)
        agg = ad.add(ad.mul(h, scale), ad.const_matmul(batch.adjacency, h))
        h = ad.relu(_dense_pair(store, f"gin.{layer}", agg))
    return _dense(store, "gin.out", ad.const_matmul(batch.sum_pool, h))


def _dense_pair(store, prefix, h):
    h = ad.relu(ad.add(ad.matmul(h, store.get(f"{prefix}.w1")), store.get(f"{prefix}.b1")))
    return ad.add(ad.matmul(h, store.get(f"{prefix}.w2")), store.get(f"{prefix}.b2"))


def combine_representations(conv, topo):
    if np.shape(ad._val(conv)) != np.shape(ad._val(topo)):
        raise ContractError(
            f"branch representations differ: {np.shape(ad._val(conv))} vs {np.shape(ad._val(topo))}"
        )
    return ad.mul(ad.add(conv, topo), 0.5)


def mlp_classify(store, rep, training, rng=None, dropout=0.5, bn_stats=None, return_stats=False,
                 update_running=True):
    """dense -> batch-norm -> ReLU -> dropout -> dense; returns raw logits.

    ``bn_stats`` normalises with fixed (mean, var) constants instead of the
    batch's own statistics. With ``return_stats`` the (mean, var) used by the
    normalisation is returned alongside the logits.
    """
    h = ad.add(ad.matmul(rep, store.get("mlp.w1")), store.get("mlp.b1"))
    running = store.buffers["mlp.bn"]
    if not update_running:
        running = dict(running)
    if bn_stats is not None:
        stats = bn_stats
    elif training:
        hv = ad._val(h)
        stats = (hv.mean(axis=0), hv.var(axis=0))
    else:
        stats = (running["mean"].copy(), running["var"].copy())
    h = ad.batchnorm(h, store.get("mlp.bn.gamma"), store.get("mlp.bn.beta"), running,
                     training, stats=bn_stats)
    h = ad.relu(h)
    h = ad.dropout(h, dropout, rng, training)
    logits = ad.add(ad.matmul(h, store.get("mlp.w2")), store.get("mlp.b2"))
    return (logits, stats) if return_stats else logits


def encode(store, config, batch):
    """Per-branch representations: dict with keys among conv/topo/gin."""
    if config.encoder == "gin":
        return {"gin": gin_encoder_forward(store, config, batch)}
    reps = {}
    if config.use_conv:
        reps["conv"] = conv_branch_forward(store, config, batch)
    if config.use_topo:
        reps["topo"] = topo_branch_forward(store, config, batch)
    return reps


def combined(reps):
    if "gin" in reps:
        return reps["gin"]
    if "conv" in reps and "topo" in reps:
        return combine_representations(reps["conv"], reps["topo"])
    return reps.get("conv", reps.get("topo"))

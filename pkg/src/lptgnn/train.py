"""Label-propagation objective, the adaptation training loop and evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import encoders as enc
from .autodiff import ContractError, TrainingError
from .graphio import batch_index_stream

ENCODERS = ("tgnn", "gin")
# batch-norm statistics for the classifier passes on pseudo-labelled targets
# and neighbor averages: the current source batch's, the running estimates,
# or each pass's own batch (without touching the running estimates)
AUX_NORMS = ("source", "running", "batch")


@dataclass
class TrainConfig:
    confidence_threshold: float = 0.8
    learning_rate: float = 0.01
    batch_size: int = 32
    max_epochs: int = 200
    patience: int | None = 20
    seed: int = 0
    encoder: str = "tgnn"
    disable_topo: bool = False
    disable_conv: bool = False
    disable_sup: bool = False
    disable_lp: bool = False
    dropout: float = 0.5
    aux_norm: str = "batch"
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ContractError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if not self.confidence_threshold > 0:
            raise ContractError("confidence_threshold must be > 0")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2")
        if self.max_epochs < 1:
            raise ContractError("max_epochs must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ContractError("patience must be >= 1 or None")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        if self.disable_conv and self.disable_topo:
            raise ContractError("cannot disable both TGNN branches")
        if self.aux_norm not in AUX_NORMS:
            raise ContractError(f"aux_norm must be one of {AUX_NORMS}, got {self.aux_norm!r}")
        if self.disable_sup and self.disable_lp:
            raise ContractError("disable_sup and disable_lp together leave no loss")

    def to_dict(self):
        return asdict(self)


def model_config(train_config, feature_width, class_count, gcn=None, topo=None, rep_dim=32):
    """Encoder configuration implied by a TrainConfig and the data shape."""
    return enc.ModelConfig(
        feature_width=feature_width,
        class_count=class_count,
        encoder=train_config.encoder,
        rep_dim=rep_dim,
        dropout=train_config.dropout,
        use_conv=not train_config.disable_conv,
        use_topo=not train_config.disable_topo,
        gcn=gcn or enc.GCNBranchConfig(),
        topo=topo or enc.TopoBranchConfig(),
    )


# ------------------------------------------------------------------ losses


@dataclass(frozen=True)
class NeighborSet:
    target_index: int
    source_indices: tuple
    pseudo_label: int
    confidence: float


def pseudo_label(target_logits, source_labels):
    """Neighbor sets for each row of ``target_logits`` (detached values).

    np.argmax returns the first maximiser, so ties go to the lower class.
    """
    probs = ad.softmax(ad._val(target_logits))
    labels = np.asarray(source_labels)
    out = []
    for j, row in enumerate(probs):
        y = int(np.argmax(row))
        out.append(NeighborSet(j, tuple(int(i) for i in np.flatnonzero(labels == y)), y, float(row[y])))
    return out


def selected(neighbor_sets, threshold):
    """Sets that pass the confidence threshold and have at least one source neighbor."""
    return [s for s in neighbor_sets if s.confidence > threshold and s.source_indices]


def neighbor_average_matrix(sets, n_source):
    """(len(sets), n_source) matrix whose rows average each set's source rows."""
    rows, cols, vals = [], [], []
    for r, s in enumerate(sets):
        for i in s.source_indices:
            rows.append(r)
            cols.append(i)
            vals.append(1.0 / len(s.source_indices))
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(sets), n_source))


def consistency_reg(neighbor_sets, source_reps, classify, threshold, target_batch_size=None):
    """Cross-entropy of neighbor-averaged source logits against confident pseudo-labels.

    ``classify`` maps averaged representations to logits. The sum over
    selected targets is divided by the full target batch size.
    """
    n_t = len(neighbor_sets) if target_batch_size is None else target_batch_size
    chosen = selected(neighbor_sets, threshold)
    if not chosen or n_t == 0:
        return np.asarray(0.0)
    n_s = np.shape(ad._val(source_reps))[0]
    avg = ad.const_matmul(neighbor_average_matrix(chosen, n_s), source_reps)
    logits = classify(avg)
    total = ad.cross_entropy(logits, [s.pseudo_label for s in chosen], reduction="sum")
    return ad.mul(total, 1.0 / n_t)


def supervised_loss(logits, labels):
    return ad.cross_entropy(logits, labels, reduction="mean")


def total_loss(sup, reg_conv, reg_topo, disable_sup=False, disable_lp=False):
    """Unweighted sum of enabled components."""
    terms = []
    if not disable_sup:
        terms.append(sup)
    if not disable_lp:
        terms += [reg_conv, reg_topo]
    out = np.asarray(0.0)
    for t in terms:
        out = ad.add(out, t)
    return out


# ------------------------------------------------------------------ steps


@dataclass
class StepResult:
    loss: object
    loss_sup: float
    reg: dict
    selected: int
    pseudo_total: int
    pseudo_correct: int


def loss_on_batch(store, model_cfg, train_cfg, source_batch, source_labels, target_batch,
                  rng, target_labels=None, training=True):
    """Forward one paired batch and return the total loss with its components.

    Target representations and pseudo-labels carry no gradient. When the
    label-propagation terms are disabled the target batch is never touched.
    """
    tracking = store.tracking
    rate = train_cfg.dropout if training else 0.0
    target_reps = None
    if not train_cfg.disable_lp:
        store.track(False)
        target_reps = enc.encode(store, model_cfg, target_batch)
        store.track(tracking)
    source_reps = enc.encode(store, model_cfg, source_batch)
    sup_logits, stats = enc.mlp_classify(store, enc.combined(source_reps), training, rng, rate,
                                         return_stats=True)
    sup = supervised_loss(sup_logits, source_labels)

    def classify(z):
        if train_cfg.aux_norm == "batch" or not training:
            return enc.mlp_classify(store, z, training, rng, rate, update_running=False)
        running = store.buffers["mlp.bn"]
        fixed = stats if train_cfg.aux_norm == "source" else (running["mean"], running["var"])
        return enc.mlp_classify(store, z, training, rng, rate, bn_stats=fixed)

    reg = {"conv": np.asarray(0.0), "topo": np.asarray(0.0)}
    n_sel = n_total = n_correct = 0
    if target_reps is not None:
        for branch, rep_t in target_reps.items():
            logits_t = classify(rep_t)  # only its values are read
            sets = pseudo_label(logits_t, source_labels)
            chosen = selected(sets, train_cfg.confidence_threshold)
            n_total += len(sets)
            n_sel += len(chosen)
            if target_labels is not None:
                n_correct += sum(int(s.pseudo_label == target_labels[s.target_index]) for s in chosen)
            key = "topo" if branch == "topo" else "conv"
            reg[key] = consistency_reg(sets, source_reps[branch], classify,
                                       train_cfg.confidence_threshold, len(sets))
    loss = total_loss(sup, reg["conv"], reg["topo"], train_cfg.disable_sup, train_cfg.disable_lp)
    return StepResult(loss, float(ad._val(sup)), {k: float(ad._val(v)) for k, v in reg.items()},
                      n_sel, n_total, n_correct)


def predict(store, model_cfg, cache, batch_size=256):
    """Eval-mode logits for every graph of ``cache``."""
    store.track(False)
    out = []
    for start in range(0, len(cache), batch_size):
        b = cache.batch(np.arange(start, min(start + batch_size, len(cache))))
        out.append(enc.mlp_classify(store, enc.combined(enc.encode(store, model_cfg, b)), False))
    return np.concatenate(out) if out else np.zeros((0, model_cfg.class_count))


def evaluate(store, model_cfg, dataset, cache=None, batch_size=256):
    """Accuracy of eval-mode argmax predictions against the dataset's labels."""
    labels = dataset.labels
    if (labels < 0).any():
        raise ContractError("evaluate needs every graph labelled")
    if not len(dataset):
        return float("nan")
    cache = cache or enc.GraphCache(dataset.graphs, model_cfg)
    pred = np.argmax(predict(store, model_cfg, cache, batch_size), axis=1)
    return float(np.mean(pred == labels))


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    store: ad.ParamStore
    model_config: enc.ModelConfig
    metrics: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    final_accuracy: float = float("nan")


def _rngs(seed):
    init_seq, batch_seq, drop_seq = np.random.SeedSequence(seed).spawn(3)
    return int(init_seq.generate_state(1)[0]), int(batch_seq.generate_state(1)[0]), np.random.default_rng(drop_seq)


def _clean(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def train(source, target, config, model_cfg=None, log=None, target_labels=None):
    """Adapt from a labelled ``source`` to an unlabelled ``target`` domain.

    ``target_labels`` are only read for the logged diagnostics and the
    patience rule; by default they are taken from ``target`` itself.
    ``log`` is called with each epoch's metrics dict.
    """
    if source.class_count != target.class_count:
        raise ContractError("source and target disagree on the class count")
    if source.feature_width != target.feature_width:
        raise ContractError(
            f"feature width mismatch: source {source.feature_width}, target {target.feature_width}"
        )
    if (source.labels < 0).any():
        raise ContractError("every source graph needs a label")
    model_cfg = model_cfg or model_config(config, source.feature_width, source.class_count)
    init_seed, batch_seed, drop_rng = _rngs(config.seed)
    store = enc.init_params(model_cfg, init_seed)
    src_cache = enc.GraphCache(source.graphs, model_cfg)
    tgt_cache = enc.GraphCache(target.graphs, model_cfg)
    src_labels = source.labels
    if target_labels is None:
        target_labels = target.labels
    has_target_labels = target_labels is not None and not (np.asarray(target_labels) < 0).any()
    stream = batch_index_stream(len(source), len(target), config.batch_size, batch_seed)

    result = TrainResult(store, model_cfg)
    best_acc, best_values, best_buffers, since_best = -1.0, None, None, 0
    for epoch in range(1, config.max_epochs + 1):
        sums = {"sup": 0.0, "conv": 0.0, "topo": 0.0}
        n_batches = n_sel = n_total = n_correct = 0
        for si, ti in next(stream):
            store.track(True)
            with ad.Tape() as tape:
                step = loss_on_batch(
                    store, model_cfg, config,
                    src_cache.batch(si), src_labels[si], tgt_cache.batch(ti), drop_rng,
                    target_labels[ti] if has_target_labels else None,
                )
                value = float(ad._val(step.loss))
                if not math.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss {value} at epoch {epoch} (sup {step.loss_sup}, reg {step.reg})"
                    )
                tape.backward(step.loss, store)
            store.track(False)
            ad.adam_step(store, config.learning_rate)
            sums["sup"] += step.loss_sup
            sums["conv"] += step.reg["conv"]
            sums["topo"] += step.reg["topo"]
            n_batches += 1
            n_sel += step.selected
            n_total += step.pseudo_total
            n_correct += step.pseudo_correct
        target_acc = (
            float(np.mean(np.argmax(predict(store, model_cfg, tgt_cache, config.eval_batch_size), 1)
                          == target_labels))
            if has_target_labels else None
        )
        row = {
            "epoch": epoch,
            "loss_sup": sums["sup"] / n_batches,
            "loss_reg_conv": sums["conv"] / n_batches,
            "loss_reg_topo": sums["topo"] / n_batches,
            "filtered_fraction": n_sel / n_total if n_total else 0.0,
            "pseudo_acc": n_correct / n_sel if n_sel and has_target_labels else None,
            "target_acc": _clean(target_acc),
        }
        result.metrics.append(row)
        if log is not None:
            log(row)
        if config.patience is None or target_acc is None:
            continue
        if target_acc > best_acc:
            best_acc, since_best = target_acc, 0
            best_values = {k: v.copy() for k, v in store.values().items()}
            best_buffers = {k: {n: a.copy() for n, a in b.items()} for k, b in store.buffers.items()}
            result.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                store.load_values(best_values)
                for k, b in best_buffers.items():
                    store.buffers[k].update(b)
                result.stopped_early = True
                break
    if not result.stopped_early:
        result.best_epoch = len(result.metrics)
    if has_target_labels:
        pred = np.argmax(predict(store, model_cfg, tgt_cache, config.eval_batch_size), 1)
        result.final_accuracy = float(np.mean(pred == target_labels))
    return result


# -------------------------------------------------------------- checkpoints


def metrics_line(row):
    return json.dumps(row, sort_keys=False, allow_nan=False)


def checkpoint_document(store, model_cfg, train_cfg, manifest=None):
    return {
        "format": "lptgnn-checkpoint/1",
        "train_config": train_cfg.to_dict(),
        "model_config": model_cfg.to_dict(),
        "manifest": manifest or {},
        "parameters": {
            k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in store.values().items()
        },
        "buffers": {
            k: {n: {"shape": list(a.shape), "values": a.ravel().tolist()} for n, a in b.items()}
            for k, b in store.buffers.items()
        },
    }


def save_checkpoint(path, store, model_cfg, train_cfg, manifest=None):
    with open(path, "w") as fh:
        json.dump(checkpoint_document(store, model_cfg, train_cfg, manifest), fh)


def model_config_from_dict(d):
    d = dict(d)
    gcn = dict(d.pop("gcn"))
    topo = dict(d.pop("topo"))
    topology = enc.TopologyConfig(**topo.pop("topology"))
    return enc.ModelConfig(
        gcn=enc.GCNBranchConfig(**gcn),
        topo=enc.TopoBranchConfig(topology=topology, **topo),
        **d,
    )


def load_checkpoint(path):
    """Return (store, model config, train config, manifest) from a checkpoint file."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "lptgnn-checkpoint/1":
        raise ContractError(f"{path}: not a checkpoint document")
    model_cfg = model_config_from_dict(doc["model_config"])
    train_cfg = TrainConfig(**doc["train_config"])
    store = enc.init_params(model_cfg, 0)
    store.load_values({
        k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["parameters"].items()
    })
    for k, b in doc["buffers"].items():
        store.buffers[k].update(
            {n: np.asarray(a["values"], dtype=np.float64).reshape(a["shape"]) for n, a in b.items()}
        )
    return store, model_cfg, train_cfg, doc.get("manifest", {})

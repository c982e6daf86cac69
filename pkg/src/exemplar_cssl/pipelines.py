"""Training stages: CSSL pretraining, supervised finetuning, NCL, few-shot base.

Every stage is a deterministic function of (data, config, seed). Batches
are a seeded permutation split into near-equal chunks; augmentation streams
are keyed by (seed, sample id, epoch, view).
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .contrastive import (
    LossConfig,
    consistency_loss,
    cross_entropy,
    fewshot_total_loss,
    ncl_loss,
    nnclr_loss,
    pairwise_bce_loss,
    scl_loss,
)
from .data import AugmentSpec, DatasetSplit, augment_batch
from .encoder import EncoderConfig, ModelParams, add_head, classify, embed, init_params, predict_head
from .support_set import NO_LABEL, SupportSet


class NonFiniteLossError(FloatingPointError):
    def __init__(self, stage: str, epoch: int, batch: int, node: str = ""):
        self.stage, self.epoch, self.batch = stage, epoch, batch
        super().__init__(f"non-finite loss in stage {stage}, epoch {epoch}, batch {batch} {node}".rstrip())


class CheckpointError(Exception):
    pass


class CheckpointNotFoundError(CheckpointError, FileNotFoundError):
    pass


class CorruptCheckpointError(CheckpointError, ValueError):
    pass


class HashMismatchError(CheckpointError, ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    support_capacity: int = 1024
    seed: int = 0
    stage: str = "train"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def contrastive(self) -> TrainConfig:
        if self.batch_size < 2:
            raise ValueError("contrastive stages need batch_size >= 2")
        return self


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return np.array_split(perm, max(1, math.ceil(n / batch_size)))


@contextmanager
def _numeric(where: tuple):
    """Report any non-finite intermediate as a training abort at ``where``."""
    try:
        yield
    except dc.NonFiniteError as err:
        raise NonFiniteLossError(*where, node=err.node) from err


def _step(params: ModelParams, trainable, loss_fn, state: dc.OptimizerState, where: tuple):
    trace = dc.Trace()
    with _numeric(where):
        loss = loss_fn(params.bind(trace, trainable))
    grads = dc.gradient(trace, loss)
    new, state = dc.optimizer_step(params.arrays(), grads, state)
    bad = [k for k in grads if not np.all(np.isfinite(new[k]))]
    if bad:
        raise NonFiniteLossError(*where, node=f"update of {bad[0]}")
    return params.updated({k: new[k] for k in grads}), state, float(loss.value)


def _labels_or_none(labels, n) -> np.ndarray:
    if labels is None:
        return np.full(n, NO_LABEL, dtype=np.int64)
    return np.asarray(labels, dtype=np.int64)


def _joint_training(
    x: np.ndarray,
    ids: np.ndarray,
    labels: np.ndarray,
    params: ModelParams,
    config: TrainConfig,
    lam: float,
    supervised: bool,
    classes: list[int] | None = None,
    trainable=lambda name: True,
):
    """Shared loop: CE on labeled clean inputs plus lam * NNCLR on two views."""
    use_cssl = lam > 0
    if use_cssl:
        config.contrastive()
    lookup = {c: i for i, c in enumerate(classes or [])}
    support = SupportSet(config.support_capacity)
    state = dc.OptimizerState(config.optimizer, config.lr)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for b, idx in enumerate(batches(len(x), config.batch_size, config.seed, epoch)):
            xb, lb = x[idx], labels[idx]
            has_label = lb != NO_LABEL
            if supervised and has_label.any():
                targets = np.array([lookup[c] for c in lb[has_label]])
            if use_cssl:
                v1 = augment_batch(xb, ids[idx], config.augment, config.seed, epoch, 0)
                v2 = augment_batch(xb, ids[idx], config.augment, config.seed, epoch, 1)
                batch_labels = [None if c == NO_LABEL else int(c) for c in lb]
                if len(support) == 0:
                    with _numeric((config.stage, epoch, b)):
                        support.push(embed(params, v1), batch_labels)

            def loss_fn(p):
                sup = 0.0
                if supervised and has_label.any():
                    sup = cross_entropy(classify(p, "labeled", embed(p, xb[has_label])), targets)
                if not use_cssl:
                    return sup
                z1 = embed(p, v1)
                p2 = predict_head(p, embed(p, v2))
                self_loss = nnclr_loss(z1, p2, support, config.loss.tau, batch_labels, config.loss)
                return fewshot_total_loss(sup, self_loss, lam)

            params, state, value = _step(params, trainable, loss_fn, state, (config.stage, epoch, b))
            losses.append(value)
            if use_cssl:
                with _numeric((config.stage, epoch, b)):
                    support.push(embed(params, v1), batch_labels)
        history.append(float(np.mean(losses)))
    return params, history


def pretrain_cssl(x, ids, labels, config: TrainConfig, params: ModelParams):
    """Label-aware NNCLR pretraining. ``labels`` may be None or use NO_LABEL."""
    if len(x) == 0:
        raise ValueError("empty pool")
    labels = _labels_or_none(labels, len(x))
    return _joint_training(np.asarray(x), np.asarray(ids), labels, params, config, lam=1.0, supervised=False)


def _attach_labeled_head(params: ModelParams, classes: list[int], seed: int) -> ModelParams:
    return add_head(params, "labeled", len(classes), seed=seed + 1)


def finetune_supervised(params: ModelParams, x, y, config: TrainConfig, mode: str = "full", classes=None):
    """Cross-entropy training of a fresh labeled head on top of ``params``.

    ``mode="linear-probe"`` freezes the encoder. Returns (params, classes,
    history) where ``classes[i]`` is the label of head output i.
    """
    if mode not in ("full", "linear-probe"):
        raise ValueError(f"unknown finetune mode {mode!r}")
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty labeled set")
    classes = sorted(set(y.tolist())) if classes is None else list(classes)
    unseen = set(y.tolist()) - set(classes)
    if unseen:
        raise ValueError(f"labels {sorted(unseen)} are not among the head's classes")
    params = _attach_labeled_head(params, classes, config.seed)
    trainable = (lambda n: True) if mode == "full" else (lambda n: n.startswith("cls.labeled"))
    ids = np.arange(len(y))
    params, history = _joint_training(
        np.asarray(x), ids, y, params, config, lam=0.0, supervised=True, classes=classes, trainable=trainable
    )
    return params, classes, history


def fewshot_base(x, ids, labels, config: TrainConfig, params: ModelParams, supervised: bool = True, classes=None):
    """Base stage: CE on the labeled portion + lambda * NNCLR on everything.

    Batches are drawn uniformly from the concatenated pool. With lambda=0
    this is plain supervised training; with ``supervised=False`` it is
    CSSL pretraining scaled by lambda.
    """
    labels = _labels_or_none(labels, len(x))
    if len(x) == 0:
        raise ValueError("empty base data")
    lam = config.loss.lambda_self
    if supervised:
        known = sorted(set(labels[labels != NO_LABEL].tolist()))
        classes = known if classes is None else list(classes)
        if not classes:
            raise ValueError("supervised base stage needs labeled samples")
        params = _attach_labeled_head(params, classes, config.seed)
    params, history = _joint_training(
        np.asarray(x), np.asarray(ids), labels, params, config, lam=lam, supervised=supervised, classes=classes
    )
    return params, classes, history


def predict_labeled(params: ModelParams, classes, x) -> np.ndarray:
    logits = classify(params, "labeled", embed(params, np.asarray(x)))
    return np.asarray(classes)[np.argmax(logits, axis=1)]


# ---------------------------------------------------------------------------
# NCL


@dataclass
class NclResult:
    params: ModelParams
    known_classes: list[int]
    history: dict[str, list[float]]
    snapshots: dict[str, ModelParams]

    def cluster_ids(self, x) -> np.ndarray:
        """Unlabeled-head assignments for ``x``."""
        logits = classify(self.params, "unlabeled", embed(self.params, np.asarray(x)))
        return np.argmax(logits, axis=1)


def _probs(p, head, z):
    return dc.softmax(classify(p, head, z), axis=1)


def ncl_pipeline(split: DatasetSplit, config: TrainConfig, params: ModelParams, num_novel: int | None = None):
    """Three NCD stages over one shared encoder.

    1. CE + consistency on the labeled pool.
    2. NCL on the unlabeled pool (labeled embeddings as hard negatives)
       + SCL on the labeled pool.
    3. Pairwise BCE + consistency through the unlabeled head, labeled head frozen.
    """
    config.contrastive()
    lab, unl = split.labeled, split.unlabeled
    if len(lab) == 0 or len(unl) == 0:
        raise ValueError("NCL needs non-empty labeled and unlabeled pools")
    num_novel = num_novel or split.num_novel
    if not num_novel:
        raise ValueError("the number of novel classes must be configured")
    classes = lab.classes()
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[c] for c in lab.labels])
    seed, aug, lc = config.seed, config.augment, config.loss
    params = _attach_labeled_head(params, classes, seed)
    params = add_head(params, "unlabeled", num_novel, seed=seed + 2)
    history: dict[str, list[float]] = {"stage1": [], "stage2": [], "stage3": []}
    snapshots = {"init": params.copy()}

    def views(pool, idx, epoch, salt):
        return (
            augment_batch(pool.x[idx], pool.ids[idx], aug, seed + salt, epoch, 0),
            augment_batch(pool.x[idx], pool.ids[idx], aug, seed + salt, epoch, 1),
        )

    # stage 1
    state = dc.OptimizerState(config.optimizer, config.lr)
    stage1 = lambda n: not n.startswith(("cls.unlabeled", "head."))
    for epoch in range(config.epochs):
        losses = []
        for b, idx in enumerate(batches(len(lab), config.batch_size, seed + 11, epoch)):
            v1, v2 = views(lab, idx, epoch, 11)

            def loss_fn(p):
                l1 = classify(p, "labeled", embed(p, v1))
                l2 = classify(p, "labeled", embed(p, v2))
                cs = consistency_loss(dc.softmax(l1, axis=1), dc.softmax(l2, axis=1))
                return dc.add(cross_entropy(l1, y[idx]), cs)

            params, state, v = _step(params, stage1, loss_fn, state, ("ncl-1", epoch, b))
            losses.append(v)
        history["stage1"].append(float(np.mean(losses)))
    snapshots["stage1"] = params.copy()

    # stage 2
    state = dc.OptimizerState(config.optimizer, config.lr)
    stage2 = lambda n: n.startswith("enc.")
    support = SupportSet(config.support_capacity)
    for epoch in range(config.epochs):
        losses = []
        lab_batches = batches(len(lab), config.batch_size, seed + 12, epoch)
        for b, idx in enumerate(batches(len(unl), config.batch_size, seed + 22, epoch)):
            lidx = lab_batches[b % len(lab_batches)]
            u1, u2 = views(unl, idx, epoch, 22)
            l1, l2 = views(lab, lidx, epoch, 12)
            if len(support) == 0:
                with _numeric(("ncl-2", epoch, b)):
                    support.push(embed(params, u2))

            def loss_fn(p):
                zu1, zu2 = embed(p, u1), embed(p, u2)
                zl1, zl2 = embed(p, l1), embed(p, l2)
                ncl = ncl_loss(zu1, zu2, support, zl1, lc.tau, lc.k_pseudo)
                scl = scl_loss(zl1, lab.labels[lidx], zl2, lab.labels[lidx], lc.tau)
                return dc.add(ncl, scl)

            params, state, v = _step(params, stage2, loss_fn, state, ("ncl-2", epoch, b))
            losses.append(v)
            with _numeric(("ncl-2", epoch, b)):
                support.push(embed(params, u2))
        history["stage2"].append(float(np.mean(losses)))
    snapshots["stage2"] = params.copy()

    # stage 3
    state = dc.OptimizerState(config.optimizer, config.lr)
    stage3 = lambda n: n.startswith(("enc.", "cls.unlabeled"))
    for epoch in range(config.epochs):
        losses = []
        for b, idx in enumerate(batches(len(unl), config.batch_size, seed + 33, epoch)):
            u1, u2 = views(unl, idx, epoch, 33)
            with _numeric(("ncl-3", epoch, b)):
                feats = embed(params, unl.x[idx])

            def loss_fn(p):
                p1 = _probs(p, "unlabeled", embed(p, u1))
                p2 = _probs(p, "unlabeled", embed(p, u2))
                return dc.add(pairwise_bce_loss(feats, p1, lc.rho), consistency_loss(p1, p2))

            params, state, v = _step(params, stage3, loss_fn, state, ("ncl-3", epoch, b))
            losses.append(v)
        history["stage3"].append(float(np.mean(losses)))
    snapshots["stage3"] = params.copy()
    return NclResult(params, classes, history, snapshots)


# ---------------------------------------------------------------------------
# checkpoints and metric files


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    manifest: dict
    params: ModelParams


def _format_values(a: np.ndarray) -> str:
    return "[" + ",".join(f"{v:.17g}" for v in np.asarray(a, dtype=np.float64).ravel()) + "]"


def save_checkpoint(params: ModelParams, manifest: dict, path) -> Path:
    """Write params and manifest as JSON; floats carry 17 significant digits.

    ``manifest["config"]`` is hashed into ``manifest["config_hash"]``.
    """
    manifest = dict(manifest)
    manifest["config_hash"] = config_hash(manifest.get("config", {}))
    head = json.dumps({"manifest": manifest, "encoder": params.config.to_dict()}, sort_keys=True)
    tensors = ",".join(
        f'{json.dumps(name)}:{{"shape":{json.dumps(list(np.shape(dc.value_of(v))))},"values":{_format_values(dc.value_of(v))}}}'
        for name, v in sorted(params.tensors.items())
    )
    path = Path(path)
    path.write_text(head[:-1] + f',"tensors":{{{tensors}}}}}\n')
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointNotFoundError(f"no checkpoint at {path}")
    try:
        doc = json.loads(path.read_text())
        manifest = doc["manifest"]
        enc = doc["encoder"]
        cfg = EncoderConfig(enc["input_dim"], tuple(enc["hidden_dims"]), enc["embed_dim"], enc["normalize_output"])
        tensors = {}
        for name, t in doc["tensors"].items():
            tensors[name] = np.array(t["values"], dtype=np.float64).reshape(t["shape"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        raise CorruptCheckpointError(f"{path}: {err}") from err
    if manifest.get("config_hash") != config_hash(manifest.get("config", {})):
        raise HashMismatchError(f"{path}: config hash does not match the stored config")
    return Checkpoint(manifest, ModelParams(cfg, tensors))


def write_history_csv(path, rows) -> None:
    """rows: iterable of (stage, epoch, loss_name, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "epoch", "loss_name", "value"])
        for stage, epoch, name, value in rows:
            w.writerow([stage, epoch, name, repr(float(value))])


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    loss = LossConfig(**d.pop("loss", {}))
    aug = d.pop("augment", {})
    if "scale_range" in aug:
        aug = {**aug, "scale_range": tuple(aug["scale_range"])}
    return TrainConfig(loss=loss, augment=AugmentSpec(**aug), **d)


def train_config_to_dict(c: TrainConfig) -> dict:
    d = asdict(c)
    d["augment"]["scale_range"] = list(c.augment.scale_range)
    return d


def new_encoder(input_dim: int, seed: int, hidden_dims=(128,), embed_dim: int = 32) -> ModelParams:
    return init_params(EncoderConfig(input_dim, tuple(hidden_dims), embed_dim), seed)

"""Few-shot class-incremental learning with topology or relation distillation.

Two forgetting-mitigation penalties plug into one session loop:

* ``ng``: a neural gas fitted on base embeddings and grown for each novel
  session. Old vertices are anchored; new samples are pulled toward their
  class vertex and pushed off neighbouring vertices of other classes.
* ``erg``: an exemplar relation graph of the K most representative
  exemplars per class. The student must preserve the angles formed by
  exemplar triplets in the teacher's embedding space.

The classifier is nearest-class-mean over stored exemplars.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .contrastive import cross_entropy
from .data import AugmentSpec, Sample, augment_batch
from .encoder import ModelParams, embed
from .pipelines import TrainConfig, fewshot_base
from .support_set import sq_distances

ANGLE_CLIP = 1.0 - 1e-9
NORM_EPS = 1e-24


class MissingAnchorError(KeyError):
    pass


# ---------------------------------------------------------------------------
# neural gas


@dataclass
class NeuralGas:
    centroids: np.ndarray  # (V, d)
    classes: np.ndarray  # (V,), -1 before assignment
    errors: np.ndarray  # accumulated squared distance per vertex
    ages: np.ndarray  # (V, V) int, -1 where there is no edge
    eps_w: float = 0.05
    eps_n: float = 0.005
    max_age: int = 50
    exemplar_inputs: list = field(default_factory=list)  # per vertex (n_i, input_dim)
    exemplar_embeddings: list = field(default_factory=list)  # teacher embeddings of the above
    anchors: dict = field(default_factory=dict)  # vertex -> centroid before the latest growth

    @property
    def edges(self) -> np.ndarray:
        return (self.ages >= 0).astype(np.int64)

    def __len__(self) -> int:
        return len(self.centroids)

    def neighbours(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.ages[v] >= 0)

    def copy(self) -> NeuralGas:
        return replace(
            self,
            centroids=self.centroids.copy(),
            classes=self.classes.copy(),
            errors=self.errors.copy(),
            ages=self.ages.copy(),
            exemplar_inputs=list(self.exemplar_inputs),
            exemplar_embeddings=list(self.exemplar_embeddings),
            anchors=dict(self.anchors),
        )

    def winners(self, x: np.ndarray) -> np.ndarray:
        return np.argmin(sq_distances(np.atleast_2d(x), self.centroids), axis=1)

    def adapt(self, x: np.ndarray) -> None:
        """One competitive Hebbian step for sample ``x``."""
        d = np.sum((self.centroids - x) ** 2, axis=1)
        order = np.argsort(d, kind="stable")
        s1 = order[0]
        self.errors[s1] += d[s1]
        if len(order) > 1:
            s2 = order[1]
            nb = self.ages[s1] >= 0
            self.ages[s1, nb] += 1
            self.ages[nb, s1] += 1
            self.ages[s1, s2] = self.ages[s2, s1] = 0
        self.centroids[s1] += self.eps_w * (x - self.centroids[s1])
        for j in self.neighbours(s1):
            self.centroids[j] += self.eps_n * (x - self.centroids[j])
        stale = self.ages > self.max_age
        self.ages[stale] = -1


def _assign_classes(gas: NeuralGas, emb: np.ndarray, labels: np.ndarray, vertices) -> None:
    win = gas.winners(emb)
    for v in vertices:
        won = labels[win == v]
        if len(won):
            vals, counts = np.unique(won, return_counts=True)
            gas.classes[v] = vals[np.argmax(counts)]
        else:
            gas.classes[v] = labels[np.argmin(np.sum((emb - gas.centroids[v]) ** 2, axis=1))]


def _store_exemplars(gas: NeuralGas, emb, inputs, vertices, cap: int) -> None:
    win = gas.winners(emb)
    for v in vertices:
        idx = np.flatnonzero(win == v)
        if len(idx):
            d = np.sum((emb[idx] - gas.centroids[v]) ** 2, axis=1)
            idx = idx[np.argsort(d, kind="stable")[:cap]]
        gas.exemplar_inputs[v] = inputs[idx]
        gas.exemplar_embeddings[v] = emb[idx]


def ng_fit_base(
    embeddings,
    labels,
    n_vertices: int,
    epochs: int = 5,
    eps_w: float = 0.05,
    eps_n: float = 0.005,
    max_age: int = 50,
    seed: int = 0,
    inputs=None,
    exemplar_cap: int = 5,
) -> NeuralGas:
    """Fit a neural gas on labeled embeddings by competitive Hebbian learning.

    Vertices start on distinct random samples. After fitting, each vertex
    takes the majority label of the samples it wins and keeps up to
    ``exemplar_cap`` of them (``inputs`` rows, or the embeddings themselves)
    for tracking its position under a changing encoder.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if n_vertices > len(emb):
        raise ValueError(f"{n_vertices} vertices but only {len(emb)} samples")
    rng = np.random.default_rng(seed)
    start = rng.choice(len(emb), size=n_vertices, replace=False)
    gas = NeuralGas(
        emb[start].copy(),
        np.full(n_vertices, -1, dtype=np.int64),
        np.zeros(n_vertices),
        np.full((n_vertices, n_vertices), -1, dtype=np.int64),
        eps_w,
        eps_n,
        max_age,
        exemplar_inputs=[None] * n_vertices,
        exemplar_embeddings=[None] * n_vertices,
    )
    for _ in range(epochs):
        for i in rng.permutation(len(emb)):
            gas.adapt(emb[i])
    vertices = range(n_vertices)
    _assign_classes(gas, emb, labels, vertices)
    _store_exemplars(gas, emb, emb if inputs is None else np.asarray(inputs), vertices, exemplar_cap)
    return gas


def ng_grow(gas: NeuralGas, embeddings, labels, per_class: int = 1, epochs: int = 5, seed: int = 0, inputs=None, exemplar_cap: int = 5) -> NeuralGas:
    """Insert vertices for novel classes, then adapt on the novel samples only.

    Pre-existing centroids are recorded in ``anchors`` before adaptation.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    novel = sorted(set(labels.tolist()))
    if set(novel) & set(gas.classes.tolist()):
        raise ValueError(f"classes {sorted(set(novel) & set(gas.classes.tolist()))} already have vertices")
    g = gas.copy()
    old = len(g)
    g.anchors = {v: g.centroids[v].copy() for v in range(old)}
    rng = np.random.default_rng(seed)
    new_c, new_cls = [], []
    for c in novel:
        members = np.flatnonzero(labels == c)
        pick = rng.choice(members, size=min(per_class, len(members)), replace=False)
        new_c.extend(emb[pick])
        new_cls.extend([c] * len(pick))
    n_new = len(new_c)
    g.centroids = np.vstack([g.centroids, np.array(new_c)])
    g.classes = np.concatenate([g.classes, np.array(new_cls, dtype=np.int64)])
    g.errors = np.concatenate([g.errors, np.zeros(n_new)])
    ages = np.full((old + n_new, old + n_new), -1, dtype=np.int64)
    ages[:old, :old] = g.ages
    g.ages = ages
    g.exemplar_inputs += [None] * n_new
    g.exemplar_embeddings += [None] * n_new
    for _ in range(epochs):
        for i in rng.permutation(len(emb)):
            g.adapt(emb[i])
    new_vertices = range(old, old + n_new)
    _store_exemplars(g, emb, emb if inputs is None else np.asarray(inputs), new_vertices, exemplar_cap)
    return g


def anchor_penalty(current, anchors):
    """Mean squared Euclidean distance between matching rows."""
    diff = dc.sub(current, anchors)
    return dc.mean(dc.sum(dc.mul(diff, diff), axis=1))


def ng_vertex_positions(gas: NeuralGas, student: ModelParams, vertices):
    """Vertex centroids carried along by the student's drift on their exemplars.

    position_v = anchor_v + mean(student(x_e) - teacher(x_e)) over v's exemplars.
    """
    rows = []
    for v in vertices:
        if v not in gas.anchors:
            raise MissingAnchorError(v)
        shift = dc.mean(dc.sub(embed(student, gas.exemplar_inputs[v]), gas.exemplar_embeddings[v]), axis=0)
        rows.append(dc.reshape(dc.add(gas.anchors[v], shift), (1, -1)))
    return dc.concatenate(rows)


def ng_anchor_penalty(gas: NeuralGas, anchors: dict, student: ModelParams):
    """Anchor loss over old vertices that hold exemplars."""
    vertices = [v for v in sorted(anchors) if gas.exemplar_inputs[v] is not None and len(gas.exemplar_inputs[v])]
    for v in vertices:
        if v >= len(gas):
            raise MissingAnchorError(v)
    if not vertices:
        return 0.0
    g = replace(gas, anchors=anchors)
    current = ng_vertex_positions(g, student, vertices)
    return anchor_penalty(current, np.array([anchors[v] for v in vertices]))


def _dist(z, m):
    diff = dc.sub(z, m)
    return dc.sqrt(dc.shift(dc.sum(dc.mul(diff, diff), axis=-1), NORM_EPS))


def ng_minmax_penalty(gas: NeuralGas, z, cls: int, delta_pull: float = 0.1, delta_push: float = 0.5):
    """Hinge pull toward the nearest same-class vertex, push off its other-class neighbours."""
    if delta_pull >= delta_push:
        raise ValueError("delta_pull must be smaller than delta_push")
    same = np.flatnonzero(gas.classes == cls)
    if len(same) == 0:
        raise ValueError(f"no vertex of class {cls}")
    zv = dc.value_of(z)
    v = same[np.argmin(np.sum((gas.centroids[same] - zv) ** 2, axis=1))]
    loss = dc.relu(dc.shift(_dist(z, gas.centroids[v]), -delta_pull))
    others = [j for j in gas.neighbours(v) if gas.classes[j] != cls]
    if others:
        push = dc.relu(dc.scale(dc.shift(_dist(z, gas.centroids[others]), -delta_push), -1.0))
        loss = dc.add(loss, dc.sum(push))
    return loss


# ---------------------------------------------------------------------------
# exemplar relation graph


@dataclass
class Erg:
    classes: list[int]
    vertex_ids: dict  # class -> selected sample ids, in selection order
    embeddings: dict  # class -> (k, d) teacher embeddings
    weights: dict  # class -> (k, k) angle between exemplar vectors
    inputs: dict = field(default_factory=dict)  # class -> (k, input_dim)

    def stacked(self):
        """All exemplars in class order: (embeddings, class of each row)."""
        emb = np.vstack([self.embeddings[c] for c in self.classes])
        owner = np.concatenate([[c] * len(self.embeddings[c]) for c in self.classes])
        return emb, owner

    def stacked_inputs(self) -> np.ndarray:
        return np.vstack([self.inputs[c] for c in self.classes])


def vector_angles(a: np.ndarray) -> np.ndarray:
    """Pairwise angles (radians) between rows."""
    u = a / np.linalg.norm(a, axis=1, keepdims=True)
    return np.arccos(np.clip(u @ u.T, -1.0, 1.0))


def representativeness(emb: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """In-degree of each point in the within-class 1-NN graph."""
    n = len(emb)
    score = np.zeros(n, dtype=np.int64)
    if n < 2:
        return score
    d = sq_distances(emb, emb)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(ids, kind="stable")
    for i in range(n):
        # nearest neighbour, ties to the lowest sample id
        row = d[i, order]
        score[order[np.argmin(row)]] += 1
    return score


def select_exemplars(emb: np.ndarray, ids, k: int) -> np.ndarray:
    """Row positions of the k most representative points, ties by lowest id."""
    ids = np.asarray(ids)
    if len(emb) <= k:
        return np.argsort(ids, kind="stable")
    score = representativeness(emb, ids)
    return np.array(sorted(range(len(ids)), key=lambda i: (-score[i], ids[i]))[:k])


def erg_build(per_class: dict, k: int = 5) -> Erg:
    """Build the graph from ``{class: (ids, embeddings[, inputs])}``."""
    erg = Erg(sorted(per_class), {}, {}, {}, {})
    for c in erg.classes:
        ids, emb, *rest = per_class[c]
        emb = np.asarray(emb, dtype=np.float64)
        if len(emb) == 0:
            raise ValueError(f"class {c} has no samples")
        sel = select_exemplars(emb, ids, k)
        erg.vertex_ids[c] = np.asarray(ids)[sel]
        erg.embeddings[c] = emb[sel]
        erg.weights[c] = vector_angles(emb[sel])
        if rest:
            erg.inputs[c] = np.asarray(rest[0])[sel]
    return erg


def erg_triplets(owner: np.ndarray, max_cross: int = 512, seed: int = 0) -> np.ndarray:
    """Ordered distinct triplets (a, b, c): all within-class ones plus a capped
    seeded sample of triplets that span more than one class."""
    n = len(owner)
    within, cross = [], []
    for t in itertools.permutations(range(n), 3):
        (within if owner[t[0]] == owner[t[1]] == owner[t[2]] else cross).append(t)
    if len(cross) > max_cross:
        keep = np.sort(np.random.default_rng(seed).choice(len(cross), size=max_cross, replace=False))
        cross = [cross[i] for i in keep]
    out = within + cross
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def triplet_angles(emb, triplets: np.ndarray):
    """Angle at vertex b of each triangle (a, b, c)."""
    a, b, c = triplets[:, 0], triplets[:, 1], triplets[:, 2]
    u = dc.l2_normalize(dc.sub(dc.take(emb, a), dc.take(emb, b)))
    v = dc.l2_normalize(dc.sub(dc.take(emb, c), dc.take(emb, b)))
    cos = dc.sum(dc.mul(u, v), axis=1)
    return dc.arccos(dc.clip(cos, -ANGLE_CLIP, ANGLE_CLIP))


def relation_loss(teacher_emb, student_emb, triplets: np.ndarray, delta: float = 1.0):
    """Mean Huber distance between teacher and student triplet angles."""
    if len(triplets) == 0:
        raise ValueError("relation loss needs at least one triplet")
    target = triplet_angles(np.asarray(dc.value_of(teacher_emb)), triplets)
    return dc.mean(dc.huber(dc.sub(triplet_angles(student_emb, triplets), target), delta))


def erg_relation_loss(erg: Erg, student, max_cross: int = 512, seed: int = 0):
    """Relation distillation against ``erg``.

    ``student`` is either encoder params (exemplar inputs are re-embedded)
    or a matrix of student embeddings aligned with :meth:`Erg.stacked`.
    """
    teacher, owner = erg.stacked()
    if len(teacher) < 3:
        raise ValueError("relation loss needs at least three exemplars")
    s_emb = embed(student, erg.stacked_inputs()) if isinstance(student, ModelParams) else student
    return relation_loss(teacher, s_emb, erg_triplets(owner, max_cross, seed))


# ---------------------------------------------------------------------------
# session loop


@dataclass(frozen=True)
class CilConfig:
    distill: str = "none"  # none | ng | erg
    mu: float = 1.0
    k_exemplars: int = 5
    session_epochs: int = 30
    session_lr: float = 1e-3
    ce_tau: float = 0.1
    delta_pull: float = 0.1
    delta_push: float = 0.5
    ng_vertices_per_class: int = 2
    ng_epochs: int = 5
    ng_insert_per_class: int = 5  # one vertex per shot at 5-shot
    max_cross_triplets: int = 512
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0

    def __post_init__(self):
        if self.distill not in ("none", "ng", "erg"):
            raise ValueError(f"unknown distillation {self.distill!r}")
        if self.mu < 0 or self.session_epochs < 0 or self.session_lr <= 0 or self.ce_tau <= 0:
            raise ValueError("mu and session_epochs must be >= 0; session_lr and ce_tau > 0")
        if min(self.k_exemplars, self.ng_vertices_per_class, self.ng_insert_per_class) < 1:
            raise ValueError("k_exemplars and vertex counts must be positive")


@dataclass
class CilState:
    params: ModelParams
    exemplars: dict  # class -> (n, input_dim) stored inputs
    exemplar_ids: dict
    means: dict  # class -> unit mean embedding
    session: int = 0
    gas: NeuralGas | None = None
    teacher: ModelParams | None = None

    @property
    def classes(self) -> list[int]:
        return sorted(self.means)


def class_means(params: ModelParams, exemplars: dict) -> dict:
    means = {}
    for c, x in exemplars.items():
        mu = embed(params, x).mean(axis=0)
        means[c] = mu / np.linalg.norm(mu)
    return means


def classify_ncm(state: CilState, x) -> np.ndarray | int:
    """Nearest class mean by cosine distance; ties go to the lowest class id."""
    if not state.means:
        raise ValueError("no classes enrolled")
    classes = state.classes
    means = np.array([state.means[c] for c in classes])
    x = np.asarray(x, dtype=np.float64)
    z = np.atleast_2d(embed(state.params, x))
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    pred = np.asarray(classes)[np.argmin(1.0 - z @ means.T, axis=1)]
    return int(pred[0]) if x.ndim == 1 else pred


def per_class_accuracy(state: CilState, test: dict) -> dict:
    out = {}
    for c in state.classes:
        x = np.stack([s.x for s in test[c]])
        out[c] = float(np.mean(classify_ncm(state, x) == c))
    return out


def _stack(samples: list[Sample]):
    return (
        np.stack([s.x for s in samples]),
        np.array([s.id for s in samples], dtype=np.int64),
        np.array([s.label for s in samples], dtype=np.int64),
    )


def cil_base(base: list[Sample], train: TrainConfig, params: ModelParams, config: CilConfig) -> CilState:
    """Base session: supervised + CSSL training, exemplar selection, neural gas."""
    x, ids, y = _stack(base)
    params, _, _ = fewshot_base(x, ids, y, train, params)
    emb = embed(params, x)
    exemplars, exemplar_ids = {}, {}
    for c in sorted(set(y.tolist())):
        rows = np.flatnonzero(y == c)
        sel = rows[select_exemplars(emb[rows], ids[rows], config.k_exemplars)]
        exemplars[c] = x[sel]
        exemplar_ids[c] = ids[sel]
    gas = None
    if config.distill == "ng":
        n_classes = len(exemplars)
        gas = ng_fit_base(
            emb, y, config.ng_vertices_per_class * n_classes, config.ng_epochs, seed=config.seed, inputs=x,
            exemplar_cap=config.k_exemplars,
        )
    return CilState(params, exemplars, exemplar_ids, class_means(params, exemplars), 0, gas)


def run_session(state: CilState, shots: list[Sample], config: CilConfig) -> tuple[CilState, dict]:
    """Learn the shots' classes, distilling from a frozen snapshot of ``state``."""
    if not shots:
        raise ValueError("empty session")
    x_new, id_new, y_new = _stack(shots)
    new_classes = sorted(set(y_new.tolist()))
    if set(new_classes) & set(state.classes):
        raise ValueError(f"classes {sorted(set(new_classes) & set(state.classes))} were already learned")
    teacher = state.params.copy()
    session = state.session + 1

    exemplars = dict(state.exemplars)
    exemplar_ids = dict(state.exemplar_ids)
    for c in new_classes:
        exemplars[c] = x_new[y_new == c]
        exemplar_ids[c] = id_new[y_new == c]
    classes = sorted(exemplars)
    xs = np.vstack([exemplars[c] for c in classes])
    ids = np.concatenate([exemplar_ids[c] for c in classes])
    owner = np.concatenate([[i] * len(exemplars[c]) for i, c in enumerate(classes)])
    targets = np.array([classes.index(c) for c in y_new])

    gas, erg, triplets = state.gas, None, None
    if config.distill == "ng":
        if gas is None:
            raise ValueError("ng distillation needs a neural gas from the base session")
        gas = ng_grow(
            gas, embed(teacher, x_new), y_new, config.ng_insert_per_class, config.ng_epochs,
            seed=config.seed + session, inputs=x_new, exemplar_cap=config.k_exemplars,
        )
    elif config.distill == "erg":
        t_emb = embed(teacher, np.vstack([state.exemplars[c] for c in state.classes]))
        per_class, row = {}, 0
        for c in state.classes:
            n = len(state.exemplars[c])
            per_class[c] = (state.exemplar_ids[c], t_emb[row : row + n], state.exemplars[c])
            row += n
        erg = erg_build(per_class, config.k_exemplars)
        triplets = erg_triplets(erg.stacked()[1], config.max_cross_triplets, config.seed + session)

    params = state.params
    opt = dc.OptimizerState("adam", config.session_lr)
    trainable = lambda n: n.startswith("enc.")
    for epoch in range(config.session_epochs):
        queries = augment_batch(x_new, id_new, config.augment, config.seed + 7919 * session, epoch, 0)
        trace = dc.Trace()
        p = params.bind(trace, trainable)
        proto_rows = []
        z_all = embed(p, xs)
        for i in range(len(classes)):
            proto_rows.append(dc.reshape(dc.mean(dc.take(z_all, np.flatnonzero(owner == i)), axis=0), (1, -1)))
        protos = dc.l2_normalize(dc.concatenate(proto_rows))
        logits = dc.scale(dc.matmul(embed(p, queries), dc.transpose(protos)), 1.0 / config.ce_tau)
        loss = cross_entropy(logits, targets)
        if config.distill == "ng":
            pen = ng_anchor_penalty(gas, gas.anchors, p)
            z_new = embed(p, x_new)
            for r, c in enumerate(y_new):
                pen = dc.add(pen, dc.scale(ng_minmax_penalty(gas, dc.take(z_new, r), int(c), config.delta_pull, config.delta_push), 1.0 / len(y_new)))
            loss = dc.add(loss, dc.scale(pen, config.mu))
        elif config.distill == "erg":
            s_emb = embed(p, erg.stacked_inputs())
            loss = dc.add(loss, dc.scale(relation_loss(erg.stacked()[0], s_emb, triplets), config.mu))
        grads = dc.gradient(trace, loss)
        new, opt = dc.optimizer_step(params.arrays(), grads, opt)
        params = params.updated({k: new[k] for k in grads})

    new_state = CilState(params, exemplars, exemplar_ids, class_means(params, exemplars), session, gas, teacher)
    return new_state, {"session": session, "classes": classes}


def run_protocol(base, sessions, test, train: TrainConfig, params: ModelParams, config: CilConfig):
    """Base session then every incremental session; returns the state and per-class accuracy rows."""
    state = cil_base(base, train, params, config)
    rows = [per_class_accuracy(state, test)]
    for shots in sessions:
        state, _ = run_session(state, shots, config)
        rows.append(per_class_accuracy(state, test))
    return state, rows


def base_forgetting(rows: list[dict], base_classes) -> float:
    """Mean over base classes of (best earlier accuracy - final accuracy), clipped at 0."""
    vals = []
    for c in base_classes:
        hist = [r[c] for r in rows]
        vals.append(max(0.0, max(hist[:-1]) - hist[-1]))
    return float(np.mean(vals))


def write_session_csv(path, rows: list[dict]) -> None:
    """Columns (session, class, accuracy) plus one ALL row per session."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["session", "class", "accuracy"])
        for s, row in enumerate(rows):
            for c in sorted(row):
                w.writerow([s, c, repr(row[c])])
            w.writerow([s, "ALL", repr(float(np.mean(list(row.values()))))])

"""Synthetic clusters, vector augmentations, dataset splits, CIL sessions, IDX files."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    id: int
    x: np.ndarray
    label: int | None = None


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    dim: int = 64
    per_class_count: int = 200
    cluster_std: float = 1.0
    centroid_scale: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.dim < 1 or self.per_class_count < 1:
            raise ValueError("dim and per_class_count must be positive")
        if self.cluster_std < 0 or self.centroid_scale <= 0:
            raise ValueError("cluster_std must be >= 0 and centroid_scale > 0")


@dataclass(frozen=True)
class AugmentSpec:
    jitter_std: float = 0.5
    mask_prob: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if self.jitter_std < 0 or not 0 <= self.mask_prob <= 1:
            raise ValueError("invalid jitter_std or mask_prob")


def gen_clusters(spec: SyntheticSpec) -> list[Sample]:
    """Gaussian blobs around uniform random centroids; ids run class-major."""
    rng = np.random.default_rng(spec.seed)
    centroids = rng.uniform(-spec.centroid_scale, spec.centroid_scale, size=(spec.num_classes, spec.dim))
    samples = []
    for c in range(spec.num_classes):
        noise = rng.normal(0.0, 1.0, size=(spec.per_class_count, spec.dim)) * spec.cluster_std
        for row in centroids[c] + noise:
            samples.append(Sample(len(samples), row, c))
    return samples


def augment_rng(seed: int, sample_id: int = 0, epoch: int = 0, view: int = 0) -> np.random.Generator:
    """Augmentation stream keyed by (seed, sample id, epoch, view)."""
    return np.random.default_rng([seed, sample_id, epoch, view])


def augment(x, spec: AugmentSpec, stream) -> np.ndarray:
    """Scale, then add Gaussian jitter, then zero coordinates at random.

    ``stream`` is a seed or a ``numpy.random.Generator``.
    """
    rng = stream if isinstance(stream, np.random.Generator) else np.random.default_rng(stream)
    x = np.asarray(x, dtype=np.float64)
    lo, hi = spec.scale_range
    out = x * rng.uniform(lo, hi)
    out = out + rng.normal(0.0, 1.0, size=x.shape) * spec.jitter_std
    keep = rng.random(size=x.shape) >= spec.mask_prob
    return out * keep


def augment_batch(x: np.ndarray, ids, spec: AugmentSpec, seed: int, epoch: int, view: int) -> np.ndarray:
    return np.stack([augment(row, spec, augment_rng(seed, int(i), epoch, view)) for row, i in zip(x, ids)])


class Pool:
    """A set of samples as arrays.

    ``labels`` is the training-visible label vector (``None`` for an
    unlabeled pool). Ground truth for unlabeled samples is only reachable
    through :meth:`eval_labels`.
    """

    def __init__(self, samples: list[Sample], labeled: bool, hidden: list[int | None] | None = None):
        self.ids = np.array([s.id for s in samples], dtype=np.int64)
        dim = len(samples[0].x) if samples else 0
        self.x = np.stack([s.x for s in samples]) if samples else np.zeros((0, dim))
        self._truth = list(hidden) if hidden is not None else [s.label for s in samples]
        self.labels = np.array([s.label for s in samples], dtype=np.int64) if labeled else None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def eval_labels(self) -> np.ndarray:
        """Ground-truth labels, for evaluation code only."""
        return np.array([-1 if v is None else v for v in self._truth], dtype=np.int64)

    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist())) if self.labeled else []


@dataclass
class DatasetSplit:
    labeled: Pool
    unlabeled: Pool
    known_classes: list[int]
    ncd_mode: bool = False
    num_novel: int = 0  # |C^u|, the only thing training may know about novel classes


def split(samples: list[Sample], labeled_fraction: float = 1.0, ncd_mode: bool = False, known_classes=None, seed: int = 0) -> DatasetSplit:
    """Partition samples into a labeled and an unlabeled pool.

    Plain mode keeps ``labeled_fraction`` of each class labeled (a seeded
    choice). NCD mode puts every sample of ``known_classes`` in the labeled
    pool and everything else, labels hidden, in the unlabeled pool.
    """
    if not 0.0 <= labeled_fraction <= 1.0:
        raise ValueError("labeled_fraction must lie in [0, 1]")
    all_classes = sorted({s.label for s in samples if s.label is not None})
    if ncd_mode:
        known = sorted(set(known_classes or []))
        if not known or set(known) >= set(all_classes) or not set(known) <= set(all_classes):
            raise ValueError("NCD mode needs known classes forming a strict, non-empty subset of all classes")
        lab = [s for s in samples if s.label in known]
        unl = [s for s in samples if s.label not in known]
        novel = sorted({s.label for s in unl})
        return DatasetSplit(
            Pool(lab, True),
            Pool([Sample(s.id, s.x, None) for s in unl], False, hidden=[s.label for s in unl]),
            known,
            ncd_mode=True,
            num_novel=len(novel),
        )
    rng = np.random.default_rng(seed)
    lab, unl = [], []
    for c in all_classes:
        members = [s for s in samples if s.label == c]
        n_lab = int(round(labeled_fraction * len(members)))
        chosen = set(rng.permutation(len(members))[:n_lab].tolist())
        for i, s in enumerate(members):
            (lab if i in chosen else unl).append(s)
    lab.sort(key=lambda s: s.id)
    unl.sort(key=lambda s: s.id)
    return DatasetSplit(
        Pool(lab, True),
        Pool([Sample(s.id, s.x, None) for s in unl], False, hidden=[s.label for s in unl]),
        all_classes,
    )


def holdout(samples: list[Sample], test_fraction: float, seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    """Stratified seeded train/test partition; both parts keep id order."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    test_ids: set[int] = set()
    for c in sorted({s.label for s in samples}, key=lambda v: (v is None, v)):
        members = [s.id for s in samples if s.label == c]
        n_test = int(round(test_fraction * len(members)))
        test_ids.update(members[i] for i in rng.permutation(len(members))[:n_test])
    train = [s for s in samples if s.id not in test_ids]
    test = [s for s in samples if s.id in test_ids]
    return train, test


def take_per_class(samples: list[Sample], k: int, seed: int = 0) -> list[Sample]:
    """A seeded choice of ``k`` samples per class (all of a class if it has fewer)."""
    rng = np.random.default_rng(seed)
    keep: set[int] = set()
    for c in sorted({s.label for s in samples}):
        members = [s.id for s in samples if s.label == c]
        keep.update(members[i] for i in rng.permutation(len(members))[:k])
    return [s for s in samples if s.id in keep]


@dataclass(frozen=True)
class CilProtocol:
    base_classes: tuple[int, ...]
    sessions: tuple[tuple[int, ...], ...]
    shots: int = 5
    test_per_class: int = 50
    base_train_per_class: int | None = None  # None: every non-test base sample

    @property
    def ways(self) -> int:
        return len(self.sessions[0]) if self.sessions else 0


@dataclass
class CilData:
    base: list[Sample]
    sessions: list[list[Sample]]
    test: dict[int, list[Sample]] = field(default_factory=dict)


def make_sessions(samples: list[Sample], protocol: CilProtocol, seed: int = 0) -> CilData:
    """Draw base data, k-shot session data and per-class test sets."""
    groups = [tuple(protocol.base_classes), *[tuple(s) for s in protocol.sessions]]
    seen: set[int] = set()
    for g in groups:
        if seen & set(g):
            raise ValueError("base and session class sets must be pairwise disjoint")
        seen |= set(g)
    by_class: dict[int, list[Sample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    rng = np.random.default_rng(seed)
    test: dict[int, list[Sample]] = {}
    base: list[Sample] = []
    sessions: list[list[Sample]] = []
    for gi, g in enumerate(groups):
        session_samples = []
        for c in g:
            members = sorted(by_class.get(c, []), key=lambda s: s.id)
            order = rng.permutation(len(members))
            n_test = protocol.test_per_class
            if gi == 0:
                n_train = len(members) - n_test if protocol.base_train_per_class is None else protocol.base_train_per_class
            else:
                n_train = protocol.shots
            if n_test < 1 or n_train < 1 or n_train + n_test > len(members):
                raise InsufficientSamplesError(
                    f"class {c} has {len(members)} samples; need {n_train} train + {n_test} test"
                )
            test[c] = [members[i] for i in sorted(order[:n_test])]
            session_samples += [members[i] for i in sorted(order[n_test : n_test + n_train])]
        if gi == 0:
            base = session_samples
        else:
            sessions.append(session_samples)
    return CilData(base, sessions, test)


# ---------------------------------------------------------------------------
# IDX files


def _read_exact(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise TruncatedFileError(f"{what}: expected {n} bytes at offset {offset}, file has {len(buf)}")
    return buf[offset : offset + n]


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, count, rows, cols = struct.unpack(">IIII", _read_exact(buf, 0, 16, "image header"))
    if magic != IMAGES_MAGIC:
        raise BadMagicError(f"{path}: image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")
    body = _read_exact(buf, 16, count * rows * cols, "image data")
    return np.frombuffer(body, dtype=np.uint8).reshape(count, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, count = struct.unpack(">II", _read_exact(buf, 0, 8, "label header"))
    if magic != LABELS_MAGIC:
        raise BadMagicError(f"{path}: label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")
    return np.frombuffer(_read_exact(buf, 8, count, "label data"), dtype=np.uint8)


def load_idx(images_path, labels_path) -> list[Sample]:
    """Flattened images scaled to [0, 1], paired with their labels."""
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise CountMismatchError(f"{len(pixels)} images but {len(labels)} labels")
    return [Sample(i, row.astype(np.float64) / 255.0, int(lab)) for i, (row, lab) in enumerate(zip(pixels, labels))]


def write_idx(images_path, labels_path, images: np.ndarray, labels) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, n) + np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# JSON export


def save_dataset(path, spec: SyntheticSpec | None, samples: list[Sample]) -> None:
    doc = {
        "spec": asdict(spec) if spec is not None else None,
        "samples": [{"id": s.id, "x": [float(v) for v in s.x], "label": s.label} for s in samples],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_dataset(path) -> tuple[SyntheticSpec | None, list[Sample]]:
    doc = json.loads(Path(path).read_text())
    spec = SyntheticSpec(**doc["spec"]) if doc.get("spec") else None
    samples = [Sample(int(s["id"]), np.array(s["x"], dtype=np.float64), s["label"]) for s in doc["samples"]]
    return spec, samples

import json

import numpy as np
import pytest

from exemplar_cssl import pipelines as P
from exemplar_cssl.contrastive import LossConfig
from exemplar_cssl.data import SyntheticSpec, gen_clusters, split
from exemplar_cssl.encoder import embed
from exemplar_cssl.evaluation import cluster_accuracy


def arrays(spec):
    samples = gen_clusters(spec)
    x = np.stack([s.x for s in samples])
    return x, np.array([s.id for s in samples]), np.array([s.label for s in samples])


SMALL = SyntheticSpec(num_classes=4, dim=8, per_class_count=12, seed=0)


def cfg(**kw):
    base = dict(epochs=2, batch_size=16, seed=0)
    base.update(kw)
    return P.TrainConfig(**base)


def test_pretrain_smoke_and_determinism():
    x, ids, _ = arrays(SMALL)
    p0 = P.new_encoder(8, 0, (16,), 4)
    a, hist_a = P.pretrain_cssl(x, ids, None, cfg(), p0)
    b, hist_b = P.pretrain_cssl(x, ids, None, cfg(), p0)
    assert len(hist_a) == 2 and np.isfinite(hist_a).all()
    assert hist_a == hist_b
    for k in a.tensors:
        assert a[k].tobytes() == b[k].tobytes()


def test_pretrain_loss_decreases_on_separated_clusters():
    x, ids, _ = arrays(SyntheticSpec(num_classes=8, dim=16, per_class_count=40, seed=0))
    _, hist = P.pretrain_cssl(x, ids, None, cfg(epochs=10, batch_size=64), P.new_encoder(16, 0, (32,), 8))
    assert hist[-1] < hist[0]


def test_linear_probe_freezes_encoder():
    x, _, y = arrays(SMALL)
    p0 = P.new_encoder(8, 0, (16,), 4)
    p1, classes, _ = P.finetune_supervised(p0, x, y, cfg(), mode="linear-probe")
    for k in p0.tensors:
        assert p0[k].tobytes() == p1[k].tobytes()
    assert len(P.predict_labeled(p1, classes, x[:1])) == 1
    from exemplar_cssl.encoder import classify

    assert classify(p1, "labeled", embed(p1, x[:1])).shape == (1, len(classes))


def test_linear_probe_fits_separable_embeddings():
    x, _, y = arrays(SyntheticSpec(num_classes=2, dim=4, per_class_count=30, centroid_scale=8, cluster_std=0.3, seed=1))
    p0 = P.new_encoder(4, 0, (), 4)
    p1, classes, _ = P.finetune_supervised(p0, x, y, cfg(epochs=150, batch_size=60, lr=5e-2), mode="linear-probe")
    assert (P.predict_labeled(p1, classes, x) == y).mean() == 1.0


def test_finetune_errors():
    x, _, y = arrays(SMALL)
    p0 = P.new_encoder(8, 0, (), 4)
    with pytest.raises(ValueError):
        P.finetune_supervised(p0, x, y, cfg(), classes=[0, 1])
    with pytest.raises(ValueError):
        P.finetune_supervised(p0, x, y, cfg(), mode="partial")


def test_fewshot_lambda_zero_matches_full_finetune():
    x, ids, y = arrays(SMALL)
    p0 = P.new_encoder(8, 3, (16,), 4)
    c = cfg(epochs=3, loss=LossConfig(lambda_self=0.0))
    _, _, h1 = P.fewshot_base(x, ids, y, c, p0)
    _, _, h2 = P.finetune_supervised(p0, x, y, c, mode="full")
    assert max(abs(a - b) for a, b in zip(h1, h2)) <= 1e-9


def test_fewshot_unsupervised_matches_pretrain():
    x, ids, _ = arrays(SMALL)
    p0 = P.new_encoder(8, 3, (16,), 4)
    _, _, h1 = P.fewshot_base(x, ids, None, cfg(), p0, supervised=False)
    _, h2 = P.pretrain_cssl(x, ids, None, cfg(), p0)
    assert max(abs(a - b) for a, b in zip(h1, h2)) <= 1e-9


def test_fewshot_smoke_with_partial_labels():
    x, ids, y = arrays(SMALL)
    y = np.where(np.arange(len(y)) % 3 == 0, y, -1)
    _, classes, hist = P.fewshot_base(x, ids, y, cfg(), P.new_encoder(8, 0, (), 4))
    assert classes == [0, 1, 2, 3] and np.isfinite(hist).all()


def test_contrastive_stage_needs_batches_of_two():
    x, ids, y = arrays(SMALL)
    with pytest.raises(ValueError):
        P.fewshot_base(x, ids, y, cfg(batch_size=1), P.new_encoder(8, 0, (), 4))


def test_non_finite_loss_aborts_with_location():
    x, _, y = arrays(SMALL)
    with pytest.raises(P.NonFiniteLossError) as info:
        P.finetune_supervised(P.new_encoder(8, 0, (16,), 4), x, y, cfg(optimizer="sgd", lr=1e300))
    assert (info.value.stage, info.value.epoch, info.value.batch) == ("train", 0, 1)


@pytest.fixture(scope="module")
def ncl_run():
    samples = gen_clusters(SyntheticSpec(num_classes=6, dim=16, per_class_count=40, seed=0))
    sp = split(samples, ncd_mode=True, known_classes=[0, 1, 2, 3])
    c = cfg(epochs=3, batch_size=64, loss=LossConfig(rho=0.5))
    return sp, P.ncl_pipeline(sp, c, P.new_encoder(16, 0, (32,), 8))


def test_ncl_stage_boundaries(ncl_run):
    _, res = ncl_run
    s = res.snapshots
    changed = lambda a, b, prefix: any(
        not np.array_equal(a[k], b[k]) for k in a.tensors if k.startswith(prefix)
    )
    for a, b in (("init", "stage1"), ("stage1", "stage2"), ("stage2", "stage3")):
        assert changed(s[a], s[b], "enc.")
    assert changed(s["init"], s["stage1"], "cls.labeled")
    assert not changed(s["stage1"], s["stage2"], "cls.labeled")
    assert not changed(s["stage2"], s["stage3"], "cls.labeled")
    assert changed(s["stage2"], s["stage3"], "cls.unlabeled")
    assert all(len(h) == 3 and np.isfinite(h).all() for h in res.history.values())


def test_ncl_clusters_novel_classes(ncl_run):
    sp, res = ncl_run
    acc = cluster_accuracy(res.cluster_ids(sp.unlabeled.x), sp.unlabeled.eval_labels())
    assert 0.5 <= acc <= 1.0


def test_ncl_is_deterministic(ncl_run):
    sp, res = ncl_run
    again = P.ncl_pipeline(sp, cfg(epochs=3, batch_size=64, loss=LossConfig(rho=0.5)), P.new_encoder(16, 0, (32,), 8))
    assert again.history == res.history


def test_ncl_needs_both_pools():
    samples = gen_clusters(SMALL)
    sp = split(samples, labeled_fraction=1.0)
    with pytest.raises(ValueError):
        P.ncl_pipeline(sp, cfg(), P.new_encoder(8, 0, (), 4), num_novel=2)


def test_checkpoint_round_trip(tmp_path):
    p = P.new_encoder(8, 5, (16,), 4)
    path = P.save_checkpoint(p, {"stage": "pretrain", "config": {"a": 1}}, tmp_path / "ck.json")
    back = P.load_checkpoint(path)
    assert back.manifest["config_hash"] == P.config_hash({"a": 1})
    for k in p.tensors:
        assert back.params[k].tobytes() == p[k].tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(P.CheckpointNotFoundError):
        P.load_checkpoint(tmp_path / "missing.json")
    path = P.save_checkpoint(P.new_encoder(4, 0, (), 2), {"config": {"a": 1}}, tmp_path / "ck.json")
    doc = json.loads(path.read_text())
    doc["manifest"]["config"]["a"] = 2
    path.write_text(json.dumps(doc))
    with pytest.raises(P.HashMismatchError):
        P.load_checkpoint(path)
    path.write_text("{not json")
    with pytest.raises(P.CorruptCheckpointError):
        P.load_checkpoint(path)


def test_train_config_dict_round_trip():
    c = cfg(loss=LossConfig(tau=0.3))
    assert P.train_config_from_dict(P.train_config_to_dict(c)) == c

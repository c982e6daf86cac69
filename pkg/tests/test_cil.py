import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exemplar_cssl import cil
from exemplar_cssl import diffcore as dc
from exemplar_cssl.data import CilProtocol, SyntheticSpec, gen_clusters, make_sessions
from exemplar_cssl.encoder import EncoderConfig, ModelParams, embed, init_params
from exemplar_cssl.pipelines import TrainConfig

from gradcases import CIL


def bare_gas(centroids, classes=None, eps_w=0.05, eps_n=0.005, max_age=50):
    c = np.array(centroids, dtype=np.float64)
    v = len(c)
    return cil.NeuralGas(
        c,
        np.array(classes if classes is not None else [-1] * v),
        np.zeros(v),
        np.full((v, v), -1, dtype=np.int64),
        eps_w,
        eps_n,
        max_age,
        exemplar_inputs=[None] * v,
        exemplar_embeddings=[None] * v,
    )


def two_clusters(seed, n=30, gap=10.0, d=2):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(0, 0.3, size=(n, d)), rng.normal(0, 0.3, size=(n, d)) + gap])
    return x, np.repeat([0, 1], n)


def check_edges(gas):
    e = gas.edges
    assert np.array_equal(e, e.T)
    assert not np.diag(e).any()


# neural gas


def test_single_sample_connects_two_nearest():
    gas = bare_gas([[0.0, 0.0], [1.0, 0.0]])
    gas.adapt(np.array([0.2, 0.0]))
    assert gas.edges[0, 1] == 1 == gas.edges[1, 0]


def test_zero_rates_freeze_centroids_but_update_edges():
    gas = bare_gas([[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]], eps_w=0.0, eps_n=0.0)
    before = gas.centroids.copy()
    rng = np.random.default_rng(0)
    for x in rng.normal(size=(20, 2)):
        gas.adapt(x)
    assert np.array_equal(gas.centroids, before)
    assert gas.edges.any()


def test_separated_clusters_have_no_cross_edges():
    x, y = two_clusters(0)
    gas = cil.ng_fit_base(x, y, 4, epochs=10, seed=0)
    check_edges(gas)
    for i, j in zip(*np.nonzero(gas.edges)):
        assert gas.classes[i] == gas.classes[j]


def test_too_many_vertices():
    with pytest.raises(ValueError):
        cil.ng_fit_base(np.zeros((2, 2)), [0, 1], 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 40))
def test_edges_stay_symmetric_without_self_loops(seed, v, max_age):
    rng = np.random.default_rng(seed)
    gas = bare_gas(rng.normal(size=(v, 3)), max_age=max_age)
    for x in rng.normal(size=(25, 3)):
        gas.adapt(x)
        check_edges(gas)


def grown(seed=0, per_class=2):
    x, y = two_clusters(seed)
    gas = cil.ng_fit_base(x, y, 4, epochs=5, seed=seed)
    rng = np.random.default_rng(seed + 1)
    novel = np.vstack([rng.normal(0, 0.3, size=(10, 2)) + [10.0, -10.0], rng.normal(0, 0.3, size=(10, 2)) + [-10.0, 10.0]])
    return gas, cil.ng_grow(gas, novel, np.repeat([5, 6], 10), per_class=per_class, epochs=5, seed=seed), novel


def test_growth_adds_vertices_and_records_anchors():
    gas, g, _ = grown()
    assert len(g) == len(gas) + 2 * 2
    assert set(g.anchors) == set(range(len(gas)))
    for v, a in g.anchors.items():
        assert np.array_equal(a, gas.centroids[v])


def test_new_vertices_win_novel_samples():
    gas, g, novel = grown()
    assert (g.winners(novel) >= len(gas)).all()


def test_growth_rejects_known_class():
    gas, _, _ = grown()
    with pytest.raises(ValueError):
        cil.ng_grow(gas, np.zeros((1, 2)), [0])


def test_anchor_penalty_examples():
    anchors = np.array([[1.0, 2.0]])
    assert cil.anchor_penalty(anchors, anchors) == 0.0
    shift = np.array([[3.0, 4.0]])
    assert cil.anchor_penalty(anchors + shift, anchors) == pytest.approx(25.0, abs=1e-12)


def test_ng_anchor_penalty_zero_for_unchanged_encoder():
    rng = np.random.default_rng(0)
    p = init_params(EncoderConfig(3, (), 3), 0)
    x = rng.normal(size=(12, 3))
    emb = embed(p, x)
    gas = cil.ng_fit_base(emb, np.repeat([0, 1], 6), 3, seed=0, inputs=x)
    g = cil.ng_grow(gas, emb[:2], [9, 9], per_class=1, seed=0)
    assert cil.ng_anchor_penalty(g, g.anchors, p) == 0.0


def test_ng_anchor_penalty_missing_anchor():
    gas, g, _ = grown()
    with pytest.raises(cil.MissingAnchorError):
        cil.ng_vertex_positions(gas, init_params(EncoderConfig(2, (), 2), 0), [0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_anchor_penalty_non_negative(seed):
    rng = np.random.default_rng(seed)
    assert cil.anchor_penalty(rng.normal(size=(4, 3)), rng.normal(size=(4, 3))) >= 0


def minmax_gas():
    gas = bare_gas([[0.0, 0.0], [1.0, 0.0]], classes=[0, 1])
    gas.ages[0, 1] = gas.ages[1, 0] = 0
    return gas


def test_minmax_zero_at_same_class_vertex():
    assert cil.ng_minmax_penalty(minmax_gas(), np.array([0.0, 0.0]), 0, 0.1, 0.5) == 0.0


def test_minmax_at_other_class_vertex_costs_delta_push():
    z = np.array([1.0, 0.0])
    # z sits on the class-1 neighbour: pull hinge gives 1 - 0.1, push hinge gives 0.5
    assert cil.ng_minmax_penalty(minmax_gas(), z, 0, 0.1, 0.5) == pytest.approx(0.9 + 0.5, abs=1e-9)


def test_minmax_decreases_toward_same_class_vertex():
    gas = minmax_gas()
    vals = [float(cil.ng_minmax_penalty(gas, np.array([t, 0.0]), 0, 0.1, 0.5)) for t in np.linspace(1.0, 0.0, 21)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert vals[0] > vals[-1]


def test_minmax_errors():
    with pytest.raises(ValueError):
        cil.ng_minmax_penalty(minmax_gas(), np.zeros(2), 7)
    with pytest.raises(ValueError):
        cil.ng_minmax_penalty(minmax_gas(), np.zeros(2), 0, 0.5, 0.1)


# exemplar relation graph


def test_small_class_keeps_everything():
    erg = cil.erg_build({0: ([4, 2, 9], np.random.default_rng(0).normal(size=(3, 2)))}, k=5)
    assert erg.vertex_ids[0].tolist() == [2, 4, 9]


def test_angles_identical_and_orthogonal():
    a = cil.vector_angles(np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0]]))
    assert abs(a[0, 1]) <= 1e-7
    assert a[0, 2] == pytest.approx(math.pi / 2, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_selection_matches_brute_force_in_degree(seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(20, 3))
    ids = rng.permutation(100)[:20]
    indeg = [0] * 20
    for i in range(20):
        best = None
        for j in range(20):
            if j != i:
                key = (sum((emb[i] - emb[j]) ** 2), ids[j])
                best = (key, j) if best is None or key < best[0] else best
        indeg[best[1]] += 1
    expected = sorted(range(20), key=lambda i: (-indeg[i], ids[i]))[:5]
    assert cil.select_exemplars(emb, ids, 5).tolist() == expected


def test_empty_class():
    with pytest.raises(ValueError):
        cil.erg_build({0: ([], np.zeros((0, 2)))})


def brute_relation(t, s, triplets, delta):
    def angle(e, a, b, c):
        u, v = e[a] - e[b], e[c] - e[b]
        cos = float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
        return math.acos(min(max(cos, -cil.ANGLE_CLIP), cil.ANGLE_CLIP))

    total = 0.0
    for a, b, c in triplets:
        r = abs(angle(s, a, b, c) - angle(t, a, b, c))
        total += 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)
    return total / len(triplets)


@pytest.mark.parametrize("seed", range(5))
def test_relation_loss_matches_triplet_loop(seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(6, 3))
    s = t + rng.normal(0, 0.5, size=t.shape)
    trip = cil.erg_triplets(np.repeat([0, 1], 3), max_cross=30, seed=seed)
    assert abs(cil.relation_loss(t, s, trip, 0.2) - brute_relation(t, s, trip, 0.2)) <= 1e-12


def test_triplets_include_all_within_class():
    trip = cil.erg_triplets(np.repeat([0, 1], 3), max_cross=0)
    assert len(trip) == 2 * 6


def test_relation_loss_needs_three_exemplars():
    erg = cil.erg_build({0: ([0, 1], np.eye(2))})
    with pytest.raises(ValueError):
        cil.erg_relation_loss(erg, np.eye(2))


def test_relation_loss_zero_for_teacher_encoder():
    p = init_params(EncoderConfig(4, (), 3), 0)
    x = np.random.default_rng(0).normal(size=(8, 4))
    emb = embed(p, x)
    erg = cil.erg_build({0: (np.arange(4), emb[:4], x[:4]), 1: (np.arange(4, 8), emb[4:], x[4:])}, k=3)
    assert cil.erg_relation_loss(erg, p) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-2, 1e2))
def test_relation_loss_scale_and_rotation_invariant(seed, s):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(5, 3))
    trip = cil.erg_triplets(np.array([0, 0, 1, 1, 1]), max_cross=20, seed=seed)
    assert cil.relation_loss(t, t, trip) == 0.0
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    assert cil.relation_loss(t, s * t, trip) <= 1e-9
    assert cil.relation_loss(t, t @ q, trip) <= 1e-9


@pytest.mark.parametrize("name", sorted(CIL))
def test_gradient_matches_finite_differences(name):
    worst = max(dc.check_gradient(*CIL[name](seed), eps=1e-4) for seed in range(20))
    assert worst <= 1e-4


# session loop


def identity_state(means_by_class):
    cfg = EncoderConfig(3, (), 3)
    p = ModelParams(cfg, {"enc.W0": np.eye(3), "enc.b0": np.zeros(3)})
    ex = {c: np.array([m]) for c, m in means_by_class.items()}
    return cil.CilState(p, ex, {c: np.array([c]) for c in ex}, cil.class_means(p, ex))


def test_single_class_always_wins():
    state = identity_state({4: [1.0, 0.0, 0.0]})
    assert (cil.classify_ncm(state, np.random.default_rng(0).normal(size=(10, 3))) == 4).all()


def test_ncm_pre_image_maps_to_class():
    state = identity_state({0: [1.0, 0.0, 0.0], 1: [0.0, 1.0, 0.0], 2: [0.0, 0.0, 1.0]})
    assert cil.classify_ncm(state, np.array([0.0, 2.0, 0.0])) == 1


def test_ncm_matches_distance_scan():
    rng = np.random.default_rng(0)
    state = identity_state({c: rng.normal(size=3) for c in range(6)})
    x = rng.normal(size=(50, 3))
    expected = []
    for row in x:
        z = row / np.linalg.norm(row)
        d = {c: 1.0 - float(z @ state.means[c]) for c in state.classes}
        expected.append(min(d, key=lambda c: (d[c], c)))
    assert cil.classify_ncm(state, x).tolist() == expected


def test_ncm_empty_state():
    state = identity_state({})
    with pytest.raises(ValueError):
        cil.classify_ncm(state, np.ones(3))


def test_config_validation():
    with pytest.raises(ValueError):
        cil.CilConfig(distill="lwf")
    with pytest.raises(ValueError):
        cil.CilConfig(mu=-1)
    with pytest.raises(ValueError):
        cil.CilConfig(k_exemplars=0)


@pytest.fixture(scope="module")
def tiny_protocol():
    samples = gen_clusters(SyntheticSpec(num_classes=6, dim=8, per_class_count=20, seed=0))
    proto = CilProtocol((0, 1, 2), ((3, 4), (5,)), shots=3, test_per_class=5)
    return make_sessions(samples, proto, seed=0)


@pytest.mark.parametrize("distill", ["none", "ng", "erg"])
def test_sessions_grow_classes_and_keep_exemplars(tiny_protocol, distill):
    data = tiny_protocol
    cfg = cil.CilConfig(distill=distill, session_epochs=2, k_exemplars=3, ng_insert_per_class=2, max_cross_triplets=50)
    params = init_params(EncoderConfig(8, (16,), 4), 0)
    state = cil.cil_base(data.base, TrainConfig(epochs=1, batch_size=32), params, cfg)
    assert state.classes == [0, 1, 2]
    for shots in data.sessions:
        before = {c: v.copy() for c, v in state.exemplars.items()}
        n_new = len({s.label for s in shots})
        state, info = cil.run_session(state, shots, cfg)
        assert len(state.classes) == len(before) + n_new
        for c, v in before.items():
            assert np.array_equal(state.exemplars[c], v)
    with pytest.raises(ValueError):
        cil.run_session(state, data.sessions[0], cfg)


def test_protocol_rows_and_forgetting(tiny_protocol, tmp_path):
    data = tiny_protocol
    cfg = cil.CilConfig(session_epochs=1, k_exemplars=3)
    state, rows = cil.run_protocol(
        data.base, data.sessions, data.test, TrainConfig(epochs=1, batch_size=32), init_params(EncoderConfig(8, (), 4), 0), cfg
    )
    assert [len(r) for r in rows] == [3, 5, 6]
    f = cil.base_forgetting(rows, [0, 1, 2])
    assert 0.0 <= f <= 1.0
    cil.write_session_csv(tmp_path / "s.csv", rows)
    assert (tmp_path / "s.csv").read_text().count("ALL") == 3


def test_base_forgetting_definition():
    rows = [{0: 0.9, 1: 0.5}, {0: 0.6, 1: 0.7}, {0: 0.8, 1: 0.7}]
    assert cil.base_forgetting(rows, [0, 1]) == pytest.approx(0.05, abs=1e-15)

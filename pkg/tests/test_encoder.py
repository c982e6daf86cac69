import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from exemplar_cssl import contrastive as C
from exemplar_cssl import diffcore as dc
from exemplar_cssl.encoder import (
    EncoderConfig,
    ModelParams,
    add_head,
    classify,
    embed,
    identity_head,
    init_params,
    predict_head,
)
from exemplar_cssl.support_set import SupportSet


def test_init_is_deterministic():
    cfg = EncoderConfig(6, (5, 4), 3)
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert a.tensors.keys() == b.tensors.keys()
    for k in a.tensors:
        assert a[k].tobytes() == b[k].tobytes()


def test_linear_encoder_has_one_matrix():
    p = init_params(EncoderConfig(5, (), 3), 0)
    enc = {k: v.shape for k, v in p.tensors.items() if k.startswith("enc.")}
    assert enc == {"enc.W0": (5, 3), "enc.b0": (3,)}


def test_biases_start_at_zero_and_he_bound():
    cfg = EncoderConfig(8, (16,), 4)
    p = init_params(cfg, 3)
    for k, v in p.tensors.items():
        if ".b" in k:
            assert not v.any()
    assert np.abs(p["enc.W0"]).max() <= math.sqrt(6 / 8)
    assert np.abs(p["enc.W1"]).max() <= math.sqrt(6 / 16)


def test_identity_linear_encoder():
    cfg = EncoderConfig(3, (), 3, normalize_output=False)
    p = ModelParams(cfg, {"enc.W0": np.eye(3), "enc.b0": np.zeros(3)})
    x = np.array([0.5, -2.0, 3.0])
    assert np.array_equal(embed(p, x), x)


def test_hand_built_hidden_layer():
    cfg = EncoderConfig(2, (2,), 2, normalize_output=False)
    W0 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b0 = np.array([0.0, -1.0])
    W1 = np.array([[1.0, 2.0], [3.0, -1.0]])
    b1 = np.array([0.5, 0.0])
    p = ModelParams(cfg, {"enc.W0": W0, "enc.b0": b0, "enc.W1": W1, "enc.b1": b1})
    x = np.array([1.0, 1.0])
    # hidden = relu([1+2, -1+0.5-1]) = [3, 0]; out = [3*1+0.5, 3*2] = [3.5, 6]
    assert np.array_equal(embed(p, x), [3.5, 6.0])


@settings(max_examples=100)
@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), st.integers(0, 2**32 - 1))
def test_embed_is_unit_norm(x, seed):
    p = init_params(EncoderConfig(6, (8,), 4), seed)
    try:
        z = embed(p, x)
    except dc.DegenerateNormError:
        return
    assert z.shape == (4,)
    assert abs(float(z @ z) - 1.0) <= 1e-12


def test_embed_rejects_wrong_dim():
    p = init_params(EncoderConfig(4, (), 2), 0)
    with pytest.raises(dc.ShapeError):
        embed(p, np.ones(5))


def test_identity_head_passes_through():
    p = identity_head(init_params(EncoderConfig(4, (), 3), 1))
    z = np.array([0.6, 0.0, 0.8])
    np.testing.assert_allclose(predict_head(p, z), z, atol=1e-15)


def test_head_output_is_unit():
    p = init_params(EncoderConfig(4, (), 5), 2)
    z = np.random.default_rng(0).normal(size=(7, 5))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    np.testing.assert_allclose(np.linalg.norm(predict_head(p, z), axis=1), 1.0, atol=1e-12)


def test_nnclr_gradient_reaches_head():
    rng = np.random.default_rng(0)
    p0 = init_params(EncoderConfig(6, (8,), 4), 0)
    x1, x2 = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    support = SupportSet(16).push(embed(p0, rng.normal(size=(10, 6))))
    tr = dc.Trace()
    p = p0.bind(tr)
    loss = C.nnclr_loss(embed(p, x1), predict_head(p, embed(p, x2)), support, 0.1)
    grads = dc.gradient(tr, loss)
    for name in ("head.W0", "head.W1", "head.b1"):
        assert np.abs(grads[name]).sum() > 0


def test_zero_classifier_gives_uniform():
    p = add_head(init_params(EncoderConfig(3, (), 4), 0), "labeled", 5)
    p = p.updated({"cls.labeled.W": np.zeros((4, 5))})
    logits = classify(p, "labeled", np.array([0.5, 0.5, 0.5, 0.5]))
    assert logits.shape == (5,) and not logits.any()
    assert C.cross_entropy(logits[None, :], [2]) == pytest.approx(math.log(5), abs=1e-12)


def test_unknown_head():
    p = init_params(EncoderConfig(3, (), 4), 0)
    with pytest.raises(KeyError):
        classify(p, "labeled", np.ones(4))
    with pytest.raises(KeyError):
        add_head(p, "other", 2)


def test_invalid_config():
    with pytest.raises(ValueError):
        EncoderConfig(0, (), 2)
    with pytest.raises(ValueError):
        EncoderConfig(3, (0,), 2)

"""MLP encoder, residual prediction head and linear classifier heads.

Parameters live in :class:`ModelParams` as a flat name -> tensor mapping so
they can be bound onto a :class:`~exemplar_cssl.diffcore.Trace` for training
(tensors become :class:`~exemplar_cssl.diffcore.Var` leaves) or used as plain
arrays for inference. Every forward function here accepts either.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

HEADS = ("labeled", "unlabeled")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (128,)
    embed_dim: int = 32
    normalize_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all encoder dimensions must be positive, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim)
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "embed_dim": self.embed_dim,
            "normalize_output": self.normalize_output,
        }


@dataclass
class ModelParams:
    config: EncoderConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: np.array(dc.value_of(v)) for k, v in self.tensors.items()})

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: dc.value_of(v) for k, v in self.tensors.items() if k.startswith(prefix)}

    def bind(self, trace: dc.Trace, trainable=lambda name: True) -> ModelParams:
        """Copy with tensors placed on ``trace``; ``trainable(name)`` picks param leaves."""
        bound = {}
        for k, v in self.tensors.items():
            bound[k] = trace.param(k, v) if trainable(k) else trace.const(v)
        return ModelParams(self.config, bound)

    def updated(self, new: dict[str, np.ndarray]) -> ModelParams:
        tensors = dict(self.tensors)
        tensors.update(new)
        return ModelParams(self.config, tensors)

    def head_classes(self, head: str) -> int:
        key = f"cls.{head}.W"
        if key not in self.tensors:
            raise KeyError(f"no classifier head {head!r}")
        return self.tensors[key].shape[1]

    def encoder_names(self) -> list[str]:
        return [k for k in self.tensors if k.startswith("enc.")]


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(config: EncoderConfig, seed: int, head_classes: dict[str, int] | None = None) -> ModelParams:
    """He-uniform weights, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for i, (fi, fo) in enumerate(config.layer_dims):
        tensors[f"enc.W{i}"] = _he_uniform(rng, fi, fo)
        tensors[f"enc.b{i}"] = np.zeros(fo)
    d = config.embed_dim
    tensors["head.W0"] = _he_uniform(rng, d, d)
    tensors["head.b0"] = np.zeros(d)
    tensors["head.W1"] = _he_uniform(rng, d, d)
    tensors["head.b1"] = np.zeros(d)
    params = ModelParams(config, tensors)
    for head, n in (head_classes or {}).items():
        params = add_head(params, head, n, seed=int(rng.integers(2**63)))
    return params


def add_head(params: ModelParams, head: str, num_classes: int, seed: int = 0) -> ModelParams:
    """Attach (or replace) a linear classifier head with ``num_classes`` outputs."""
    if head not in HEADS:
        raise KeyError(f"unknown head {head!r}; expected one of {HEADS}")
    if num_classes < 1:
        raise ValueError("a head needs at least one class")
    rng = np.random.default_rng(seed)
    d = params.config.embed_dim
    bound = np.sqrt(1.0 / d)
    return params.updated(
        {f"cls.{head}.W": rng.uniform(-bound, bound, size=(d, num_classes)), f"cls.{head}.b": np.zeros(num_classes)}
    )


def identity_head(params: ModelParams) -> ModelParams:
    """Zero the residual branch so the prediction head is the identity map."""
    d = params.config.embed_dim
    return params.updated({"head.W1": np.zeros((d, d)), "head.b1": np.zeros(d)})


def encode(params: ModelParams, x):
    """Forward pass without output normalisation."""
    cfg = params.config
    if dc.value_of(x).shape[-1] != cfg.input_dim:
        raise dc.ShapeError("embed", f"input of length {cfg.input_dim}", dc.value_of(x).shape)
    h = x
    n_layers = len(cfg.layer_dims)
    for i in range(n_layers):
        h = dc.add(dc.matmul(h, params[f"enc.W{i}"]), params[f"enc.b{i}"])
        if i < n_layers - 1:
            h = dc.relu(h)
    return h


def embed(params: ModelParams, x):
    """Embed one vector (d,) or a batch (n, d)."""
    h = encode(params, x)
    return dc.l2_normalize(h) if params.config.normalize_output else h


def predict_head(params: ModelParams, z):
    """g(z) = normalize(z + W1 relu(W0 z + b0) + b1)."""
    if dc.value_of(z).shape[-1] != params.config.embed_dim:
        raise dc.ShapeError("predict_head", f"embedding of length {params.config.embed_dim}", dc.value_of(z).shape)
    hidden = dc.relu(dc.add(dc.matmul(z, params["head.W0"]), params["head.b0"]))
    out = dc.add(z, dc.add(dc.matmul(hidden, params["head.W1"]), params["head.b1"]))
    return dc.l2_normalize(out)


def classify(params: ModelParams, head: str, z):
    """Logits of a linear classifier head."""
    if head not in HEADS:
        raise KeyError(f"unknown head {head!r}")
    params.head_classes(head)
    return dc.add(dc.matmul(z, params[f"cls.{head}.W"]), params[f"cls.{head}.b"])

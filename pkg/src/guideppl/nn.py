"""Small neural-network kit for guide and decoder networks.

Layers are descriptions; their weights live in the current parameter store
under ``"<prefix>/<part>"`` names and are created on first evaluation.  In
``"guide"`` mode weights are plain guide parameters; in ``"model"`` mode each
weight goes through :func:`~guideppl.runtime.model_param`, so a decoder is
learned as part of the guide optimization.

Every layer accepts a single input vector or a 2-D batch of row vectors.

>>> net = mlp(1, [(3, "sigmoid"), (2, None)], "guideNet")
>>> net.num_params
12
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .runtime import model_param, param
from .tensor import ShapeError, Tensor

__all__ = [
    "Layer",
    "Linear",
    "MLP",
    "GRU",
    "RNN",
    "ConstantParams",
    "Embedding",
    "mlp",
    "nn_eval",
    "gru_step",
    "ACTIVATIONS",
]

ACTIVATIONS: dict[str, Callable] = {
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "softplus": T.softplus,
}


def _weight_init(fan_in: int):
    std = 1.0 / np.sqrt(fan_in)
    return lambda dims, rng: std * rng.standard_normal(dims)


def _zero_init(dims, rng):
    return np.zeros(dims)


def _activate(x: Tensor, name: str | None) -> Tensor:
    if name is None:
        return x
    try:
        return ACTIVATIONS[name](x)
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


class Layer:
    """Base class: a name prefix and a list of ``(part, dims, init)`` parameters."""

    kind = "layer"

    def __init__(self, prefix: str):
        self.prefix = prefix

    def param_specs(self) -> list:
        raise NotImplementedError

    @property
    def num_params(self) -> int:
        return int(sum(np.prod(d, dtype=int) for _, d, _ in self.param_specs()))

    def _get(self, part: str, dims, init, mode: str) -> Tensor:
        name = f"{self.prefix}/{part}"
        if mode == "guide":
            return param(name, dims, init)
        if mode == "model":
            return model_param(name, dims, init)
        raise ValueError(f"mode must be 'guide' or 'model', got {mode!r}")

    def weights(self, mode: str) -> dict:
        return {part: self._get(part, dims, init, mode) for part, dims, init in self.param_specs()}

    def __call__(self, x, mode: str = "guide") -> Tensor:
        return self.forward(T.as_tensor(x), self.weights(mode))

    def forward(self, x: Tensor, w: dict) -> Tensor:
        raise NotImplementedError


def _check_in(x: Tensor, n_in: int, what: str) -> None:
    if x.ndim not in (1, 2) or x.shape[-1] != n_in:
        raise ShapeError(f"{what}: expected input width {n_in}, got shape {x.shape}")


class Linear(Layer):
    kind = "linear"

    def __init__(self, n_in: int, n_out: int, prefix: str, activation: str | None = None):
        super().__init__(prefix)
        self.n_in, self.n_out, self.activation = int(n_in), int(n_out), activation

    def param_specs(self):
        return [("W", (self.n_out, self.n_in), _weight_init(self.n_in)), ("b", (self.n_out,), _zero_init)]

    def forward(self, x, w):
        _check_in(x, self.n_in, self.prefix)
        return _activate(T.linear(x, w["W"], w["b"]), self.activation)


class MLP(Layer):
    """Stack of linear layers; ``layers`` is a list of ``(n_out, activation)``."""

    kind = "mlp"

    def __init__(self, n_in: int, layers: Sequence, prefix: str):
        super().__init__(prefix)
        self.n_in = int(n_in)
        self.layers = []
        width = self.n_in
        for k, layer in enumerate(layers):
            n_out, act = (layer, None) if isinstance(layer, int) else layer
            self.layers.append(Linear(width, n_out, f"{prefix}/{k}", act))
            width = int(n_out)
        if not self.layers:
            raise ValueError("an mlp needs at least one layer")
        self.n_out = width
        sizes = [self.n_in] + [l.n_out for l in self.layers]
        expected = sum(sizes[i + 1] * (sizes[i] + 1) for i in range(len(sizes) - 1))
        assert self.num_params == expected, "mlp parameter count mismatch"

    def param_specs(self):
        out = []
        for k, layer in enumerate(self.layers):
            out.extend((f"{k}/{p}", d, i) for p, d, i in layer.param_specs())
        return out

    def forward(self, x, w):
        for k, layer in enumerate(self.layers):
            x = layer.forward(x, {"W": w[f"{k}/W"], "b": w[f"{k}/b"]})
        return x


def mlp(n_in: int, layers: Sequence, prefix: str) -> MLP:
    """Shorthand mirroring ``nn.mlp(nIn, [{nOut, activation}, ...], name)``.

    ``layers`` items may be ``(n_out, activation)`` pairs, bare widths, or
    dicts with ``nOut`` / ``activation`` keys.
    """
    parsed = []
    for layer in layers:
        if isinstance(layer, dict):
            parsed.append((layer["nOut"], layer.get("activation")))
        else:
            parsed.append(layer)
    return MLP(n_in, parsed, prefix)


class GRU(Layer):
    """Gated recurrent unit cell with input width ``n_in`` and hidden width ``n_hidden``."""

    kind = "gru"

    def __init__(self, n_hidden: int, n_in: int, prefix: str):
        super().__init__(prefix)
        self.n_hidden, self.n_in = int(n_hidden), int(n_in)

    def param_specs(self):
        cat = self.n_in + self.n_hidden
        init = _weight_init(cat)
        out = []
        for g in ("z", "r", "h"):
            out.append((f"W{g}", (self.n_hidden, cat), init))
            out.append((f"b{g}", (self.n_hidden,), _zero_init))
        return out

    def initial_state(self, batch: int | None = None) -> Tensor:
        return Tensor(np.zeros(self.n_hidden if batch is None else (batch, self.n_hidden)))

    def step(self, h, x, w) -> Tensor:
        h = T.as_tensor(h)
        x = T.as_tensor(x)
        _check_in(x, self.n_in, self.prefix)
        if h.shape[-1] != self.n_hidden or h.ndim != x.ndim:
            raise ShapeError(f"{self.prefix}: hidden state shape {h.shape} does not match")
        xh = T.concat([x, h])
        z = T.sigmoid(T.linear(xh, w["Wz"], w["bz"]))
        r = T.sigmoid(T.linear(xh, w["Wr"], w["br"]))
        cand = T.tanh(T.linear(T.concat([x, r * h]), w["Wh"], w["bh"]))
        return (1.0 - z) * h + z * cand

    def __call__(self, h, x=None, mode: str = "guide") -> Tensor:
        return self.step(h, x, self.weights(mode))


class RNN(Layer):
    """Elman cell ``h' = tanh(W [x; h] + b)``."""

    kind = "rnn"

    def __init__(self, n_hidden: int, n_in: int, prefix: str):
        super().__init__(prefix)
        self.n_hidden, self.n_in = int(n_hidden), int(n_in)

    def param_specs(self):
        cat = self.n_in + self.n_hidden
        return [("W", (self.n_hidden, cat), _weight_init(cat)), ("b", (self.n_hidden,), _zero_init)]

    def initial_state(self, batch: int | None = None) -> Tensor:
        return Tensor(np.zeros(self.n_hidden if batch is None else (batch, self.n_hidden)))

    def step(self, h, x, w) -> Tensor:
        h = T.as_tensor(h)
        x = T.as_tensor(x)
        _check_in(x, self.n_in, self.prefix)
        if h.shape[-1] != self.n_hidden or h.ndim != x.ndim:
            raise ShapeError(f"{self.prefix}: hidden state shape {h.shape} does not match")
        return T.tanh(T.linear(T.concat([x, h]), w["W"], w["b"]))

    def __call__(self, h, x=None, mode: str = "guide") -> Tensor:
        return self.step(h, x, self.weights(mode))


class ConstantParams(Layer):
    """Ignores its input and returns a free parameter tensor of shape ``dims``."""

    kind = "constantParams"

    def __init__(self, dims, prefix: str):
        super().__init__(prefix)
        self.dims = tuple(int(d) for d in (dims if isinstance(dims, (tuple, list)) else (dims,)))

    def param_specs(self):
        return [("value", self.dims, None)]

    def __call__(self, x=None, mode: str = "guide") -> Tensor:
        return self.weights(mode)["value"]


class Embedding(Layer):
    """One-hot encoding of an integer index (or a batch of them) followed by a linear map.

    Float inputs of width ``vocab`` (e.g. count vectors) skip the one-hot step.
    """

    kind = "embedding"

    def __init__(self, vocab: int, n_out: int, prefix: str, activation: str | None = None):
        super().__init__(prefix)
        self.vocab, self.n_out, self.activation = int(vocab), int(n_out), activation

    def param_specs(self):
        return [("W", (self.n_out, self.vocab), _weight_init(self.vocab)), ("b", (self.n_out,), _zero_init)]

    def __call__(self, x, mode: str = "guide") -> Tensor:
        w = self.weights(mode)
        if isinstance(x, Tensor) or np.asarray(x).dtype.kind == "f":
            v = T.as_tensor(x)
        else:
            idx = np.asarray(x, dtype=np.intp)
            if np.any(idx < 0) or np.any(idx >= self.vocab):
                raise ShapeError(f"{self.prefix}: index outside [0, {self.vocab})")
            v = Tensor(np.eye(self.vocab)[idx])
        _check_in(v, self.vocab, self.prefix)
        return _activate(T.linear(v, w["W"], w["b"]), self.activation)


def nn_eval(layer: Layer, x, mode: str = "guide") -> Tensor:
    """Evaluate ``layer`` on ``x``; ``mode="model"`` learns the weights as model parameters."""
    return layer(x, mode=mode)


def gru_step(cell: GRU, h, x, mode: str = "guide") -> Tensor:
    """One GRU update of hidden state ``h`` with input ``x``."""
    return cell(h, x, mode=mode)

"""Binary image data and the VAE / sigmoid belief network programs."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..dists import DiagCovGaussian, MultivariateBernoulli, TensorGaussian
from ..nn import Linear, mlp
from ..runtime import map_data, observe, sample

__all__ = [
    "read_idx",
    "write_idx",
    "binarize",
    "load_images",
    "fallback_images",
    "vae_model",
    "sbn_model",
    "DATA_DIM",
    "VAE_HIDDEN",
    "VAE_LATENT",
    "SBN_LATENT",
]

DATA_DIM = 28 * 28
VAE_HIDDEN = 500
VAE_LATENT = 20
SBN_LATENT = 200

_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise ValueError(f"{path}: unknown IDX element type {code:#x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dt = np.dtype(_IDX_TYPES[code])
    body = raw[4 + 4 * ndim:]
    if len(body) != int(np.prod(dims)) * dt.itemsize:
        raise ValueError(f"{path}: size does not match header")
    return np.frombuffer(body, dtype=dt).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def binarize(images: np.ndarray) -> np.ndarray:
    """0/1 floats by thresholding at half the maximum intensity."""
    x = np.asarray(images, dtype=np.float64)
    top = x.max() if x.size else 1.0
    return (x > 0.5 * top).astype(np.float64)


def _flatten(x: np.ndarray) -> np.ndarray:
    x = x.reshape(len(x), -1)
    if x.shape[1] != DATA_DIM:
        raise ValueError(f"images must have {DATA_DIM} pixels, got {x.shape[1]}")
    return x


def fallback_images() -> np.ndarray:
    """The 5000-image MNIST subset bundled with mlxtend (raw intensities)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as e:
        raise FileNotFoundError("no image file given and mlxtend is not installed") from e
    x, _ = mnist_data()
    return np.asarray(x)


def load_images(path=None, limit: int | None = None) -> np.ndarray:
    """Binary (n, 784) image matrix from an IDX file, or the fallback subset."""
    x = read_idx(path) if path is not None else fallback_images()
    x = binarize(_flatten(np.asarray(x)))
    if limit is not None:
        x = x[:limit]
    return x


def vae_model(images, batch_size: int | None = 100):
    """Gaussian latent code (dimension 20) with an encoder guide and a learned decoder."""
    images = _flatten(np.asarray(images, dtype=np.float64))
    encode_net = mlp(DATA_DIM, [(VAE_HIDDEN, "tanh")], "encodeNet")
    mu_net = Linear(VAE_HIDDEN, VAE_LATENT, "muNet")
    sigma_net = Linear(VAE_HIDDEN, VAE_LATENT, "sigmaNet")
    decode_net = mlp(VAE_LATENT, [(VAE_HIDDEN, "tanh"), (DATA_DIM, "sigmoid")], "decodeNet")

    def encode(x):
        h = encode_net(x)
        return DiagCovGaussian(mu_net(h), T.softplus(sigma_net(h)))

    def model(images=images, batch_size=batch_size):
        def per_batch(x):
            latent = sample(TensorGaussian(0.0, 1.0, [VAE_LATENT]), guide=lambda: encode(x), name="latent")
            probs = decode_net(latent, mode="model")
            observe(MultivariateBernoulli(probs), x, name="image")
            return probs

        return map_data(images, per_batch, batch_size, vectorize=True, name="images")

    return model


def sbn_model(images, batch_size: int | None = 100):
    """200 binary latents with prior probability 0.5, encoder guide and learned decoder."""
    images = _flatten(np.asarray(images, dtype=np.float64))
    encode_net = mlp(DATA_DIM, [(SBN_LATENT, "sigmoid")], "encodeNet")
    decode_net = mlp(SBN_LATENT, [(DATA_DIM, "sigmoid")], "decodeNet")
    prior = np.full(SBN_LATENT, 0.5)

    def model(images=images, batch_size=batch_size):
        def per_batch(x):
            latent = sample(MultivariateBernoulli(prior), guide=lambda: MultivariateBernoulli(encode_net(x)),
                            name="latent")
            probs = decode_net(latent, mode="model")
            observe(MultivariateBernoulli(probs), x, name="image")
            return probs

        return map_data(images, per_batch, batch_size, vectorize=True, name="images")

    return model

"""Deterministic text featurizer and a linear embedding encoder.

The featurizer turns a string into a fixed-dimension signed hash of its
whitespace tokens and character trigrams; the encoder applies a linear map
(optionally perturbed by a low-rank adapter) and L2-normalizes the result
into a single unit vector. Analytic parameter gradients through the
normalization are provided for hand-rolled training loops.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimMismatchError, EmptyTextError, ShapeMismatchError, ZeroVectorError
from .matrixops import ZERO_NORM_EPS
from .validation import as_float_matrix, as_float_vector

_SIGN_BIT = 1 << 63


@dataclass(frozen=True)
class Featurizer:
    """Signed feature hashing of whitespace tokens and character trigrams.

    Same (text, seed) always hashes to the bitwise-identical vector; the
    hash is keyed BLAKE2b, so it is stable across processes and platforms.
    Trigrams are down-weighted so that token identity carries most of the
    mass and long strings do not drown short ones in shared substrings.
    """

    dim: int = 64
    seed: int = 0
    trigram_weight: float = 0.25

    def _key(self) -> bytes:
        return (self.seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")


def featurize(text: str, featurizer: Featurizer) -> np.ndarray:
    """Hash ``text`` into a float64 vector of featurizer.dim entries (unnormalized)."""
    if len(text) == 0:
        raise EmptyTextError("cannot featurize an empty string")
    key = featurizer._key()
    dim = featurizer.dim
    v = np.zeros(dim, dtype=np.float64)
    weighted = [(tok, 1.0) for tok in text.split()]
    weighted += [
        (text[i : i + 3], featurizer.trigram_weight) for i in range(len(text) - 2)
    ]
    for feat, weight in weighted:
        h = int.from_bytes(
            hashlib.blake2b(feat.encode("utf-8"), digest_size=8, key=key).digest(),
            "little",
        )
        v[h % dim] += weight if (h & _SIGN_BIT) == 0 else -weight
    return v


@dataclass
class LoraAdapter:
    """Low-rank factor pair; the effective weight delta is scaling * B @ A."""

    A: np.ndarray  # rank x d_in
    B: np.ndarray  # d_out x rank
    scaling: float = 1.0

    def __post_init__(self):
        self.A = as_float_matrix(self.A, "A")
        self.B = as_float_matrix(self.B, "B")
        if self.A.shape[0] != self.B.shape[1]:
            raise ShapeMismatchError(
                f"A has rank {self.A.shape[0]} but B expects {self.B.shape[1]}"
            )
        if self.rank < 1:
            raise ShapeMismatchError("adapter rank must be >= 1")

    @property
    def rank(self) -> int:
        return int(self.A.shape[0])

    @property
    def d_in(self) -> int:
        return int(self.A.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.B.shape[0])

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B @ self.A)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.A.copy(), self.B.copy(), self.scaling)


def init_adapter(d_in: int, d_out: int, rank: int, scaling: float, rng: np.random.Generator,
                 a_std: float = 0.02) -> LoraAdapter:
    """Fresh adapter: A small Gaussian, B zeros, so the initial delta is exactly 0."""
    a = rng.normal(0.0, a_std, size=(rank, d_in))
    b = np.zeros((d_out, rank))
    return LoraAdapter(a, b, scaling)


@dataclass
class EncoderParams:
    """Linear encoder weights with an optional low-rank adapter."""

    W: np.ndarray  # d_out x d_in
    b: np.ndarray  # d_out
    adapter: Optional[LoraAdapter] = None

    def __post_init__(self):
        self.W = as_float_matrix(self.W, "W")
        self.b = as_float_vector(self.b, "b")
        if self.b.shape[0] != self.W.shape[0]:
            raise ShapeMismatchError(
                f"b has {self.b.shape[0]} entries but W has {self.W.shape[0]} rows"
            )
        if self.adapter is not None:
            if (self.adapter.d_out, self.adapter.d_in) != self.W.shape:
                raise ShapeMismatchError(
                    f"adapter delta shape {(self.adapter.d_out, self.adapter.d_in)} "
                    f"!= W shape {self.W.shape}"
                )

    @property
    def d_in(self) -> int:
        return int(self.W.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.W.shape[0])

    def effective_weight(self) -> np.ndarray:
        if self.adapter is None:
            return self.W
        return self.W + self.adapter.delta()

    def copy(self) -> "EncoderParams":
        adapter = None if self.adapter is None else self.adapter.copy()
        return EncoderParams(self.W.copy(), self.b.copy(), adapter)


def init_encoder_params(d_in: int, d_out: int, rank: int, scaling: float,
                        rng: np.random.Generator) -> EncoderParams:
    w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in))
    b = np.zeros(d_out)
    adapter = init_adapter(d_in, d_out, rank, scaling, rng) if rank > 0 else None
    return EncoderParams(w, b, adapter)


@dataclass
class EncodeCache:
    """Forward-pass intermediates needed by encode_backward."""

    inputs: np.ndarray   # n x d_in
    outputs: np.ndarray  # n x d_out, unit rows
    norms: np.ndarray    # n


@dataclass
class EncoderGrads:
    W: np.ndarray
    b: np.ndarray
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None


def encode(x, params: EncoderParams) -> np.ndarray:
    """Map one feature vector to a unit-norm embedding."""
    out, _ = encode_batch(np.asarray(x, dtype=np.float64)[None, :], params)
    return out[0]


def encode_batch(inputs, params: EncoderParams):
    """Encode n feature vectors; returns (unit-row outputs, cache for backward)."""
    x = as_float_matrix(inputs, "inputs")
    if x.shape[1] != params.d_in:
        raise DimMismatchError(f"inputs have dim {x.shape[1]}, encoder expects {params.d_in}")
    y = x @ params.effective_weight().T + params.b
    norms = np.sqrt(np.einsum("ij,ij->i", y, y))
    if (norms < ZERO_NORM_EPS).any():
        i = int(np.argmax(norms < ZERO_NORM_EPS))
        raise ZeroVectorError(
            f"encoder output {i} has norm {norms[i]:.3g} before normalization"
        )
    u = y / norms[:, None]
    return u, EncodeCache(inputs=x, outputs=u, norms=norms)


def encode_backward(cache: EncodeCache, params: EncoderParams, upstream,
                    train_base: bool = True) -> EncoderGrads:
    """Backpropagate d(loss)/d(normalized outputs) to the encoder parameters.

    With ``train_base=False`` (adapter-only training) the W and b gradients
    are exactly zero; adapter gradients are returned whenever an adapter is
    present. Accumulation over the batch happens in one fixed-order matmul,
    so repeated calls are bit-identical.
    """
    g = as_float_matrix(upstream, "upstream")
    if g.shape != cache.outputs.shape:
        raise DimMismatchError(
            f"upstream shape {g.shape} != encoder output shape {cache.outputs.shape}"
        )
    u = cache.outputs
    # Through y / ||y||: dy = (g - (g . u) u) / ||y||.
    gy = (g - np.einsum("ij,ij->i", g, u)[:, None] * u) / cache.norms[:, None]
    grad_eff = gy.T @ cache.inputs

    if train_base:
        grad_w = grad_eff.copy()
        grad_b = gy.sum(axis=0)
    else:
        grad_w = np.zeros_like(params.W)
        grad_b = np.zeros_like(params.b)

    grad_a = grad_b_factor = None
    if params.adapter is not None:
        adapter = params.adapter
        grad_b_factor = adapter.scaling * (grad_eff @ adapter.A.T)
        grad_a = adapter.scaling * (adapter.B.T @ grad_eff)
    return EncoderGrads(W=grad_w, b=grad_b, A=grad_a, B=grad_b_factor)

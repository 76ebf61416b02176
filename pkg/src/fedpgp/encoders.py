"""Frozen toy dual encoder standing in for a pretrained vision-language model.

Text path:  g(tokens) = normalize(W2 @ tanh(W1 @ mean(tokens)))
Image path: f(x)      = normalize(V2 @ tanh(V1 @ x))

A prompt sequence for class ``k`` is the ``M`` context columns of a prompt
matrix followed by the class embedding ``w_k``. Because the text path mean-pools
its tokens, the batched helpers work directly on the pooled input rows.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, ShapeError, UnknownClassError
from .numkit import Rng, derive_seed


@dataclass(frozen=True)
class PromptSequence:
    tokens: np.ndarray  # (M + 1, d_token), context tokens then the class token

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class TextCache:
    """Intermediate values of a batched text forward pass."""

    hidden: np.ndarray  # tanh activations, (C, hidden)
    norms: np.ndarray  # (C, 1)
    z: np.ndarray  # unit representations, (C, d_feat)


def _sealed(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FrozenEncoders:
    d_token: int
    d_feat: int
    d_img: int
    hidden: int
    M: int
    K: int
    seed: int
    W1: np.ndarray = field(repr=False)
    W2: np.ndarray = field(repr=False)
    V1: np.ndarray = field(repr=False)
    V2: np.ndarray = field(repr=False)
    class_embeddings: np.ndarray = field(repr=False)  # (K, d_token)
    template_tokens: np.ndarray = field(repr=False)  # (M, d_token)

    @classmethod
    def generate(
        cls,
        seed: int,
        *,
        K: int,
        M: int = 16,
        d_token: int = 32,
        d_feat: int = 32,
        d_img: int = 16,
        hidden: int = 48,
        class_std: float = 8.0,
        template_std: float = 2.0,
    ) -> "FrozenEncoders":
        """Draw all frozen weights from ``seed``.

        Weight matrices use std ``1/sqrt(fan_in)``. Class and template token
        scales are chosen so the pooled text input lands in tanh's curved
        region rather than its linear one.
        """
        for name, v in (("K", K), ("M", M), ("d_token", d_token), ("d_feat", d_feat),
                        ("d_img", d_img), ("hidden", hidden)):
            if v < 1:
                raise InvalidParameterError(f"{name} must be >= 1, got {v}")

        def draw(tag: str, shape, std: float) -> np.ndarray:
            return _sealed(Rng(derive_seed(seed, "encoders", tag)).normal_array(shape, std))

        return cls(
            d_token=d_token, d_feat=d_feat, d_img=d_img, hidden=hidden, M=M, K=K, seed=seed,
            W1=draw("W1", (hidden, d_token), d_token ** -0.5),
            W2=draw("W2", (d_feat, hidden), hidden ** -0.5),
            V1=draw("V1", (hidden, d_img), d_img ** -0.5),
            V2=draw("V2", (d_feat, hidden), hidden ** -0.5),
            class_embeddings=draw("classes", (K, d_token), class_std),
            template_tokens=draw("template", (M, d_token), template_std),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.W1, self.W2, self.V1, self.V2, self.class_embeddings, self.template_tokens):
            h.update(a.tobytes())
        return h.hexdigest()

    def check_class(self, class_id: int) -> int:
        if not (isinstance(class_id, (int, np.integer)) and 0 <= class_id < self.K):
            raise UnknownClassError(f"unknown class {class_id!r} (K={self.K})")
        return int(class_id)

    def check_prompt(self, prompt: np.ndarray) -> np.ndarray:
        prompt = np.asarray(prompt, dtype=np.float64)
        if prompt.shape != (self.d_token, self.M):
            raise ShapeError(f"prompt has shape {prompt.shape}, expected {(self.d_token, self.M)}")
        return prompt

    # ------------------------------------------------------------------
    # batched text path over pooled rows

    def pooled_inputs(self, context_sum: np.ndarray, class_ids) -> np.ndarray:
        """Mean-pooled token rows for each class given the sum of context tokens."""
        ids = np.asarray(class_ids, dtype=np.intp)
        return (context_sum[None, :] + self.class_embeddings[ids]) / (self.M + 1)

    def text_forward(self, pooled: np.ndarray) -> TextCache:
        h = np.tanh(pooled @ self.W1.T)
        y = h @ self.W2.T
        n = np.sqrt(np.sum(y * y, axis=1, keepdims=True))
        return TextCache(hidden=h, norms=n, z=y / n)

    def text_backward(self, cache: TextCache, dz: np.ndarray) -> np.ndarray:
        """Gradient with respect to the pooled input rows."""
        z = cache.z
        dy = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / cache.norms
        dh = dy @ self.W2
        da = dh * (1.0 - cache.hidden * cache.hidden)
        return da @ self.W1

    def encode_prompt(self, prompt: np.ndarray, class_ids) -> tuple[np.ndarray, TextCache]:
        """Text features of ``prompt`` paired with each class; rows follow ``class_ids``."""
        prompt = self.check_prompt(prompt)
        cache = self.text_forward(self.pooled_inputs(prompt.sum(axis=1), class_ids))
        return cache.z, cache

    def prompt_grad(self, cache: TextCache, dz: np.ndarray) -> np.ndarray:
        """Gradient of a loss w.r.t. the prompt matrix, given ``dL/dz`` rows.

        Every context column enters the pool with weight ``1/(M+1)``, so all
        columns receive the same gradient.
        """
        dpool = self.text_backward(cache, dz)
        col = dpool.sum(axis=0) / (self.M + 1)
        return np.repeat(col[:, None], self.M, axis=1)

    # ------------------------------------------------------------------
    # image path

    def image_forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Batched image path on rows of ``x``; returns (z, hidden, norms)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d_img:
            raise ShapeError(f"image features have width {x.shape[1]}, expected {self.d_img}")
        h = np.tanh(x @ self.V1.T)
        y = h @ self.V2.T
        n = np.sqrt(np.sum(y * y, axis=1, keepdims=True))
        return y / n, h, n

    def encode_images(self, x: np.ndarray) -> np.ndarray:
        return self.image_forward(x)[0]

    def image_backward(self, z: np.ndarray, h: np.ndarray, n: np.ndarray, dz: np.ndarray) -> np.ndarray:
        dy = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / n
        da = (dy @ self.V2) * (1.0 - h * h)
        return da @ self.V1

    # ------------------------------------------------------------------
    # handcrafted template

    def handcrafted_features(self, class_ids=None, mode: str = "per_class") -> np.ndarray:
        """Template-prompt features z_C, one row per class.

        ``mode="class_mean"`` replaces every row by the normalized mean of the
        per-class rows over all ``K`` classes, a class-agnostic anchor.
        """
        ids = np.arange(self.K) if class_ids is None else np.asarray(class_ids, dtype=np.intp)
        if mode == "per_class":
            return self.text_forward(self.pooled_inputs(self.template_tokens.sum(axis=0), ids)).z
        if mode == "class_mean":
            allz = self.text_forward(self.pooled_inputs(self.template_tokens.sum(axis=0), np.arange(self.K))).z
            m = allz.mean(axis=0)
            m = m / np.sqrt(np.dot(m, m))
            return np.repeat(m[None, :], len(ids), axis=0)
        raise InvalidParameterError(f"unknown handcrafted mode {mode!r}")

    def template_prompt(self) -> np.ndarray:
        """The template tokens laid out as a (d_token, M) prompt matrix."""
        return np.array(self.template_tokens.T, order="C")


# ----------------------------------------------------------------------
# single-sequence API


def build_prompt_sequence(prompt: np.ndarray, class_id: int, enc: FrozenEncoders) -> PromptSequence:
    prompt = enc.check_prompt(prompt)
    k = enc.check_class(class_id)
    tokens = np.vstack([prompt.T, enc.class_embeddings[k][None, :]])
    return PromptSequence(tokens=tokens)


def _check_sequence(seq: PromptSequence, enc: FrozenEncoders) -> np.ndarray:
    t = np.asarray(seq.tokens, dtype=np.float64)
    if t.shape != (enc.M + 1, enc.d_token):
        raise ShapeError(f"sequence has shape {t.shape}, expected {(enc.M + 1, enc.d_token)}")
    return t


def encode_text(seq: PromptSequence, enc: FrozenEncoders) -> np.ndarray:
    t = _check_sequence(seq, enc)
    return enc.text_forward(t.mean(axis=0)[None, :]).z[0]


def encode_image(x, enc: FrozenEncoders) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (enc.d_img,):
        raise ShapeError(f"image vector has shape {x.shape}, expected {(enc.d_img,)}")
    return enc.encode_images(x[None, :])[0]


def handcrafted_representation(class_id: int, enc: FrozenEncoders, mode: str = "per_class") -> np.ndarray:
    k = enc.check_class(class_id)
    return enc.handcrafted_features([k], mode=mode)[0]


def text_grad(seq: PromptSequence, upstream, enc: FrozenEncoders) -> np.ndarray:
    """Gradient w.r.t. the M context tokens, shape (M, d_token).

    The class-token gradient is computed along the way but dropped.
    """
    t = _check_sequence(seq, enc)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (enc.d_feat,):
        raise ShapeError(f"upstream has shape {upstream.shape}, expected {(enc.d_feat,)}")
    cache = enc.text_forward(t.mean(axis=0)[None, :])
    dpool = enc.text_backward(cache, upstream[None, :])[0]
    token_grads = np.repeat((dpool / t.shape[0])[None, :], t.shape[0], axis=0)
    return token_grads[:-1]

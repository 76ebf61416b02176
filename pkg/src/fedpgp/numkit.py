"""Numerical helpers: stable softmax/cosine, a named PRNG, and a gradient oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The PRNG is PCG32 (XSH-RR output) seeded through SplitMix64, so draw
sequences are reproducible independently of numpy's generator internals.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateVectorError, InvalidParameterError, NumericalFailureError, ShapeError

_MASK64 = (1 << 64) - 1
_MASK32 = (1 << 32) - 1
_PCG_MULT = 6364136223846793005
_TWO_PI = 2.0 * math.pi


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalFailureError(f"non-finite entries in {what}")
    return x


# --------------------------------------------------------------------------
# reductions


def softmax(logits, tau: float = 1.0) -> np.ndarray:
    """Softmax of ``logits / tau`` along the last axis, shifted by the max."""
    if not tau > 0:
        raise InvalidParameterError(f"tau must be positive, got {tau!r}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise InvalidParameterError(f"tau must be positive, got {tau!r}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.dot(a.ravel(), a.ravel())))


def normalize(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = norm(a)
    if n == 0.0 or not math.isfinite(n):
        raise DegenerateVectorError("cannot normalize a zero-norm vector")
    return a / n


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim shapes differ: {a.shape} vs {b.shape}")
    na, nb = norm(a), norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb)))


def cosine_sim_grad(a, b) -> tuple[float, np.ndarray, np.ndarray]:
    """Cosine similarity and its gradients with respect to ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = norm(a), norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    ua, ub = a / na, b / nb
    s = float(np.dot(ua, ub))
    return s, (ub - s * ua) / na, (ua - s * ub) / nb


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, entry by entry."""
    if not h > 0:
        raise InvalidParameterError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Worst-case relative error, normalised by the larger gradient scale."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)), floor)
    return float(np.max(np.abs(a - n), initial=0.0)) / scale


# --------------------------------------------------------------------------
# PRNG


class SplitMix64:
    def __init__(self, seed: int) -> None:
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


def _key_to_int(key) -> int:
    if isinstance(key, bool):
        key = int(key)
    if isinstance(key, int):
        return key & _MASK64
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed: int, *keys) -> int:
    """Mix ``seed`` with a path of ints/strings into a new 64-bit seed."""
    h = seed & _MASK64
    for k in keys:
        h = SplitMix64(h ^ _key_to_int(k)).next()
    return h


class Rng:
    """PCG32 stream seeded via SplitMix64; Gaussians via Box-Muller."""

    def __init__(self, seed: int = 0) -> None:
        sm = SplitMix64(seed)
        initstate = sm.next()
        initseq = sm.next()
        self.seed = seed
        self._inc = ((initseq << 1) | 1) & _MASK64
        self._state = 0
        self._step()
        self._state = (self._state + initstate) & _MASK64
        self._step()
        self._spare: float | None = None

    @classmethod
    def derive(cls, seed: int, *keys) -> "Rng":
        return cls(derive_seed(seed, *keys))

    def _step(self) -> None:
        self._state = (self._state * _PCG_MULT + self._inc) & _MASK64

    def next_u32(self) -> int:
        old = self._state
        self._step()
        xorshifted = (((old >> 18) ^ old) >> 27) & _MASK32
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & _MASK32

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        a = self.next_u32() >> 5
        b = self.next_u32() >> 6
        return (a * 67108864.0 + b) / 9007199254740992.0

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise InvalidParameterError("randbelow bound must be positive")
        if n > _MASK32 + 1:
            raise InvalidParameterError("randbelow bound exceeds 2**32")
        threshold = ((1 << 32) - n) % n
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % n

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()  # (0, 1]
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(_TWO_PI * u2)
        return r * math.cos(_TWO_PI * u2)

    def normal_array(self, shape, std: float = 1.0) -> np.ndarray:
        """Gaussian array filled in row-major order."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        out = np.fromiter((self.normal() for _ in range(size)), dtype=np.float64, count=size)
        return (out * std).reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        out = list(range(n))
        self.shuffle(out)
        return out

    def sample(self, n: int, k: int) -> list[int]:
        """``k`` distinct indices from ``range(n)`` (partial Fisher-Yates)."""
        if not 0 <= k <= n:
            raise InvalidParameterError(f"cannot sample {k} of {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def gamma(self, shape: float) -> float:
        """Marsaglia-Tsang sampler with unit scale."""
        if not shape > 0:
            raise InvalidParameterError("gamma shape must be positive")
        if shape < 1.0:
            u = 1.0 - self.uniform()
            return self.gamma(shape + 1.0) * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = 1.0 - self.uniform()
            if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
                return d * v

    def dirichlet(self, alpha: Sequence[float]) -> np.ndarray:
        g = np.array([self.gamma(a) for a in alpha], dtype=np.float64)
        total = float(np.sum(g))
        if total <= 0.0:
            # every gamma draw underflowed; fall back to a single random vertex
            g = np.zeros(len(alpha))
            g[self.randbelow(len(alpha))] = 1.0
            total = 1.0
        return g / total

    def categorical(self, probs: Sequence[float]) -> int:
        u = self.uniform()
        acc = 0.0
        last = 0
        for i, p in enumerate(probs):
            if p <= 0.0:
                continue
            acc += p
            last = i
            if u < acc:
                return i
        return last  # rounding left u just above the cumulative sum

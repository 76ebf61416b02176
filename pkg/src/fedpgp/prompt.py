"""Learnable prompt state: global prompt, per-client adapters, SGD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, NumericalFailureError, ShapeError
from .numkit import Rng


@dataclass
class LowRankAdapter:
    U: np.ndarray  # (d_token, b)
    V: np.ndarray  # (b, M)

    @property
    def b(self) -> int:
        return self.U.shape[1]

    def delta(self) -> np.ndarray:
        return self.U @ self.V

    def params(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "V": self.V}

    def copy(self) -> "LowRankAdapter":
        return LowRankAdapter(self.U.copy(), self.V.copy())


@dataclass
class FullRankAdapter:
    """Unconstrained additive term, used by the full-rank ablation."""

    D: np.ndarray  # (d_token, M)

    def delta(self) -> np.ndarray:
        return self.D

    def params(self) -> dict[str, np.ndarray]:
        return {"D": self.D}

    def copy(self) -> "FullRankAdapter":
        return FullRankAdapter(self.D.copy())


def init_global(rng: Rng, d_token: int, M: int, scale: float = 0.02) -> np.ndarray:
    if not scale > 0:
        raise InvalidParameterError(f"prompt init scale must be positive, got {scale!r}")
    return rng.normal_array((d_token, M), scale)


def init_adapter(rng: Rng, d_token: int, M: int, b: int) -> LowRankAdapter:
    """U ~ N(0, 1/b), V = 0, so the adapter starts as an exact no-op."""
    if not (isinstance(b, (int, np.integer)) and 1 <= b <= min(d_token, M)):
        raise InvalidParameterError(f"bottleneck b={b!r} outside [1, {min(d_token, M)}]")
    return LowRankAdapter(U=rng.normal_array((d_token, b), b ** -0.5), V=np.zeros((b, M)))


def init_full_rank(d_token: int, M: int) -> FullRankAdapter:
    return FullRankAdapter(D=np.zeros((d_token, M)))


def compose(p_G: np.ndarray, adapter) -> np.ndarray:
    """Personalized prompt ``p_G + delta``; a ``None`` adapter returns a copy of ``p_G``."""
    if adapter is None:
        return p_G.copy()
    delta = adapter.delta()
    if delta.shape != p_G.shape:
        raise ShapeError(f"adapter delta {delta.shape} does not match prompt {p_G.shape}")
    return p_G + delta


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], eta: float) -> dict[str, np.ndarray]:
    """Plain SGD (no momentum, no weight decay). Returns new arrays."""
    if not eta >= 0:
        raise InvalidParameterError(f"learning rate must be non-negative, got {eta!r}")
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalFailureError(f"non-finite gradient for {name}")
        out[name] = p - eta * g
    return out


def numerical_rank(m: np.ndarray, rel_tol: float = 1e-9) -> int:
    s = np.linalg.svd(m, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))

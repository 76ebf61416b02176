"""Classification and prompt-wise contrastive losses with analytic gradients.

All text features are unit vectors, so cosine similarity between them is a
plain dot product; gradients with respect to the features are pushed back
through the encoder's normalization, which removes the radial component.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import FrozenEncoders, build_prompt_sequence, encode_image, encode_text
from .errors import InvalidParameterError, NumericalFailureError, UnknownClassError
from .numkit import cosine_sim_grad, log_softmax, softmax
from .prompt import FullRankAdapter, LowRankAdapter, compose

EXTRA_LOSSES = ("contrastive", "no_positive", "no_negative", "none")


@dataclass(frozen=True)
class LossConfig:
    mu: float = 1.0
    tau_cls: float = 0.05
    tau_con: float = 1.0
    extra: str = "contrastive"
    # +1 uses L_pos = sim(z_G, z_C) as written; -1 negates it
    pos_sign: float = 1.0
    zc_mode: str = "per_class"

    def __post_init__(self) -> None:
        if not self.mu >= 0:
            raise InvalidParameterError(f"mu must be >= 0, got {self.mu!r}")
        if not self.tau_cls > 0 or not self.tau_con > 0:
            raise InvalidParameterError("temperatures must be positive")
        if self.extra not in EXTRA_LOSSES:
            raise InvalidParameterError(f"unknown extra loss {self.extra!r}")


@dataclass(frozen=True)
class Batch:
    """Image features (already passed through the frozen image path) and labels."""

    features: np.ndarray  # (B, d_feat)
    labels: np.ndarray  # (B,)

    @classmethod
    def from_raw(cls, x, y, enc: FrozenEncoders) -> "Batch":
        return cls(enc.encode_images(np.asarray(x, dtype=np.float64)), np.asarray(y, dtype=np.intp))

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class LossReport:
    l_ce: float
    l_con: float | None
    total: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def _label_columns(labels: np.ndarray, classes: np.ndarray) -> np.ndarray:
    pos = {int(c): j for j, c in enumerate(classes)}
    try:
        return np.array([pos[int(y)] for y in labels], dtype=np.intp)
    except KeyError as exc:
        raise UnknownClassError(f"label {exc.args[0]} outside class set {classes.tolist()}") from None


def _check_classes(classes) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.intp).ravel()
    if classes.size == 0:
        raise InvalidParameterError("class set is empty")
    return classes


def ce_from_features(features: np.ndarray, cols: np.ndarray, z_text: np.ndarray, tau: float):
    """Mean cross-entropy of cosine logits and its gradient w.r.t. ``z_text`` rows."""
    logits = features @ z_text.T / tau
    logp = log_softmax(logits)
    n = features.shape[0]
    loss = -float(np.mean(logp[np.arange(n), cols]))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), cols] -= 1.0
    dlogits /= n
    return loss, dlogits.T @ features / tau


def class_probabilities(x, prompt: np.ndarray, classes, enc: FrozenEncoders, tau_cls: float) -> np.ndarray:
    classes = _check_classes(classes)
    if not tau_cls > 0:
        raise InvalidParameterError("tau_cls must be positive")
    fx = encode_image(x, enc)
    z, _ = enc.encode_prompt(prompt, classes)
    return softmax(z @ fx, tau_cls)


def cross_entropy_loss(batch: Batch, prompt: np.ndarray, classes, enc: FrozenEncoders,
                       tau_cls: float) -> tuple[float, np.ndarray]:
    classes = _check_classes(classes)
    cols = _label_columns(batch.labels, classes)
    z, cache = enc.encode_prompt(prompt, classes)
    loss, dz = ce_from_features(batch.features, cols, z, tau_cls)
    return loss, enc.prompt_grad(cache, dz)


def contrastive_loss(z_G, z_C, z_i, tau_con: float = 1.0) -> tuple[float, np.ndarray, np.ndarray]:
    """-log softmax of sim(z_G, z_C) against {sim(z_G, z_C), sim(z_G, z_i)}.

    Returns the loss and gradients for ``z_G`` and ``z_i``; ``z_C`` is frozen.
    """
    if not tau_con > 0:
        raise InvalidParameterError("tau_con must be positive")
    s_pos, dpos_g, _ = cosine_sim_grad(z_G, z_C)
    s_neg, dneg_g, dneg_i = cosine_sim_grad(z_G, z_i)
    u = (s_neg - s_pos) / tau_con
    loss = float(np.logaddexp(0.0, u))
    w = 0.5 * (1.0 + np.tanh(0.5 * u)) / tau_con  # sigmoid(u) / tau
    return loss, w * (dneg_g - dpos_g), w * dneg_i


def ablation_loss(kind: str, z_G, z_C, z_i, pos_sign: float = 1.0) -> tuple[float, np.ndarray, np.ndarray]:
    """Stand-in extra losses: ``no_positive`` is 1 - sim(z_G, z_i), ``no_negative`` is sim(z_G, z_C)."""
    if kind == "no_positive":
        s, dg, di = cosine_sim_grad(z_G, z_i)
        return 1.0 - s, -dg, -di
    if kind == "no_negative":
        s, dg, _ = cosine_sim_grad(z_G, z_C)
        return pos_sign * s, pos_sign * dg, np.zeros_like(np.asarray(z_i, dtype=np.float64))
    raise InvalidParameterError(f"unknown ablation {kind!r}")


def _extra_terms(kind: str, zg: np.ndarray, zc: np.ndarray, zi: np.ndarray, cfg: LossConfig):
    """Vectorised extra loss over rows; returns (mean loss, dL/dzg, dL/dzi)."""
    c = zg.shape[0]
    s_pos = np.sum(zg * zc, axis=1)
    s_neg = np.sum(zg * zi, axis=1)
    if kind == "contrastive":
        u = (s_neg - s_pos) / cfg.tau_con
        losses = np.logaddexp(0.0, u)
        w = (0.5 * (1.0 + np.tanh(0.5 * u)) / cfg.tau_con / c)[:, None]
        return float(np.mean(losses)), w * (zi - zc), w * zg
    if kind == "no_positive":
        return float(np.mean(1.0 - s_neg)), -zi / c, -zg / c
    if kind == "no_negative":
        return float(cfg.pos_sign * np.mean(s_pos)), cfg.pos_sign * zc / c, np.zeros_like(zi)
    raise InvalidParameterError(f"unknown extra loss {kind!r}")


def total_loss(batch: Batch, p_G: np.ndarray, adapter, classes, enc: FrozenEncoders,
               cfg: LossConfig, z_C: np.ndarray | None = None) -> LossReport:
    """``l_ce(p_G + delta) + mu * l_extra`` with gradients for every trainable tensor.

    ``adapter`` may be a LowRankAdapter, a FullRankAdapter, or ``None`` (the
    global prompt alone is trained, without any extra loss). ``z_C`` may carry
    precomputed handcrafted features for all ``K`` classes.
    """
    classes = _check_classes(classes)
    cols = _label_columns(batch.labels, classes)
    p_i = compose(p_G, adapter)
    z_i, cache_i = enc.encode_prompt(p_i, classes)
    l_ce, dz_i = ce_from_features(batch.features, cols, z_i, cfg.tau_cls)

    if adapter is None or cfg.extra == "none":
        dp_i = enc.prompt_grad(cache_i, dz_i)
        report = LossReport(l_ce=l_ce, l_con=None, total=l_ce)
        grads = {"p_G": dp_i}
        if adapter is not None:
            grads.update(_adapter_grads(adapter, dp_i))
        report.grads = grads
        return _checked(report)

    present = np.unique(cols)  # columns of classes seen in this batch, ascending
    zg, cache_g = enc.encode_prompt(p_G, classes[present])
    if z_C is None:
        zc = enc.handcrafted_features(classes[present], mode=cfg.zc_mode)
    else:
        zc = z_C[classes[present]]
    l_extra, dzg, dzi = _extra_terms(cfg.extra, zg, zc, z_i[present], cfg)

    if cfg.mu != 0.0:
        dz_i[present] += cfg.mu * dzi
    dp_i = enc.prompt_grad(cache_i, dz_i)
    dp_G = dp_i
    if cfg.mu != 0.0:
        dp_G = dp_i + enc.prompt_grad(cache_g, cfg.mu * dzg)
    grads = {"p_G": dp_G}
    grads.update(_adapter_grads(adapter, dp_i))
    return _checked(LossReport(l_ce=l_ce, l_con=l_extra, total=l_ce + cfg.mu * l_extra, grads=grads))


def _adapter_grads(adapter, dp_i: np.ndarray) -> dict[str, np.ndarray]:
    if isinstance(adapter, LowRankAdapter):
        return {"U": dp_i @ adapter.V.T, "V": adapter.U.T @ dp_i}
    if isinstance(adapter, FullRankAdapter):
        return {"D": dp_i.copy()}
    raise TypeError(f"unsupported adapter {type(adapter).__name__}")


def _checked(report: LossReport) -> LossReport:
    vals = [report.l_ce, report.total] + ([report.l_con] if report.l_con is not None else [])
    if not all(np.isfinite(vals)):
        raise NumericalFailureError(f"non-finite loss (ce={report.l_ce}, extra={report.l_con})")
    for name, g in report.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalFailureError(f"non-finite gradient for {name}")
    return report


def sequence_text_features(prompt: np.ndarray, classes, enc: FrozenEncoders) -> np.ndarray:
    """Per-class text features built through the single-sequence path (test oracle helper)."""
    return np.array([encode_text(build_prompt_sequence(prompt, int(c), enc), enc) for c in classes])

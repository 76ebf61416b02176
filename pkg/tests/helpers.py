"""Shared builders for small random loss instances."""

from __future__ import annotations

import numpy as np

from fedpgp.encoders import FrozenEncoders
from fedpgp.losses import Batch, LossConfig, total_loss
from fedpgp.numkit import Rng, finite_diff_grad, max_rel_error
from fedpgp.prompt import LowRankAdapter


def random_instance(seed: int, *, d_token=8, M=4, b=2, K=3, batch=6, d_img=5):
    enc = FrozenEncoders.generate(1000 + seed, K=K, M=M, d_token=d_token, d_feat=6, d_img=d_img, hidden=7,
                                  class_std=1.0, template_std=1.0)
    rng = Rng(seed)
    p_G = rng.normal_array((d_token, M), 0.5)
    ad = LowRankAdapter(rng.normal_array((d_token, b), 0.5), rng.normal_array((b, M), 0.5))
    labels = np.array([rng.randbelow(K) for _ in range(batch)], dtype=np.intp)
    x = rng.normal_array((batch, d_img))
    return enc, p_G, ad, Batch.from_raw(x, labels, enc)


def gradient_error(seed: int, extra: str = "contrastive", mu: float = 1.0) -> float:
    enc, p_G, ad, batch = random_instance(seed)
    cfg = LossConfig(mu=mu, tau_cls=0.5, extra=extra)
    classes = list(range(enc.K))
    rep = total_loss(batch, p_G, ad, classes, enc, cfg)

    def at(pg=p_G, U=ad.U, V=ad.V):
        return total_loss(batch, pg, LowRankAdapter(U, V), classes, enc, cfg).total

    errs = [
        max_rel_error(rep.grads["p_G"], finite_diff_grad(lambda m: at(pg=m), p_G)),
        max_rel_error(rep.grads["U"], finite_diff_grad(lambda m: at(U=m), ad.U)),
        max_rel_error(rep.grads["V"], finite_diff_grad(lambda m: at(V=m), ad.V)),
    ]
    return max(errs)

"""Accuracy protocols: base-to-novel, personalization, leave-one-domain-out."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .encoders import FrozenEncoders, encode_image
from .errors import InvalidParameterError, UndefinedMetricError

if TYPE_CHECKING:
    from .federation import ClientState, Experiment

AGGREGATE = "AGGREGATE"
_FIELDS = ("acc_local", "acc_base", "acc_novel", "acc_target", "hm", "l_ce", "l_con")


@dataclass
class MetricsRecord:
    round: int
    client: int | str
    acc_local: float | None = None
    acc_base: float | None = None
    acc_novel: float | None = None
    acc_target: float | None = None
    hm: float | None = None
    l_ce: float | None = None
    l_con: float | None = None
    flags: dict | None = None

    def to_dict(self) -> dict:
        out: dict = {"round": self.round, "client": self.client}
        for name in _FIELDS:
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        if self.flags:
            out["flags"] = self.flags
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def harmonic_mean(a_local: float, a_base: float, a_novel: float) -> float:
    vals = (a_local, a_base, a_novel)
    for v in vals:
        if not 0.0 <= v <= 1.0:
            raise InvalidParameterError(f"accuracy {v!r} outside [0, 1]")
    if min(vals) == 0.0:
        return 0.0
    return 3.0 / (1.0 / a_local + 1.0 / a_base + 1.0 / a_novel)


def predict(features: np.ndarray, prompt: np.ndarray, class_set, enc: FrozenEncoders) -> np.ndarray:
    """Predicted class ids for rows of image features; ties go to the lowest id."""
    classes = np.array(sorted(int(c) for c in class_set), dtype=np.intp)
    if classes.size == 0:
        raise InvalidParameterError("class set is empty")
    z, _ = enc.encode_prompt(prompt, classes)
    scores = np.atleast_2d(features) @ z.T
    return classes[np.argmax(scores, axis=1)]


def classify(x, prompt: np.ndarray, class_set, enc: FrozenEncoders, tau_cls: float = 0.05) -> int:
    # tau_cls rescales every logit by the same positive factor, so it cannot move the argmax
    if not tau_cls > 0:
        raise InvalidParameterError("tau_cls must be positive")
    return int(predict(encode_image(x, enc)[None, :], prompt, class_set, enc)[0])


def accuracy(features: np.ndarray, labels: np.ndarray, prompt: np.ndarray, class_set,
             enc: FrozenEncoders) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise UndefinedMetricError("accuracy of an empty test set is undefined")
    if not np.all(np.isin(labels, list(class_set))):
        raise InvalidParameterError("test labels fall outside the class set")
    return float(np.mean(predict(features, prompt, class_set, enc) == labels))


def prompt_for(exp: "Experiment", client: "ClientState", which: str = "personalized") -> np.ndarray:
    from .federation import client_prompt

    if which == "personalized":
        return client_prompt(exp, client)
    if which == "global":
        return exp.server.p_G
    if which == "handcrafted":
        return exp.enc.template_prompt()
    raise InvalidParameterError(f"unknown prompt kind {which!r}")


def client_accuracy(exp: "Experiment", client: "ClientState", class_set, indices,
                    which: str = "personalized") -> float:
    idx = np.asarray(indices, dtype=np.intp)
    return accuracy(exp.features[idx], exp.task.y[idx], prompt_for(exp, client, which), class_set, exp.enc)


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _base_to_novel(exp: "Experiment", client: "ClientState") -> MetricsRecord:
    task = exp.task
    local = tuple(client.shard.class_set)
    others = tuple(c for c in exp.base if c not in local)
    rec = MetricsRecord(round=0, client=client.id)
    rec.acc_local = client_accuracy(exp, client, local, task.indices(split="test", classes=local))
    if others:
        rec.acc_base = client_accuracy(exp, client, others, task.indices(split="test", classes=others))
    rec.acc_novel = client_accuracy(exp, client, exp.novel, task.indices(split="test", classes=exp.novel))
    if rec.acc_base is not None:
        rec.hm = harmonic_mean(rec.acc_local, rec.acc_base, rec.acc_novel)
    return rec


def _personalization(exp: "Experiment", client: "ClientState") -> MetricsRecord:
    """Per-class test accuracy weighted by the client's training label distribution."""
    task = exp.task
    labels = task.y[client.shard.indices]
    classes, counts = np.unique(labels, return_counts=True)
    prompt = prompt_for(exp, client)
    total, weight = 0.0, 0
    for c, n in zip(classes, counts):
        idx = task.indices(split="test", classes=[int(c)])
        if idx.size:
            total += n * accuracy(exp.features[idx], task.y[idx], prompt, client.classes, exp.enc)
            weight += n
    if weight == 0:
        raise UndefinedMetricError(f"client {client.id} has no matching test samples")
    return MetricsRecord(round=0, client=client.id, acc_local=total / weight)


def _leave_one_domain_out(exp: "Experiment", client: "ClientState") -> MetricsRecord:
    idx = exp.target_idx
    if idx is None:
        raise InvalidParameterError("experiment has no held-out target domain")
    return MetricsRecord(round=0, client=client.id,
                         acc_target=client_accuracy(exp, client, client.classes, idx))


_PROTOCOLS = {
    "base_to_novel": _base_to_novel,
    "personalization": _personalization,
    "leave_one_domain_out": _leave_one_domain_out,
}


def evaluate_protocol(protocol: str, exp: "Experiment", round_: int = 0,
                      trained: set[int] | None = None) -> list[MetricsRecord]:
    """Per-client records in ascending id order, followed by the AGGREGATE record.

    Aggregate accuracies are unweighted client means; the aggregate HM is the
    harmonic mean of those means.
    """
    if protocol not in _PROTOCOLS:
        raise InvalidParameterError(f"unknown protocol {protocol!r}")
    if (protocol == "leave_one_domain_out") != (exp.target_idx is not None):
        raise InvalidParameterError(f"protocol {protocol!r} does not match how the task was partitioned")
    if protocol == "base_to_novel":
        seen = {c for cl in exp.clients for c in cl.shard.class_set}
        if seen & set(exp.novel):
            raise InvalidParameterError("novel classes appear in training shards")
    trained = set() if trained is None else trained
    records = []
    for client in sorted(exp.clients, key=lambda c: c.id):
        rec = _PROTOCOLS[protocol](exp, client)
        rec.round = round_
        if client.id in trained and client.last_losses is not None:
            rec.l_ce, rec.l_con = client.last_losses
        records.append(rec)
    agg = MetricsRecord(round=round_, client=AGGREGATE)
    for name in ("acc_local", "acc_base", "acc_novel", "acc_target", "l_ce", "l_con"):
        setattr(agg, name, _mean(getattr(r, name) for r in records))
    if all(v is not None for v in (agg.acc_local, agg.acc_base, agg.acc_novel)) and \
            all(r.hm is not None for r in records):
        agg.hm = harmonic_mean(agg.acc_local, agg.acc_base, agg.acc_novel)
    records.append(agg)
    return records

"""Federated training loop: sampling, broadcast, local SGD, aggregation.

Every strategy shares one engine. What differs is the trainable state a client
keeps locally and the loss it minimises:

============  ==================  =====================  ==================
strategy      local extra state   extra loss             aggregated
============  ==================  =====================  ==================
fedpgp        low-rank (U, V)     contrastive            global prompt
full_rank     free delta D        contrastive            global prompt
no_positive   low-rank (U, V)     1 - sim(z_G, z_i)      global prompt
no_negative   low-rank (U, V)     sim(z_G, z_C)          global prompt
promptfl      none                none                   global prompt
local_only    own prompt          none                   nothing
zero_shot     none                none (no training)     nothing
============  ==================  =====================  ==================

Only :class:`ClientUpdate` objects travel from clients to the server.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import data as data_mod
from .config import ExperimentConfig
from .encoders import FrozenEncoders
from .errors import InvalidParameterError, NoParticipantsError, NumericalFailureError, ShapeError
from .evaluation import MetricsRecord, evaluate_protocol
from .losses import Batch, LossConfig, LossReport, total_loss
from .numkit import Rng, derive_seed
from .prompt import compose, init_adapter, init_full_rank, init_global, sgd_step

log = logging.getLogger(__name__)

EXTRA_FOR = {"fedpgp": "contrastive", "full_rank": "contrastive", "no_positive": "no_positive",
             "no_negative": "no_negative", "promptfl": "none", "local_only": "none", "zero_shot": "none"}
ADAPTER_FOR = {"fedpgp": "low_rank", "no_positive": "low_rank", "no_negative": "low_rank",
               "full_rank": "full_rank"}


@dataclass(frozen=True)
class Strategy:
    kind: str
    freeze_adapter: bool = False

    def __post_init__(self) -> None:
        if self.kind not in EXTRA_FOR:
            raise InvalidParameterError(f"unknown strategy {self.kind!r}")

    @property
    def adapter_kind(self) -> str | None:
        return ADAPTER_FOR.get(self.kind)

    @property
    def extra_loss(self) -> str:
        return EXTRA_FOR[self.kind]

    @property
    def trains(self) -> bool:
        return self.kind != "zero_shot"

    @property
    def aggregates(self) -> bool:
        return self.kind not in ("zero_shot", "local_only")


@dataclass
class ClientState:
    id: int
    shard: data_mod.DatasetShard
    classes: tuple[int, ...]  # class set used for the local classification loss
    adapter: object = None  # LowRankAdapter / FullRankAdapter; never sent to the server
    own_prompt: np.ndarray | None = None  # local_only keeps a private prompt
    last_losses: tuple[float, float | None] | None = None

    @property
    def n(self) -> int:
        return self.shard.n


@dataclass
class ServerState:
    p_G: np.ndarray
    round: int
    rng: Rng
    flagged_rounds: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class ClientUpdate:
    """The only client-to-server message: the locally trained global prompt."""

    client_id: int
    prompt: np.ndarray
    n_samples: int


@dataclass
class LocalResult:
    update: ClientUpdate
    adapter: object
    own_prompt: np.ndarray | None
    epoch_losses: list[LossReport]
    steps: int


# ----------------------------------------------------------------------
# protocol steps


def sample_clients(server: ServerState, N: int, participation_rate: float) -> list[int]:
    """ceil(rate * N) distinct ids drawn from the server stream, returned ascending."""
    if not 0 < participation_rate <= 1:
        raise InvalidParameterError(f"participation rate must lie in (0, 1], got {participation_rate!r}")
    k = min(N, math.ceil(participation_rate * N - 1e-12))
    if k == N:
        return list(range(N))
    return sorted(server.rng.sample(N, k))


def aggregate(updates: Iterable) -> np.ndarray:
    """Sample-count weighted mean of client prompts, summed in ascending client order.

    Accepts :class:`ClientUpdate` objects or ``(prompt, n_samples)`` pairs
    (pairs keep their given order).
    """
    items = []
    for u in updates:
        if isinstance(u, ClientUpdate):
            items.append((u.client_id, u.prompt, u.n_samples))
        else:
            prompt, n = u
            items.append((len(items), np.asarray(prompt, dtype=np.float64), n))
    if not items:
        raise NoParticipantsError("aggregation needs at least one client update")
    items.sort(key=lambda t: t[0])
    shape = np.shape(items[0][1])
    total = 0
    for _, p, n in items:
        if np.shape(p) != shape:
            raise ShapeError(f"update shapes differ: {np.shape(p)} vs {shape}")
        if n < 1:
            raise InvalidParameterError("client sample counts must be >= 1")
        total += n
    # anchored at the first prompt so identical inputs come back exactly
    anchor = np.array(items[0][1], dtype=np.float64)
    out = anchor.copy()
    for _, p, n in items:
        out = out + (n / total) * (np.asarray(p, dtype=np.float64) - anchor)
    return out


def aggregation_weights(sample_counts: list[int]) -> list[float]:
    total = sum(sample_counts)
    return [n / total for n in sample_counts]


def local_train(client: ClientState, p_G_broadcast: np.ndarray, E: int, eta: float, strategy: Strategy,
                enc: FrozenEncoders, loss_cfg: LossConfig, features: np.ndarray, labels: np.ndarray,
                rng: Rng, batch_size: int, z_C: np.ndarray | None = None) -> LocalResult:
    """E epochs of shuffled mini-batch SGD on the client's shard.

    The client never mutates its own state here; the caller installs the
    returned adapter/prompt. ``features`` are image features of every task
    sample, indexed through the shard.
    """
    if E < 1:
        raise InvalidParameterError(f"E must be >= 1, got {E}")
    if strategy.kind == "local_only":
        p_G = (client.own_prompt if client.own_prompt is not None else p_G_broadcast).copy()
    else:
        p_G = np.array(p_G_broadcast, dtype=np.float64, copy=True)
    adapter = client.adapter.copy() if client.adapter is not None else None
    train_adapter = adapter is not None and not strategy.freeze_adapter
    idx = client.shard.indices
    epoch_reports: list[LossReport] = []
    steps = 0
    for _ in range(E):
        order = rng.permutation(idx.shape[0])
        ce_sum, extra_sum, nb = 0.0, 0.0, 0
        last = None
        for start in range(0, len(order), batch_size):
            rows = idx[order[start:start + batch_size]]
            batch = Batch(features[rows], labels[rows])
            report = total_loss(batch, p_G, adapter, client.classes, enc, loss_cfg, z_C=z_C)
            params = {"p_G": p_G}
            if train_adapter:
                params.update(adapter.params())
            new = sgd_step(params, report.grads, eta)
            p_G = new["p_G"]
            if train_adapter:
                for name, value in new.items():
                    if name != "p_G":
                        setattr(adapter, name, value)
            ce_sum += report.l_ce
            extra_sum += report.l_con or 0.0
            nb += 1
            steps += 1
            last = report
        epoch_reports.append(LossReport(l_ce=ce_sum / nb, l_con=None if last.l_con is None else extra_sum / nb,
                                        total=(ce_sum + loss_cfg.mu * extra_sum) / nb))
    if not np.all(np.isfinite(p_G)):
        raise NumericalFailureError(f"client {client.id} produced a non-finite prompt")
    own = p_G.copy() if strategy.kind == "local_only" else None
    return LocalResult(update=ClientUpdate(client.id, p_G.copy(), client.n), adapter=adapter,
                       own_prompt=own, epoch_losses=epoch_reports, steps=steps)


# ----------------------------------------------------------------------
# experiment assembly


@dataclass
class Experiment:
    cfg: ExperimentConfig
    seed: int
    strategy: Strategy
    enc: FrozenEncoders
    task: data_mod.SyntheticTask
    server: ServerState
    clients: list[ClientState]
    features: np.ndarray  # image features of every sample
    z_C: np.ndarray  # handcrafted text features for every class
    loss_cfg: LossConfig
    base: tuple[int, ...]
    novel: tuple[int, ...]
    target_idx: np.ndarray | None = None
    history: list[MetricsRecord] = field(default_factory=list)


def loss_config(cfg: ExperimentConfig, strategy: Strategy) -> LossConfig:
    return LossConfig(mu=cfg.mu, tau_cls=cfg.tau_cls, tau_con=cfg.tau_con, extra=strategy.extra_loss,
                      pos_sign=cfg.pos_sign, zc_mode=cfg.zc_mode)


def build_task(cfg: ExperimentConfig, seed: int, enc: FrozenEncoders) -> data_mod.SyntheticTask:
    return data_mod.make_aligned_task(
        enc, D=cfg.D, n_per_class_per_domain=cfg.n_per_class, sigma=cfg.sigma,
        seed=derive_seed(seed, "task"), context_gap=cfg.context_gap,
        domain_scale=cfg.domain_scale or None)


def setup_experiment(cfg: ExperimentConfig, seed: int) -> Experiment:
    strategy = Strategy(cfg.strategy, cfg.freeze_adapter)
    enc = FrozenEncoders.generate(derive_seed(seed, "encoders"), K=cfg.K, M=cfg.M, d_token=cfg.d_token,
                                  d_feat=cfg.d_feat, d_img=cfg.d_img, hidden=cfg.hidden,
                                  class_std=cfg.class_std, template_std=cfg.template_std)
    task = build_task(cfg, seed, enc)
    base, novel = data_mod.base_novel_split(task)

    if cfg.protocol == "base_to_novel":
        pool = task.indices(split="train", classes=base)
    else:
        pool = task.train_idx
    if cfg.shots:
        pool = data_mod.cap_per_class(task, cfg.shots, derive_seed(seed, "shots"), pool)

    target_idx = None
    part_rng = Rng(derive_seed(seed, "partition"))
    if cfg.partition == "pathological":
        classes = base if cfg.protocol == "base_to_novel" else tuple(range(task.K))
        shards = data_mod.pathological_partition(task, cfg.N, classes=classes, pool=pool)
    elif cfg.partition == "dirichlet":
        shards = data_mod.dirichlet_partition(task, cfg.N, cfg.alpha, part_rng, pool=pool)
    elif cfg.partition == "iid":
        shards = data_mod.iid_partition(task, cfg.N, part_rng, pool=pool)
    else:
        shards, target_idx = data_mod.leave_one_domain_out(task, cfg.target_domain, cfg.N, pool=pool)

    if cfg.protocol == "base_to_novel":
        leaked = set(novel) & {c for s in shards for c in s.class_set}
        if leaked:
            raise InvalidParameterError(f"novel classes {sorted(leaked)} leaked into training shards")

    p0 = init_global(Rng(derive_seed(seed, "prompt-init")), cfg.d_token, cfg.M, cfg.prompt_init_scale)
    server = ServerState(p_G=p0, round=0, rng=Rng(derive_seed(seed, "client-sampling")))
    clients = []
    for shard in shards:
        if shard.n < 1:
            raise InvalidParameterError(f"client {shard.owner} received no samples")
        if cfg.protocol == "base_to_novel" and cfg.partition == "pathological":
            classes = shard.class_set
        elif cfg.protocol == "base_to_novel":
            classes = base
        else:
            classes = tuple(range(task.K))
        adapter = None
        if strategy.adapter_kind == "low_rank":
            adapter = init_adapter(Rng(derive_seed(seed, "adapter", shard.owner)), cfg.d_token, cfg.M, cfg.b)
        elif strategy.adapter_kind == "full_rank":
            adapter = init_full_rank(cfg.d_token, cfg.M)
        own = p0.copy() if strategy.kind == "local_only" else None
        clients.append(ClientState(id=shard.owner, shard=shard, classes=classes, adapter=adapter, own_prompt=own))

    return Experiment(
        cfg=cfg, seed=seed, strategy=strategy, enc=enc, task=task, server=server, clients=clients,
        features=enc.encode_images(task.x), z_C=enc.handcrafted_features(mode=cfg.zc_mode),
        loss_cfg=loss_config(cfg, strategy), base=base, novel=novel, target_idx=target_idx,
    )


def client_prompt(exp: Experiment, client: ClientState) -> np.ndarray:
    """The prompt a client predicts with after the latest round."""
    kind = exp.strategy.kind
    if kind == "zero_shot":
        return exp.enc.template_prompt()
    if kind == "local_only":
        return client.own_prompt
    return compose(exp.server.p_G, client.adapter)


def _train_one(exp: Experiment, client: ClientState) -> LocalResult | None:
    cfg = exp.cfg
    rng = Rng(derive_seed(exp.seed, "local", exp.server.round + 1, client.id))
    try:
        return local_train(client, exp.server.p_G, cfg.E, cfg.eta, exp.strategy, exp.enc, exp.loss_cfg,
                           exp.features, exp.task.y, rng, cfg.batch_size, z_C=exp.z_C)
    except NumericalFailureError as exc:
        log.warning("round %d: client %d dropped: %s", exp.server.round + 1, client.id, exc)
        return None


def run_round(exp: Experiment, workers: int = 1, evaluate: bool | None = None) -> list[MetricsRecord]:
    """One communication round; returns the metrics records emitted for it."""
    cfg, server = exp.cfg, exp.server
    t = server.round + 1
    selected = sample_clients(server, len(exp.clients), cfg.participation_rate)
    failed: list[int] = []
    updates: list[ClientUpdate] = []
    if exp.strategy.trains:
        chosen = [exp.clients[i] for i in selected]
        if workers > 1 and len(chosen) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda c: _train_one(exp, c), chosen))
        else:
            results = [_train_one(exp, c) for c in chosen]
        for client, res in zip(chosen, results):  # ascending id
            if res is None:
                failed.append(client.id)
                continue
            client.adapter = res.adapter
            if res.own_prompt is not None:
                client.own_prompt = res.own_prompt
            last = res.epoch_losses[-1]
            client.last_losses = (last.l_ce, last.l_con)
            updates.append(res.update)
        if exp.strategy.aggregates:
            if updates:
                server.p_G = aggregate(updates)
            else:
                server.flagged_rounds.append(t)
        elif not updates:
            server.flagged_rounds.append(t)
    server.round = t

    if evaluate is None:
        evaluate = t % cfg.eval_stride == 0 or t == cfg.T
    records: list[MetricsRecord] = []
    if evaluate:
        trained = {u.client_id for u in updates}
        records = evaluate_protocol(cfg.protocol, exp, round_=t, trained=trained)
        records[-1].flags = {"failed": failed, "participants": selected} if failed else None
    exp.history.extend(records)
    return records


@dataclass
class ExperimentResult:
    seed: int
    history: list[MetricsRecord]
    p_G: np.ndarray
    adapters: dict[int, object]
    experiment: Experiment


def run_experiment(cfg: ExperimentConfig, seed: int | None = None, workers: int = 1,
                   on_records: Callable[[list[MetricsRecord]], None] | None = None) -> ExperimentResult:
    seed = cfg.seeds[0] if seed is None else seed
    exp = setup_experiment(cfg, seed)
    for _ in range(cfg.T):
        recs = run_round(exp, workers=workers)
        if on_records and recs:
            on_records(recs)
    adapters = {c.id: c.adapter for c in exp.clients if c.adapter is not None}
    return ExperimentResult(seed=seed, history=exp.history, p_G=exp.server.p_G.copy(), adapters=adapters,
                            experiment=exp)

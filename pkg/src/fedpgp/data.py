"""Synthetic classification tasks and federated partitioners.

Samples are ``x = prototype[y] + domain_offset[m] + N(0, sigma^2 I)``. Tasks can
be *aligned* with a frozen encoder pair: prototypes are then chosen so that the
image path maps them close to the text features of their class under a hidden
context prompt, which plays the role of pretraining. The handcrafted template
is a perturbed copy of that hidden context, so zero-shot prediction is useful
but imperfect and a learned context can improve on it for every class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import FrozenEncoders
from .errors import InvalidParameterError
from .numkit import Rng, derive_seed


@dataclass(frozen=True)
class SyntheticTask:
    K: int
    D: int
    sigma: float
    prototypes: np.ndarray  # (K, d_img)
    domain_offsets: np.ndarray  # (D, d_img)
    x: np.ndarray  # (n, d_img)
    y: np.ndarray  # (n,)
    m: np.ndarray  # (n,)
    train_idx: np.ndarray  # ascending
    test_idx: np.ndarray  # ascending

    @property
    def d_img(self) -> int:
        return self.prototypes.shape[1]

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def indices(self, *, split: str = "train", classes=None, domains=None) -> np.ndarray:
        if split == "train":
            idx = self.train_idx
        elif split == "test":
            idx = self.test_idx
        elif split == "all":
            idx = np.arange(len(self))
        else:
            raise InvalidParameterError(f"unknown split {split!r}")
        keep = np.ones(idx.shape[0], dtype=bool)
        if classes is not None:
            keep &= np.isin(self.y[idx], np.asarray(list(classes), dtype=np.intp))
        if domains is not None:
            keep &= np.isin(self.m[idx], np.asarray(list(domains), dtype=np.intp))
        return idx[keep]


@dataclass(frozen=True)
class DatasetShard:
    owner: int
    indices: np.ndarray  # ascending indices into the task's samples
    class_set: tuple[int, ...]

    @property
    def n(self) -> int:
        return int(self.indices.shape[0])


def _make_shard(owner: int, indices, task: SyntheticTask) -> DatasetShard:
    idx = np.array(sorted(int(i) for i in indices), dtype=np.intp)
    classes = tuple(int(c) for c in np.unique(task.y[idx])) if idx.size else ()
    return DatasetShard(owner=owner, indices=idx, class_set=classes)


# ----------------------------------------------------------------------
# generation


def generate_task(
    K: int,
    D: int,
    n_per_class_per_domain: int,
    d_img: int,
    sigma: float,
    seed: int,
    *,
    prototypes: np.ndarray | None = None,
    domain_scale: float | None = None,
    min_separation: float | None = None,
    train_fraction: float = 0.8,
) -> SyntheticTask:
    """Draw a task deterministically from ``seed``.

    ``domain_scale`` sets the std of each domain-offset entry; by default it is
    chosen so offset norms match the mean inter-prototype distance. A single
    domain gets a zero offset. ``min_separation`` (in units of ``sigma``)
    rejects tasks whose closest prototype pair is nearer than that.
    """
    if K < 2 or D < 1 or n_per_class_per_domain < 1 or d_img < 1:
        raise InvalidParameterError(f"invalid task sizes K={K} D={D} n={n_per_class_per_domain} d_img={d_img}")
    if not sigma >= 0:
        raise InvalidParameterError(f"sigma must be >= 0, got {sigma!r}")
    if not 0 < train_fraction < 1:
        raise InvalidParameterError("train_fraction must lie in (0, 1)")

    if prototypes is None:
        prototypes = Rng(derive_seed(seed, "task", "prototypes")).normal_array((K, d_img))
    prototypes = np.array(prototypes, dtype=np.float64)
    if prototypes.shape != (K, d_img):
        raise InvalidParameterError(f"prototypes have shape {prototypes.shape}, expected {(K, d_img)}")

    gaps = [float(np.linalg.norm(prototypes[a] - prototypes[b])) for a in range(K) for b in range(a + 1, K)]
    if min_separation is not None and min(gaps) <= min_separation * sigma:
        raise InvalidParameterError(
            f"closest prototypes are {min(gaps):.4g} apart, need > {min_separation} * sigma")

    if D == 1:
        offsets = np.zeros((1, d_img))
    else:
        scale = domain_scale if domain_scale is not None else float(np.mean(gaps)) / math.sqrt(d_img)
        offsets = Rng(derive_seed(seed, "task", "domains")).normal_array((D, d_img), scale)

    n = n_per_class_per_domain
    noise_rng = Rng(derive_seed(seed, "task", "noise"))
    split_rng = Rng(derive_seed(seed, "task", "split"))
    n_train = min(max(1, int(round(train_fraction * n))), n - 1) if n > 1 else 1

    xs, ys, ms, train, test = [], [], [], [], []
    for dom in range(D):
        for k in range(K):
            base = len(ys)
            for _ in range(n):
                xs.append(prototypes[k] + offsets[dom] + sigma * noise_rng.normal_array(d_img))
                ys.append(k)
                ms.append(dom)
            order = split_rng.permutation(n)
            train.extend(base + j for j in order[:n_train])
            test.extend(base + j for j in order[n_train:])

    return SyntheticTask(
        K=K, D=D, sigma=float(sigma), prototypes=prototypes, domain_offsets=offsets,
        x=np.array(xs), y=np.array(ys, dtype=np.intp), m=np.array(ms, dtype=np.intp),
        train_idx=np.array(sorted(train), dtype=np.intp), test_idx=np.array(sorted(test), dtype=np.intp),
    )


def hidden_context(enc: FrozenEncoders, gap: float, seed: int) -> np.ndarray:
    """The context prompt the synthetic 'pretraining' aligned images to.

    It is the template prompt plus Gaussian noise of relative size ``gap``.
    """
    template = enc.template_prompt()
    std = gap * float(np.std(template))
    return template + Rng(derive_seed(seed, "task", "hidden-context")).normal_array(template.shape, std)


def aligned_prototypes(enc: FrozenEncoders, context: np.ndarray, seed: int, *,
                       steps: int = 400, lr: float = 0.5, radius: float = 3.0) -> np.ndarray:
    """Image-space points whose image features match each class's text feature.

    Runs projected gradient ascent on ``cos(f(x_k), g(context, w_k))`` with
    ``||x_k|| <= radius``, starting from a seeded Gaussian point.
    """
    targets, _ = enc.encode_prompt(context, np.arange(enc.K))
    x = Rng(derive_seed(seed, "task", "aligned-init")).normal_array((enc.K, enc.d_img))
    for _ in range(steps):
        z, h, n = enc.image_forward(x)
        x = x + lr * enc.image_backward(z, h, n, targets)
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x * np.minimum(1.0, radius / norms)
    return x


def make_aligned_task(enc: FrozenEncoders, *, D: int, n_per_class_per_domain: int, sigma: float,
                      seed: int, context_gap: float = 0.5, domain_scale: float | None = None,
                      min_separation: float | None = None) -> SyntheticTask:
    context = hidden_context(enc, context_gap, seed)
    protos = aligned_prototypes(enc, context, seed)
    return generate_task(enc.K, D, n_per_class_per_domain, enc.d_img, sigma, seed,
                         prototypes=protos, domain_scale=domain_scale, min_separation=min_separation)


def nearest_prototype_predict(task: SyntheticTask, x: np.ndarray, domain: np.ndarray | None = None) -> np.ndarray:
    """Nearest-centroid baseline (centroid = prototype + domain offset)."""
    x = np.atleast_2d(x)
    dom = np.zeros(x.shape[0], dtype=np.intp) if domain is None else np.asarray(domain)
    centres = task.prototypes[None, :, :] + task.domain_offsets[dom][:, None, :]
    d2 = np.sum((x[:, None, :] - centres) ** 2, axis=2)
    return np.argmin(d2, axis=1)


# ----------------------------------------------------------------------
# class splits and partitions


def base_novel_split(task_or_K) -> tuple[tuple[int, ...], tuple[int, ...]]:
    K = task_or_K if isinstance(task_or_K, int) else task_or_K.K
    if K < 2:
        raise InvalidParameterError("need at least two classes for a base/novel split")
    n_base = math.ceil(K / 2)
    return tuple(range(n_base)), tuple(range(n_base, K))


def cap_per_class(task: SyntheticTask, shots: int, seed: int, pool=None) -> np.ndarray:
    """Keep at most ``shots`` training samples of each class (seeded choice)."""
    if shots < 1:
        raise InvalidParameterError(f"shots must be >= 1, got {shots}")
    pool = task.train_idx if pool is None else np.asarray(pool, dtype=np.intp)
    kept = []
    for k in np.unique(task.y[pool]):
        idx = pool[task.y[pool] == k]
        order = Rng(derive_seed(seed, "shots", int(k))).permutation(idx.shape[0])
        kept.extend(int(idx[j]) for j in order[:shots])
    return np.array(sorted(kept), dtype=np.intp)


def pathological_partition(task: SyntheticTask, N: int, classes=None, pool=None) -> list[DatasetShard]:
    """Disjoint class groups, dealt round-robin; each client takes all samples of its classes."""
    if classes is None:
        classes = base_novel_split(task)[0]
    classes = list(classes)
    if not 1 <= N <= len(classes):
        raise InvalidParameterError(f"cannot split {len(classes)} classes over {N} clients")
    pool = task.train_idx if pool is None else np.asarray(pool, dtype=np.intp)
    shards = []
    for i in range(N):
        mine = classes[i::N]
        shards.append(_make_shard(i, pool[np.isin(task.y[pool], mine)], task))
    return shards


def iid_partition(task: SyntheticTask, N: int, rng: Rng, pool=None) -> list[DatasetShard]:
    pool = task.train_idx if pool is None else np.asarray(pool, dtype=np.intp)
    if not 1 <= N <= pool.shape[0]:
        raise InvalidParameterError(f"cannot deal {pool.shape[0]} samples to {N} clients")
    order = rng.permutation(pool.shape[0])
    return [_make_shard(i, [pool[j] for j in order[i::N]], task) for i in range(N)]


def dirichlet_partition(task: SyntheticTask, N: int, alpha: float, rng: Rng, pool=None) -> list[DatasetShard]:
    """Per-class Dir(alpha) proportions, then a categorical draw per sample.

    Empty shards are filled by moving the highest-index sample out of the
    currently largest shard, so the draw count never depends on the repair.
    """
    if not alpha > 0:
        raise InvalidParameterError(f"alpha must be positive, got {alpha!r}")
    pool = task.train_idx if pool is None else np.asarray(pool, dtype=np.intp)
    if not 1 <= N <= pool.shape[0]:
        raise InvalidParameterError(f"cannot deal {pool.shape[0]} samples to {N} clients")
    assigned: list[list[int]] = [[] for _ in range(N)]
    for k in np.unique(task.y[pool]):
        props = rng.dirichlet([alpha] * N)
        for idx in pool[task.y[pool] == k]:
            assigned[rng.categorical(props)].append(int(idx))
    for i in range(N):
        if not assigned[i]:
            donor = max(range(N), key=lambda j: (len(assigned[j]), -j))
            victim = max(assigned[donor])
            assigned[donor].remove(victim)
            assigned[i].append(victim)
    return [_make_shard(i, assigned[i], task) for i in range(N)]


def leave_one_domain_out(task: SyntheticTask, target_domain: int, N_clients: int,
                         pool=None) -> tuple[list[DatasetShard], np.ndarray]:
    """One source domain per client (ascending order); the whole target domain is the test set."""
    if task.D < 2:
        raise InvalidParameterError("leave-one-domain-out needs at least two domains")
    if not 0 <= target_domain < task.D:
        raise InvalidParameterError(f"target domain {target_domain} outside [0, {task.D})")
    if N_clients != task.D - 1:
        raise InvalidParameterError(f"expected {task.D - 1} clients for {task.D} domains, got {N_clients}")
    pool = task.train_idx if pool is None else np.asarray(pool, dtype=np.intp)
    sources = [d for d in range(task.D) if d != target_domain]
    shards = [_make_shard(i, pool[task.m[pool] == dom], task) for i, dom in enumerate(sources)]
    return shards, task.indices(split="all", domains=[target_domain])


def label_entropy(shard: DatasetShard, task: SyntheticTask) -> float:
    """Shannon entropy (nats) of a shard's label histogram."""
    _, counts = np.unique(task.y[shard.indices], return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


# ----------------------------------------------------------------------
# text export


def export_task(task: SyntheticTask, path) -> None:
    """One sample per line: ``domain,class,split,x_0,...,x_{d-1}`` (split is train/test)."""
    is_train = np.zeros(len(task), dtype=bool)
    is_train[task.train_idx] = True
    lines = [f"# K={task.K} D={task.D} d_img={task.d_img} sigma={task.sigma!r}"]
    for i in range(len(task)):
        feats = ",".join(repr(float(v)) for v in task.x[i])
        lines.append(f"{task.m[i]},{task.y[i]},{'train' if is_train[i] else 'test'},{feats}")
    Path(path).write_text("\n".join(lines) + "\n")


def import_task(path) -> SyntheticTask:
    """Rebuild samples from :func:`export_task` output (prototypes/offsets are not stored)."""
    header, *rows = Path(path).read_text().splitlines()
    meta = dict(tok.split("=", 1) for tok in header.lstrip("# ").split())
    K, D, d_img = int(meta["K"]), int(meta["D"]), int(meta["d_img"])
    xs, ys, ms, train, test = [], [], [], [], []
    for i, row in enumerate(r for r in rows if r.strip()):
        dom, cls, split, *feats = row.split(",")
        ms.append(int(dom))
        ys.append(int(cls))
        xs.append([float(v) for v in feats])
        (train if split == "train" else test).append(i)
    return SyntheticTask(
        K=K, D=D, sigma=float(meta["sigma"]), prototypes=np.full((K, d_img), np.nan),
        domain_offsets=np.full((D, d_img), np.nan), x=np.array(xs),
        y=np.array(ys, dtype=np.intp), m=np.array(ms, dtype=np.intp),
        train_idx=np.array(train, dtype=np.intp), test_idx=np.array(test, dtype=np.intp),
    )

"""Experiment configuration, presets and validation.

Config files are flat JSON objects whose keys are ``ExperimentConfig`` field
names. Values keep their JSON types; unknown keys are rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError

STRATEGIES = ("fedpgp", "promptfl", "local_only", "zero_shot", "full_rank", "no_positive", "no_negative")
PARTITIONS = ("pathological", "dirichlet", "iid", "domain")
PROTOCOLS = ("base_to_novel", "personalization", "leave_one_domain_out")


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: str = "fedpgp"
    # federation
    N: int = 5
    T: int = 25
    E: int = 2
    participation_rate: float = 1.0
    batch_size: int = 32
    # optimisation
    eta: float = 1.0
    mu: float = 1.0
    tau_cls: float = 0.05
    tau_con: float = 1.0
    b: int = 8
    prompt_init_scale: float = 0.02
    freeze_adapter: bool = False
    pos_sign: float = 1.0
    zc_mode: str = "per_class"
    # frozen encoders
    M: int = 16
    d_token: int = 32
    d_feat: int = 32
    d_img: int = 16
    hidden: int = 48
    class_std: float = 8.0
    template_std: float = 2.0
    # synthetic task
    K: int = 10
    D: int = 1
    n_per_class: int = 40
    sigma: float = 0.3
    context_gap: float = 0.6
    domain_scale: float = 0.0  # 0 selects the automatic scale
    shots: int = 0  # 0 keeps every training sample
    # heterogeneity and evaluation
    partition: str = "pathological"
    alpha: float = 0.3
    protocol: str = "base_to_novel"
    target_domain: int = 0
    eval_stride: int = 1
    # orchestration
    seeds: tuple[int, ...] = (0,)
    out: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_updates(self, **kw) -> "ExperimentConfig":
        return validate(replace(self, **kw))


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = FIELD_TYPES[key]
    try:
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError
            out = float(value)
            if not math.isfinite(out):
                raise ValueError
            return out
        if kind == "bool":
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes"):
                    return True
                if value.lower() in ("0", "false", "no"):
                    return False
                raise ValueError
            if isinstance(value, bool):
                return value
            raise ValueError
        if kind == "str":
            if not isinstance(value, str):
                raise ValueError
            return value
        if kind == "tuple[int, ...]":
            if isinstance(value, str):
                value = [v for v in value.replace(";", ",").split(",") if v.strip()]
            if isinstance(value, int):
                value = [value]
            return tuple(_coerce_int(v) for v in value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(key, f"cannot interpret {value!r} as {kind}")


def _coerce_int(v) -> int:
    if isinstance(v, bool):
        raise ValueError
    if isinstance(v, str):
        return int(v.strip())
    if isinstance(v, float) and not v.is_integer():
        raise ValueError
    return int(v)


def _parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in FIELD_TYPES:
        raise ConfigError(key, "unknown config key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if FIELD_TYPES[key] == "str" and not isinstance(value, str):
        value = raw
    return key, value


def from_mapping(values: dict[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    updates = {}
    for key, value in values.items():
        if key not in FIELD_TYPES:
            raise ConfigError(key, "unknown config key")
        updates[key] = _coerce(key, value)
    return validate(replace(base, **updates))


def parse_config(path: str | Path | None = None, *, preset: str | None = None,
                 overrides: list[str] | None = None) -> ExperimentConfig:
    """Preset, then file values, then ``key=value`` overrides; validated last."""
    cfg = get_preset(preset) if preset else ExperimentConfig()
    values: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("<file>", "config file must hold a JSON object")
        values.update(loaded)
    for text in overrides or []:
        key, value = _parse_override(text)
        values[key] = value
    return from_mapping(values, cfg)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(ok: bool, key: str, msg: str) -> None:
        if not ok:
            raise ConfigError(key, msg)

    need(cfg.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
    need(cfg.partition in PARTITIONS, "partition", f"must be one of {PARTITIONS}")
    need(cfg.protocol in PROTOCOLS, "protocol", f"must be one of {PROTOCOLS}")
    need(cfg.zc_mode in ("per_class", "class_mean"), "zc_mode", "must be per_class or class_mean")
    for key in ("N", "T", "E", "batch_size", "M", "d_token", "d_feat", "d_img", "hidden",
                "n_per_class", "eval_stride"):
        need(getattr(cfg, key) >= 1, key, "must be >= 1")
    need(0 < cfg.participation_rate <= 1, "participation_rate", "must lie in (0, 1]")
    need(cfg.eta > 0, "eta", "must be > 0")
    need(cfg.mu >= 0, "mu", "must be >= 0")
    need(cfg.tau_cls > 0, "tau_cls", "must be > 0")
    need(cfg.tau_con > 0, "tau_con", "must be > 0")
    need(1 <= cfg.b <= min(cfg.d_token, cfg.M), "b", f"must lie in [1, {min(cfg.d_token, cfg.M)}]")
    need(cfg.prompt_init_scale > 0, "prompt_init_scale", "must be > 0")
    need(cfg.pos_sign in (1.0, -1.0), "pos_sign", "must be 1 or -1")
    need(cfg.class_std > 0, "class_std", "must be > 0")
    need(cfg.template_std > 0, "template_std", "must be > 0")
    need(cfg.K >= 2, "K", "must be >= 2")
    need(cfg.D >= 1, "D", "must be >= 1")
    need(cfg.sigma >= 0, "sigma", "must be >= 0")
    need(cfg.context_gap >= 0, "context_gap", "must be >= 0")
    need(cfg.domain_scale >= 0, "domain_scale", "must be >= 0")
    need(cfg.shots >= 0, "shots", "must be >= 0")
    need(cfg.alpha > 0, "alpha", "must be > 0")
    need(len(cfg.seeds) >= 1, "seeds", "need at least one seed")
    need(len(set(cfg.seeds)) == len(cfg.seeds), "seeds", "seeds must be distinct")

    if cfg.protocol == "leave_one_domain_out":
        need(cfg.partition == "domain", "partition", "leave_one_domain_out requires partition=domain")
        need(cfg.D >= 2, "D", "leave_one_domain_out needs at least two domains")
        need(0 <= cfg.target_domain < cfg.D, "target_domain", f"must lie in [0, {cfg.D})")
        need(cfg.N == cfg.D - 1, "N", f"must equal D - 1 = {cfg.D - 1} for leave_one_domain_out")
    else:
        need(cfg.partition != "domain", "partition", "partition=domain requires leave_one_domain_out")
    if cfg.protocol == "base_to_novel":
        n_base = math.ceil(cfg.K / 2)
        if cfg.partition == "pathological":
            need(cfg.N <= n_base, "N", f"pathological split needs N <= {n_base} base classes")
    elif cfg.partition == "pathological":
        need(cfg.N <= cfg.K, "N", f"pathological split needs N <= K={cfg.K}")
    return cfg


PRESETS: dict[str, dict[str, Any]] = {
    # pathological non-IID, 10 clients, full participation
    "pathological-10": dict(N=10, E=2, T=25, participation_rate=1.0, K=40,
                            partition="pathological", protocol="base_to_novel"),
    # 100 clients, Dirichlet(0.3) label skew, 10% participation
    "dirichlet-100": dict(N=100, E=1, T=150, participation_rate=0.1, alpha=0.3, K=10, n_per_class=400,
                          partition="dirichlet", protocol="personalization"),
    # four domains, one held out, three clients
    "domain-4": dict(N=3, E=2, T=25, participation_rate=1.0, D=4, K=10,
                     partition="domain", protocol="leave_one_domain_out"),
    # six domains, one held out, five clients
    "domain-6": dict(N=5, E=2, T=25, participation_rate=1.0, D=6, K=10,
                     partition="domain", protocol="leave_one_domain_out"),
}


def get_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return from_mapping(PRESETS[name])

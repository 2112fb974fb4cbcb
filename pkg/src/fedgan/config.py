"""Run and experiment configuration: JSON in, validated dataclasses out."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .adversary import ATTACK_KINDS, AttackSpec
from .aggregation import AggregatorKind
from .errors import AggregationError, ConfigError, TopologyError
from .topology import FluId, SyncId, parse_node

ARCHS = ("MULTI_FLGAN", "FLGAN", "AFLGAN")
PLAN_KINDS = ("client_sweep", "learning_curve", "attack", "single")
DEFAULT_CLIENT_COUNTS = (2, 3, 5, 10, 20)


def _int(path, v, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(path, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(path, f"must be >= {lo}, got {v}")
    return v


def _num(path, v, lo=None, strict=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    v = float(v)
    if lo is not None and (v <= lo if strict else v < lo):
        raise ConfigError(path, f"must be {'>' if strict else '>='} {lo}, got {v}")
    return v


def _bool(path, v):
    if not isinstance(v, bool):
        raise ConfigError(path, f"expected true/false, got {v!r}")
    return v


def _choice(path, v, options):
    if v not in options:
        raise ConfigError(path, f"must be one of {list(options)}, got {v!r}")
    return v


def _int_list(path, v, lo=None):
    if not isinstance(v, list) or not v:
        raise ConfigError(path, "expected a nonempty list")
    return [_int(f"{path}[{i}]", x, lo) for i, x in enumerate(v)]


def _reject_unknown(path, d, allowed):
    if not isinstance(d, dict):
        raise ConfigError(path or "<root>", "expected a JSON object")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown key")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "ring"
    k: int = 8
    ring_radius: float = 0.8
    sigma: float = 0.05
    n_total: int = 20000
    train_size: int = 5000
    partition: str = "label_skew"
    skew_alpha: float = 0.5
    image_path: str | None = None
    label_path: str | None = None
    image_side: int = 8

    @classmethod
    def from_dict(cls, d, path="dataset") -> "DatasetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        _reject_unknown(path, d, names)
        out = dict(d)
        if "kind" in d:
            _choice(f"{path}.kind", d["kind"], ("ring", "idx"))
        for key in ("k", "n_total", "train_size", "image_side"):
            if key in d:
                out[key] = _int(f"{path}.{key}", d[key], 1)
        for key in ("ring_radius", "sigma", "skew_alpha"):
            if key in d:
                out[key] = _num(f"{path}.{key}", d[key], 0.0, strict=True)
        if "partition" in d:
            _choice(f"{path}.partition", d["partition"], ("label_skew", "fractions"))
        c = cls(**out)
        if c.kind == "ring" and c.train_size > c.n_total:
            raise ConfigError(f"{path}.train_size", "larger than n_total")
        if c.kind == "idx" and not (c.image_path and c.label_path):
            raise ConfigError(f"{path}.image_path", "idx datasets need image_path and label_path")
        return c

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class FaultEvent:
    at_round: int
    target: str  # "G1D2", "G1", "D2" or "client:3"
    kind: str = "drop"

    def parsed_target(self):
        if self.target.startswith("client:"):
            return int(self.target.split(":", 1)[1])
        return parse_node(self.target)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RunConfig:
    arch: str
    N: int
    X: int = 2
    Y: int = 2
    seed: int = 0
    epochs: int = 100
    alpha: float = 2e-4
    lr_scaling: bool = True
    lr_cap: float | None = 0.05
    weight_decay: float = 1.5e-8
    aggregator: str = "fedavg"
    weighted_fedavg: bool = False
    batch_size: int = 64
    z_dim: int = 8
    gen_hidden: tuple = (64, 64)
    disc_hidden: tuple = (64, 64)
    gen_loss: str = "non_saturating"
    local_steps: int = 1
    metric_every: int = 10
    eval_samples: int = 1000
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    attack: AttackSpec | None = None
    faults: tuple = ()

    @property
    def aggregator_kind(self) -> AggregatorKind:
        return AggregatorKind.parse(self.aggregator)

    @property
    def effective_lr(self) -> float:
        lr = self.alpha * self.N if self.lr_scaling else self.alpha
        if self.lr_scaling and self.lr_cap is not None:
            lr = min(lr, self.lr_cap)
        return lr

    @property
    def run_id(self) -> str:
        return f"{self.arch}-N{self.N}-X{self.X}Y{self.Y}-s{self.seed}"

    @classmethod
    def from_dict(cls, d: dict, path: str = "") -> "RunConfig":
        p = (lambda k: f"{path}.{k}" if path else k)
        names = {f.name for f in dataclasses.fields(cls)}
        _reject_unknown(path, d, names)
        for req in ("arch", "N"):
            if req not in d:
                raise ConfigError(p(req), "required key missing")
        kw: dict = {}
        kw["arch"] = _choice(p("arch"), d["arch"], ARCHS)
        kw["N"] = _int(p("N"), d["N"], 1)
        for key in ("X", "Y", "epochs", "batch_size", "z_dim", "local_steps", "metric_every", "eval_samples"):
            if key in d:
                kw[key] = _int(p(key), d[key], 1)
        if "seed" in d:
            kw["seed"] = _int(p("seed"), d["seed"], 0)
        if "alpha" in d:
            kw["alpha"] = _num(p("alpha"), d["alpha"], 0.0)
        if "weight_decay" in d:
            kw["weight_decay"] = _num(p("weight_decay"), d["weight_decay"], 0.0)
        if "lr_cap" in d:
            kw["lr_cap"] = None if d["lr_cap"] is None else _num(p("lr_cap"), d["lr_cap"], 0.0, strict=True)
        for key in ("lr_scaling", "weighted_fedavg"):
            if key in d:
                kw[key] = _bool(p(key), d[key])
        if "aggregator" in d:
            try:
                kw["aggregator"] = str(AggregatorKind.parse(str(d["aggregator"])))
            except AggregationError as e:
                raise ConfigError(p("aggregator"), str(e)) from None
        if "gen_loss" in d:
            kw["gen_loss"] = _choice(p("gen_loss"), d["gen_loss"], ("non_saturating", "minimax"))
        for key in ("gen_hidden", "disc_hidden"):
            if key in d:
                kw[key] = tuple(_int_list(p(key), d[key], 1))
        if "dataset" in d:
            kw["dataset"] = DatasetConfig.from_dict(d["dataset"], p("dataset"))
        if "z_dim" not in d and kw.get("dataset", DatasetConfig()).kind == "idx":
            kw["z_dim"] = 100
        if kw["arch"] != "MULTI_FLGAN":
            kw["X"] = kw["Y"] = 1
        if d.get("attack") is not None:
            kw["attack"] = _attack_from_dict(d["attack"], p("attack"), kw["N"])
        if "faults" in d:
            kw["faults"] = tuple(_fault_from_dict(f, f"{p('faults')}[{i}]", kw)
                                 for i, f in enumerate(_list(p("faults"), d["faults"])))
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "dataset":
                v = v.to_dict()
            elif f.name == "attack":
                v = None if v is None else v.to_dict()
            elif f.name == "faults":
                v = [e.to_dict() for e in v]
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)


def _list(path, v):
    if not isinstance(v, list):
        raise ConfigError(path, "expected a list")
    return v


def _attack_from_dict(d, path, n_clients) -> AttackSpec:
    _reject_unknown(path, d, {"kind", "malicious_clients", "poison_mean", "poison_std", "start_round"})
    if "kind" not in d:
        raise ConfigError(f"{path}.kind", "required key missing")
    kind = _choice(f"{path}.kind", d["kind"], ATTACK_KINDS)
    bad = _int_list(f"{path}.malicious_clients", d.get("malicious_clients", []), 0)
    for c in bad:
        if c >= n_clients:
            raise ConfigError(f"{path}.malicious_clients", f"client {c} does not exist (N={n_clients})")
    if 2 * len(set(bad)) >= n_clients:
        raise ConfigError(f"{path}.malicious_clients", "malicious clients must be a strict minority")
    return AttackSpec(
        kind, frozenset(bad),
        _num(f"{path}.poison_mean", d.get("poison_mean", 0.0)),
        _num(f"{path}.poison_std", d.get("poison_std", 1.0), 0.0),
        _int(f"{path}.start_round", d.get("start_round", 1), 1),
    )


def _fault_from_dict(d, path, kw) -> FaultEvent:
    _reject_unknown(path, d, {"at_round", "target", "kind"})
    for req in ("at_round", "target"):
        if req not in d:
            raise ConfigError(f"{path}.{req}", "required key missing")
    ev = FaultEvent(_int(f"{path}.at_round", d["at_round"], 1), str(d["target"]),
                    _choice(f"{path}.kind", d.get("kind", "drop"), ("drop",)))
    try:
        target = ev.parsed_target()
    except (TopologyError, ValueError) as e:
        raise ConfigError(f"{path}.target", str(e)) from None
    X, Y = kw.get("X", 2), kw.get("Y", 2)
    if isinstance(target, int):
        ok = 0 <= target < kw["N"]
    elif isinstance(target, FluId):
        ok = kw["arch"] == "MULTI_FLGAN" and 1 <= target.g <= Y and 1 <= target.d <= X
    else:
        assert isinstance(target, SyncId)
        bound = Y if target.kind == "G" else X
        ok = kw["arch"] == "MULTI_FLGAN" and 1 <= target.index <= bound
    if not ok:
        raise ConfigError(f"{path}.target", f"no such node {ev.target!r} in this run")
    return ev


@dataclass(frozen=True)
class ExperimentPlan:
    kind: str
    base: dict
    archs: tuple = ARCHS
    client_counts: tuple = DEFAULT_CLIENT_COUNTS
    seeds: tuple = (0,)
    epochs: int = 100
    metric_every: int = 10
    dataset_name: str = "ring8"
    out: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        names = {f.name for f in dataclasses.fields(cls)}
        _reject_unknown("", d, names)
        kw: dict = {"kind": _choice("kind", d.get("kind"), PLAN_KINDS)}
        base = d.get("base", {})
        _reject_unknown("base", base, {f.name for f in dataclasses.fields(RunConfig)} - {"arch", "N", "seed", "epochs", "metric_every"})
        kw["base"] = base
        if "archs" in d:
            archs = _list("archs", d["archs"])
            if not archs:
                raise ConfigError("archs", "expected a nonempty list")
            kw["archs"] = tuple(_choice(f"archs[{i}]", a, ARCHS) for i, a in enumerate(archs))
        if "client_counts" in d:
            kw["client_counts"] = tuple(_int_list("client_counts", d["client_counts"], 1))
        if "seeds" in d:
            kw["seeds"] = tuple(_int_list("seeds", d["seeds"], 0))
        for key in ("epochs", "metric_every"):
            if key in d:
                kw[key] = _int(key, d[key], 1)
        for key in ("dataset_name", "out"):
            if key in d and d[key] is not None:
                kw[key] = str(d[key])
        plan = cls(**kw)
        for cfg in plan.run_configs():  # validates every combination up front
            pass
        return plan

    def run_configs(self) -> list[RunConfig]:
        out = []
        for arch in self.archs:
            for n in self.client_counts:
                for seed in self.seeds:
                    d = dict(self.base)
                    d.update(arch=arch, N=n, seed=seed, epochs=self.epochs, metric_every=self.metric_every)
                    try:
                        out.append(RunConfig.from_dict(d))
                    except ConfigError as e:
                        raise ConfigError(f"base.{e.field}", str(e).split(": ", 1)[-1]) from None
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("archs", "client_counts", "seeds"):
            d[k] = list(d[k])
        return d


def config_from_dict(d: dict):
    if not isinstance(d, dict):
        raise ConfigError("<root>", "expected a JSON object")
    if "kind" in d:
        return ExperimentPlan.from_dict(d)
    return RunConfig.from_dict(d)


def load_config(path):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("<root>", f"invalid JSON: {e}") from None
    return config_from_dict(d)


def dumps_config(cfg) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"


def save_config(cfg, path) -> None:
    Path(path).write_text(dumps_config(cfg))

"""Experiment configuration: a YAML document validated against a fixed
schema before anything runs. Errors carry the line of the offending key."""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .gan import TrainConfig
from .nn import ACTIVATIONS, DEFAULT_LEAKY_SLOPE, PRESETS
from .protocol import ProtocolError, policy_from_dict
from .strategies import KINDS, Seeds, StrategyConfig, StrategyError


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        loc = f"{source}:{line}" if line is not None else source
        super().__init__(f"{loc}: {message}")


# A schema maps key -> (checker, default). ``REQUIRED`` marks keys without defaults.
REQUIRED = object()


def _int(lo=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int):
            return "must be an integer"
        if lo is not None and v < lo:
            return f"must be >= {lo}"
    return check


def _num(positive=False, nonneg=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return "must be a number"
        if positive and not v > 0:
            return "must be positive"
        if nonneg and v < 0:
            return "must be non-negative"
    return check


def _choice(*opts):
    def check(v):
        if v not in opts:
            return f"must be one of {list(opts)}"
    return check


def _str(v):
    if not isinstance(v, str):
        return "must be a string"


def _bool(v):
    if not isinstance(v, bool):
        return "must be true or false"


def _opt(check):
    return lambda v: None if v is None else check(v)


def _groups(v):
    if not isinstance(v, list) or not v or not all(isinstance(g, list) and g for g in v):
        return "must be a non-empty list of non-empty label lists"
    if not all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for g in v for x in g):
        return "labels must be non-negative integers"


def _layers(v):
    if not isinstance(v, list) or not v or not all(isinstance(d, dict) for d in v):
        return "must be a list of layer mappings"


def _baseline_on(v):
    if v == "all":
        return None
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        return "must be 'all' or a user index"


SCHEMA: dict[str, Any] = {
    "name": (_str, "experiment"),
    "output": (_opt(_str), None),
    "workers": (_opt(_int(1)), None),  # None: one per user, capped at CPU count
    "report_wall_clock": (_bool, False),
    "seeds": {
        "data": (_int(0), 0),
        "init": (_int(0), 0),
        "train": (_int(0), 0),
    },
    "dataset": {
        "kind": (_choice("ring", "gauss1d", "idx"), REQUIRED),
        "modes": (_int(1), 8),
        "radius": (_num(nonneg=True), 2.0),
        "sigma": (_num(positive=True), 0.05),
        "per_mode": (_int(1), 64),
        "mean": (_num(), 4.0),
        "std": (_num(positive=True), 0.5),
        "n": (_int(1), 512),
        "images": (_opt(_str), None),
        "labels": (_opt(_str), None),
        "limit": (_opt(_int(1)), None),
    },
    "partition": {
        "scheme": (_choice("by_label", "shard"), REQUIRED),
        "groups": (_opt(_groups), None),
        "shared": (_choice("error", "split"), "error"),
        "users": (_opt(_int(1)), None),
        "seed": (_opt(_int(0)), None),
    },
    "strategy": {
        "kind": (_choice(*KINDS), REQUIRED),
        "epochs": (_int(0), REQUIRED),
        "batch_real": (_int(1), 256),
        "batch_fake": (_int(1), 256),
        "lr_d": (_num(positive=True), 0.05),
        "lr_g": (_num(positive=True), 0.05),
        "d_steps_per_g_step": (_int(1), 1),
        "g_steps": (_int(1), 1),
        "fake_refresh": (_int(1), 1),
        "upload_fraction": (_num(positive=True), 1.0),
        "lr_server": (_opt(_num(positive=True)), None),
        "baseline_on": (_baseline_on, "all"),
        "policy": {
            "kind": (_choice("max_magnitude", "threshold", "random_fraction"), "max_magnitude"),
            "tau": (_opt(_num(positive=True)), None),
            "fraction": (_opt(_num(positive=True)), None),
            "seed": (_int(0), 0),
        },
    },
    "networks": {
        "preset": (_choice(*PRESETS), "ring"),
        "hidden": (_opt(_int(1)), None),
        "generator_hidden": (_opt(_int(1)), None),
        "discriminator_hidden": (_opt(_int(1)), None),
        "noise_dim": (_opt(_int(1)), None),
        "noise": (_choice("normal", "uniform"), "normal"),
        "leaky_slope": (_num(positive=True), DEFAULT_LEAKY_SLOPE),
        "generator_hidden_activation": (_opt(_choice(*ACTIVATIONS)), None),
        "generator_final_activation": (_opt(_choice(*ACTIVATIONS)), None),
        "generator": (_opt(_layers), None),
        "discriminator": (_opt(_layers), None),
    },
    "evaluation": {
        "samples": (_int(1), 2000),
        "threshold_count": (_int(1), 20),
        "every": (_opt(_int(1)), None),
    },
    "assert": {
        "min_covered_modes": (_opt(_int(0)), None),
        "max_covered_modes": (_opt(_int(0)), None),
        "min_quality": (_opt(_num(nonneg=True)), None),
    },
}


def _key_lines(node, path=(), out=None) -> dict[tuple, int]:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = k.start_mark.line + 1
            _key_lines(v, key, out)
    return out


def _validate(doc: dict, schema: dict, path: tuple, lines: dict, source: str) -> dict:
    where = ".".join(path) if path else "top level"
    parent_line = lines.get(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a mapping", parent_line, source)
    unknown = [k for k in doc if k not in schema]
    if unknown:
        k = unknown[0]
        raise ConfigError(f"unknown key {k!r} in {where}; allowed: {sorted(schema)}", lines.get(path + (k,)), source)
    out = {}
    for key, rule in schema.items():
        here = path + (key,)
        if isinstance(rule, dict):
            out[key] = _validate(doc.get(key) or {}, rule, here, lines, source)
            continue
        check, default = rule
        if key not in doc:
            if default is REQUIRED:
                raise ConfigError(f"missing required key {'.'.join(here)!r}", parent_line, source)
            out[key] = copy.deepcopy(default)
            continue
        problem = check(doc[key])
        if problem:
            raise ConfigError(f"{'.'.join(here)} {problem} (got {doc[key]!r})", lines.get(here), source)
        out[key] = doc[key]
    return out


@dataclass
class ExperimentConfig:
    raw: dict  # fully resolved document (defaults filled in)
    source: str = "<config>"
    lines: dict | None = None

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seeds(self) -> Seeds:
        s = self.raw["seeds"]
        return Seeds(s["data"], s["init"], s["train"])

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["seeds"] = {"data": seed, "init": seed, "train": seed}
        return ExperimentConfig(raw, self.source, self.lines)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        for k, v in kw.items():
            if v is not None:
                raw[k] = v
        return ExperimentConfig(raw, self.source, self.lines)

    def train_config(self) -> TrainConfig:
        s = self.raw["strategy"]
        return TrainConfig(s["batch_real"], s["batch_fake"], float(s["lr_d"]), float(s["lr_g"]), s["d_steps_per_g_step"])

    def strategy_config(self, users: int) -> StrategyConfig:
        s = self.raw["strategy"]
        policy = None
        if s["kind"] == "federated":
            try:
                policy = policy_from_dict(s["policy"])
            except (KeyError, TypeError, ProtocolError) as exc:
                raise ConfigError(f"invalid strategy.policy: {exc}", self._line("strategy", "policy"), self.source)
        try:
            return StrategyConfig(
                kind=s["kind"], epochs=s["epochs"], users=users, gan=self.train_config(), policy=policy,
                fake_refresh=s["fake_refresh"], g_steps=s["g_steps"], upload_fraction=float(s["upload_fraction"]),
                lr_server=s["lr_server"], workers=self.workers(users),
            )
        except (StrategyError, ValueError) as exc:
            raise ConfigError(str(exc), self._line("strategy"), self.source)

    def workers(self, users: int) -> int:
        w = self.raw["workers"]
        return w if w is not None else max(1, min(users, os.cpu_count() or 1))

    def _line(self, *path):
        return (self.lines or {}).get(tuple(path))

    def echo(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False, default_flow_style=None)

    def check_semantics(self) -> None:
        """Cross-field rules the per-key schema cannot express."""
        d, p, s = self.raw["dataset"], self.raw["partition"], self.raw["strategy"]
        if d["kind"] == "idx" and not d["images"]:
            raise ConfigError("dataset.images is required for kind 'idx'", self._line("dataset", "kind"), self.source)
        if p["scheme"] == "by_label" and not p["groups"]:
            raise ConfigError("partition.groups is required for scheme 'by_label'", self._line("partition", "scheme"), self.source)
        if p["scheme"] == "shard" and not p["users"]:
            raise ConfigError("partition.users is required for scheme 'shard'", self._line("partition", "scheme"), self.source)
        if s["upload_fraction"] > 1:
            raise ConfigError("strategy.upload_fraction must lie in (0, 1]", self._line("strategy", "upload_fraction"), self.source)
        if s["kind"] == "federated":
            pol = s["policy"]
            if pol["kind"] == "threshold" and pol["tau"] is None:
                raise ConfigError("threshold policy needs tau", self._line("strategy", "policy", "kind"), self.source)
            if pol["kind"] == "random_fraction" and (pol["fraction"] is None or pol["fraction"] > 1):
                raise ConfigError("random_fraction policy needs fraction in (0, 1]",
                                  self._line("strategy", "policy", "kind"), self.source)
        users = self.user_count()
        if s["kind"] == "federated" and users < 2:
            raise ConfigError("federated strategy needs at least two users", self._line("partition"), self.source)
        b = s["baseline_on"]
        if b != "all" and b >= users:
            raise ConfigError(f"strategy.baseline_on names user {b} but there are {users}",
                              self._line("strategy", "baseline_on"), self.source)

    def user_count(self) -> int:
        p = self.raw["partition"]
        return len(p["groups"]) if p["scheme"] == "by_label" else p["users"]


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        doc = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from None
    if doc is None:
        doc = {}
    lines = _key_lines(node) if node is not None else {}
    raw = _validate(doc, SCHEMA, (), lines, source)
    cfg = ExperimentConfig(raw, source, lines)
    cfg.check_semantics()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    return parse_config(text, str(path))


def bundled_config(name: str) -> Path:
    """Path of a config shipped inside the package (``configs/<name>.yaml``)."""
    return Path(__file__).with_name("configs") / f"{name}.yaml"

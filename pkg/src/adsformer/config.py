"""Run configuration: flat ``section.key=value`` text.

Every key has a declared type and default. ``load_config`` applies a file
and then command-line overrides on top of the defaults; ``format_config``
writes the fully resolved result, which parses back to the same values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .pretrain.air import AirConfig
from .pretrain.skipgram import SkipGramConfig
from .sequences import GeneratorConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class Field:
    kind: str  # int, float, bool, str, ints, strs, dims, plus a trailing "?" for optional
    default: Any


def _parse(kind: str, text: str) -> Any:
    text = text.strip()
    if kind.endswith("?"):
        if text.lower() in ("", "none"):
            return None
        kind = kind[:-1]
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "str":
        return text
    if kind == "ints":
        return tuple(int(v) for v in text.split(",") if v.strip()) if text.lower() != "none" else ()
    if kind == "strs":
        return tuple(v.strip() for v in text.split(",") if v.strip())
    if kind == "dims":
        out = {}
        for item in text.split(","):
            if item.strip():
                k, _, v = item.partition(":")
                out[k.strip()] = int(v)
        return out
    raise ValueError(f"unknown field kind {kind!r}")


def _format(kind: str, value: Any) -> str:
    if value is None:
        return "none"
    kind = kind.rstrip("?")
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "strs"):
        return ",".join(str(v) for v in value)
    if kind == "dims":
        return ",".join(f"{k}:{v}" for k, v in value.items())
    return str(value)


def _ranker_fields(**overrides) -> dict[str, Field]:
    fields = {
        "components": Field("ints", (1, 2, 3)),
        "pooling_mode": Field("str", "max"),
        "pretrained_flavors": Field("strs", ("air",)),
        "component3_dims": Field("dims", {"listing": 32, "shop": 16, "taxonomy": 8}),
        "component3_actions": Field("strs", ("favorite", "cart_add", "purchase")),
        "num_heads": Field("int", 3),
        "d1": Field("int", 32),
        "head_dim": Field("int?", None),
        "num_blocks": Field("int", 1),
        "dropout": Field("float", 0.0),
        "max_len": Field("int?", None),
        "num_cross": Field("int?", None),
        "deep_sizes": Field("ints", ()),
        "width_divisor": Field("float?", None),
        "topology": Field("str", "parallel"),
        "epochs": Field("int", 1),
        "batch_size": Field("int", 256),
        "lr_max": Field("float", 0.002),
        "max_steps": Field("int?", None),
        "sampling": Field("str", "balanced_50_50"),
    }
    for k, v in overrides.items():
        fields[k] = Field(fields[k].kind, v)
    return fields


def _dataclass_fields(cls, **extra: Field) -> dict[str, Field]:
    kinds = {int: "int", float: "float", bool: "bool", str: "str", "int": "int", "float": "float",
             "bool": "bool", "str": "str", "int | None": "int?"}
    out = {}
    for f in dataclasses.fields(cls):
        out[f.name] = Field(kinds[f.type], f.default)
    out.update(extra)
    return out


SCHEMA: dict[str, dict[str, Field]] = {
    "run": {"seed": Field("int", 0), "out_dir": Field("str", "runs")},
    "data": _dataclass_fields(GeneratorConfig, n_train=Field("int", 120_000), n_valid=Field("int", 40_000)),
    "vocab": {"k_listing": Field("int?", None), "k_shop": Field("int?", None),
              "k_taxonomy": Field("int?", None), "num_oov": Field("int", 1)},
    "skipgram": _dataclass_fields(SkipGramConfig),
    "air": _dataclass_fields(AirConfig, n_pairs=Field("int", 20_000), neighbors=Field("int", 5),
                             nuisance=Field("float", 2.5)),
    "ctr": _ranker_fields(),
    "pccvr": _ranker_fields(pretrained_flavors=("skipgram", "visual"), num_heads=2, epochs=2),
    "calibrate": {"tol": Field("float", 1e-8), "max_iter": Field("int", 100)},
    "ablate": {
        "task": Field("str", "ctr"),
        "seeds": Field("ints", (0, 1, 2, 3, 4)),
        "grid": Field("str", "default"),
        "workers": Field("int", 1),
        **_ranker_fields(pretrained_flavors=("skipgram",), component3_dims={"listing": 8, "shop": 8, "taxonomy": 4},
                         num_heads=2, d1=16, num_cross=2, sampling="none"),
    },
}


class Config:
    """Resolved values for every section; read with ``cfg["ctr"]["lr_max"]``."""

    def __init__(self, values: Mapping[str, Mapping[str, Any]] | None = None):
        self.values = {s: {k: f.default for k, f in fields.items()} for s, fields in SCHEMA.items()}
        for section, kv in (values or {}).items():
            for key, value in kv.items():
                self.set(section, key, value)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = value

    def apply_line(self, line: str, where: str = "<override>") -> None:
        name, eq, text = line.partition("=")
        section, dot, key = name.strip().partition(".")
        if not eq or not dot:
            raise ConfigError(f"{where}: expected section.key=value, got {line!r}")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown config key {name.strip()!r}")
        try:
            value = _parse(SCHEMA[section][key].kind, text)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {name.strip()}: {exc}") from None
        self.values[section][key] = value

    # -- typed views ------------------------------------------------------
    def generator(self) -> GeneratorConfig:
        d = self["data"]
        return GeneratorConfig(**{f.name: d[f.name] for f in dataclasses.fields(GeneratorConfig)})

    def skipgram(self) -> SkipGramConfig:
        return SkipGramConfig(**self["skipgram"])

    def air(self) -> AirConfig:
        a = self["air"]
        return AirConfig(**{f.name: a[f.name] for f in dataclasses.fields(AirConfig)})

    def vocab_k(self) -> dict[str, int]:
        v = self["vocab"]
        return {k: v[f"k_{k}"] for k in ("listing", "shop", "taxonomy") if v[f"k_{k}"] is not None}

    def ranker_params(self, section: str) -> dict[str, Any]:
        """Keyword arguments for ``AdsformerRanker`` from a ranker-shaped section."""
        s = self[section]
        params = {k: s[k] for k in _ranker_fields()}
        params["deep_sizes"] = params["deep_sizes"] or None
        params["task"] = s.get("task", section)
        params["vocab_k"] = self.vocab_k() or None
        params["num_oov"] = self["vocab"]["num_oov"]
        params["random_state"] = self["run"]["seed"]
        return params

    def validate(self) -> None:
        """Cross-field checks that do not need data."""
        from .estimators import AdsformerRanker
        from .pretrain.skipgram import MODES

        try:
            self.generator()
            self.skipgram().validate()
            self.air().validate()
            for section in ("ctr", "pccvr", "ablate"):
                AdsformerRanker(**self.ranker_params(section)).preflight_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self["skipgram"]["mode"] not in MODES:
            raise ConfigError(f"skipgram.mode must be one of {MODES}")
        if self["ablate"]["task"] not in ("ctr", "pccvr"):
            raise ConfigError("ablate.task must be ctr or pccvr")
        if not self["ablate"]["seeds"]:
            raise ConfigError("ablate.seeds must list at least one seed")
        if self["data"]["n_train"] < 1 or self["data"]["n_valid"] < 1:
            raise ConfigError("data.n_train and data.n_valid must be positive")
        if self["ablate"]["workers"] < 1:
            raise ConfigError("ablate.workers must be at least 1")


def parse_lines(lines: Iterable[str], cfg: Config | None = None, where: str = "<config>") -> Config:
    cfg = cfg or Config()
    seen: set[str] = set()
    for n, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        name = line.partition("=")[0].strip()
        if name in seen:
            raise ConfigError(f"{where}:{n}: duplicate key {name}")
        seen.add(name)
        cfg.apply_line(line, f"{where}:{n}")
    return cfg


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> Config:
    cfg = Config()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        parse_lines(text.splitlines(), cfg, str(path))
    for item in overrides:
        cfg.apply_line(item)
    return cfg


def format_config(cfg: Config) -> str:
    lines = []
    for section, fields in SCHEMA.items():
        for key, f in fields.items():
            lines.append(f"{section}.{key}={_format(f.kind, cfg[section][key])}")
    return "\n".join(lines) + "\n"

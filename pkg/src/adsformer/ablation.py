"""Ablation harness: train every variant on every seed and report lifts over the baseline."""

from __future__ import annotations

import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .embeddings import PretrainedBundle
from .estimators import AdsformerRanker, RankingDataset
from .metrics import MetricReport

BASELINE = "baseline"
VOCAB_KEYS = ("k_listing", "k_shop", "k_taxonomy")
RECORD_FIELDS = ("variant", "seed", "roc_auc", "pr_auc", "ece", "nce", "lift_roc", "lift_pr")


@dataclass(frozen=True)
class Variant:
    name: str
    params: Mapping[str, Any] = field(default_factory=dict)


def default_grid() -> list[Variant]:
    """Baseline, every non-empty component subset with max pooling, and ADPM-3 with average pooling."""
    return [
        Variant(BASELINE, {"components": ()}),
        Variant("comp1", {"components": (1,)}),
        Variant("comp2", {"components": (2,)}),
        Variant("comp3", {"components": (3,)}),
        Variant("comp1+2", {"components": (1, 2)}),
        Variant("comp1+3", {"components": (1, 3)}),
        Variant("comp2+3", {"components": (2, 3)}),
        Variant("adpm3_max", {"components": (1, 2, 3), "pooling_mode": "max"}),
        Variant("adpm3_avg", {"components": (1, 2, 3), "pooling_mode": "avg"}),
    ]


def parse_grid(lines: Iterable[str]) -> list[Variant]:
    """Grid file: ``name.param=value`` lines; variants keep first-appearance order.

    ``components`` takes a comma list (empty for none); list-valued params
    take comma lists; ``component3_dims`` takes ``kind:dim`` pairs.
    ``k_listing``, ``k_shop`` and ``k_taxonomy`` override one vocabulary cap.
    """
    from .config import SCHEMA, ConfigError, _parse

    fields = SCHEMA["ablate"]
    order: list[str] = []
    params: dict[str, dict[str, Any]] = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        lhs, eq, text = line.partition("=")
        name, dot, key = lhs.strip().partition(".")
        if not eq or not dot or not name:
            raise ConfigError(f"grid line {n}: expected variant.param=value, got {line!r}")
        vocab_key = key in VOCAB_KEYS
        if not vocab_key and (key not in fields or key in ("task", "seeds", "grid", "workers")):
            raise ConfigError(f"grid line {n}: unknown variant parameter {key!r}")
        try:
            value = _parse("int" if vocab_key else fields[key].kind, text)
        except ValueError as exc:
            raise ConfigError(f"grid line {n}: {exc}") from None
        if vocab_key and value < 1:
            raise ConfigError(f"grid line {n}: {key} must be positive")
        if name not in params:
            order.append(name)
            params[name] = {}
        if vocab_key:
            params[name].setdefault("vocab_k", {})[key[2:]] = value
        else:
            params[name][key] = value
    if BASELINE not in params:
        raise ConfigError(f"grid must define a {BASELINE!r} variant")
    return [Variant(name, params[name]) for name in order]


@dataclass
class AblationData:
    train: RankingDataset
    valid: RankingDataset
    pretrained: PretrainedBundle | None = None


@dataclass(frozen=True)
class AblationRecord:
    variant: str
    seed: int
    roc_auc: float
    pr_auc: float
    ece: float
    nce: float
    lift_roc: float  # percent over the same-seed baseline
    lift_pr: float

    def line(self) -> str:
        return "\t".join([self.variant, str(self.seed)] + [repr(float(getattr(self, f))) for f in RECORD_FIELDS[2:]])


@dataclass
class VariantSummary:
    variant: str
    n: int
    roc_auc: float
    lift_roc: float
    lift_roc_min: float
    lift_roc_max: float
    lift_pr: float
    lift_pr_min: float
    lift_pr_max: float


@dataclass
class AblationResult:
    records: list[AblationRecord]
    variants: list[str]

    def by_variant(self, name: str) -> list[AblationRecord]:
        return [r for r in self.records if r.variant == name]

    def median(self, name: str, metric: str = "lift_roc") -> float:
        return statistics.median(getattr(r, metric) for r in self.by_variant(name))

    def summary(self) -> list[VariantSummary]:
        out = []
        for name in self.variants:
            rows = self.by_variant(name)
            lr = [r.lift_roc for r in rows]
            lp = [r.lift_pr for r in rows]
            out.append(VariantSummary(name, len(rows), statistics.median(r.roc_auc for r in rows),
                                      statistics.median(lr), min(lr), max(lr),
                                      statistics.median(lp), min(lp), max(lp)))
        return out

    def records_text(self) -> str:
        return "\n".join(["\t".join(RECORD_FIELDS)] + [r.line() for r in self.records]) + "\n"

    def summary_text(self) -> str:
        header = ("variant", "seeds", "median_roc_auc", "median_lift_roc%", "lift_roc_range%",
                  "median_lift_pr%", "lift_pr_range%")
        rows = [header]
        for s in self.summary():
            rows.append((s.variant, str(s.n), f"{s.roc_auc:.4f}", f"{s.lift_roc:+.3f}",
                         f"[{s.lift_roc_min:+.3f}, {s.lift_roc_max:+.3f}]", f"{s.lift_pr:+.3f}",
                         f"[{s.lift_pr_min:+.3f}, {s.lift_pr_max:+.3f}]"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.append("# lifts are percent changes over the same-seed baseline; medians over seeds")
        lines.append("# pr_auc is average precision (step-wise, no interpolation)")
        return "\n".join(lines) + "\n"

    def summary_json(self) -> str:
        return json.dumps([s.__dict__ for s in self.summary()], indent=2, sort_keys=True) + "\n"

    def write(self, directory: str | Path, prefix: str = "ablation") -> None:
        d = Path(directory)
        (d / f"{prefix}.records.tsv").write_text(self.records_text(), encoding="utf-8")
        (d / f"{prefix}.summary.txt").write_text(self.summary_text(), encoding="utf-8")
        (d / f"{prefix}.summary.json").write_text(self.summary_json(), encoding="utf-8")


def _lift(value: float, base: float) -> float:
    return 100.0 * (value - base) / base if base else 0.0


def _run_one(args) -> tuple[str, int, MetricReport]:
    variant, seed, base_params, data = args
    params = dict(base_params)
    params.update(variant.params)
    if "vocab_k" in variant.params:
        params["vocab_k"] = {**(base_params.get("vocab_k") or {}), **variant.params["vocab_k"]}
    params["random_state"] = seed
    params["pretrained"] = data.pretrained
    model = AdsformerRanker(**params).fit(data.train)
    return variant.name, seed, model.evaluate(data.valid)


def run_ablation(variants: Sequence[Variant], data: AblationData | Callable[[int], AblationData],
                 seeds: Sequence[int], base_params: Mapping[str, Any] | None = None, workers: int = 1,
                 on_result: Callable[[str, int, MetricReport], None] | None = None) -> AblationResult:
    """Train and evaluate each variant for each seed.

    ``data`` is either shared by all seeds or a function of the seed. Lifts
    compare against the baseline trained on the same seed. Results do not
    depend on ``workers``.
    """
    names = [v.name for v in variants]
    if BASELINE not in names:
        raise ValueError(f"ablation grid needs a {BASELINE!r} variant")
    if len(set(names)) != len(names):
        raise ValueError("variant names must be unique")
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    results = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for seed in seeds:
            d = data(seed) if callable(data) else data
            jobs = [(v, seed, dict(base_params or {}), d) for v in variants]
            batch = pool.map(_run_one, jobs) if pool is not None else map(_run_one, jobs)
            for r in batch:
                results.append(r)
                if on_result is not None:
                    on_result(*r)
            del d
    finally:
        if pool is not None:
            pool.shutdown()
    reports = {(name, seed): rep for name, seed, rep in results}
    records = []
    for seed in seeds:
        base = reports[(BASELINE, seed)]
        for v in variants:
            rep = reports[(v.name, seed)]
            records.append(AblationRecord(v.name, seed, rep.roc_auc, rep.pr_auc, rep.ece, rep.nce,
                                          _lift(rep.roc_auc, base.roc_auc), _lift(rep.pr_auc, base.pr_auc)))
    return AblationResult(records, names)

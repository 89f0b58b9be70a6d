"""Command-line entry point.

Every command reads the same flat configuration (``--config`` file plus
``--set section.key=value`` overrides), writes into one run directory, and
leaves a ``<command>.config`` file holding the fully resolved settings.
Exit status: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .ablation import AblationData, default_grid, parse_grid, run_ablation
from .calibration import CalibrationParams, fit_platt
from .config import Config, ConfigError, format_config, load_config
from .embeddings import FLAVOR_DIMS, EmbeddingTable, PretrainedBundle, dump_table, load_table, save_table
from .estimators import AdsformerRanker, RankingDataset
from .metrics import MetricReport
from .pretrain.air import VISUAL_DIM, co_click_pairs, content_features, fit_air, infer_table, unit_rows
from .pretrain.skipgram import fit_skipgram, sessions_from_impressions
from .rng import stream
from .sequences import SyntheticWorld, entity_counts, generate_impressions, generate_world, read_impressions, \
    vocab_from_counts, write_impressions

logger = logging.getLogger("adsformer")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
REPORT_FIELDS = ("roc_auc", "pr_auc", "ece", "nce", "n_pos", "n_neg")


class RunDir:
    def __init__(self, path: Path):
        self.path = path

    def __truediv__(self, name: str) -> Path:
        return self.path / name

    def require(self, name: str, hint: str) -> Path:
        p = self.path / name
        if not p.exists():
            raise ConfigError(f"{p} not found; run `{hint}` first")
        return p


def _run_dir(args, cfg: Config) -> RunDir:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
        base = Path(cfg["run"]["out_dir"]) / f"{stamp}-seed{cfg['run']['seed']}"
        path, n = base, 1
        while path.exists():
            path = base.with_name(f"{base.name}-{n}")
            n += 1
    path.mkdir(parents=True, exist_ok=True)
    return RunDir(path)


def format_report(rows: dict[str, MetricReport]) -> str:
    lines = ["# pr_auc is average precision; ece uses 10 equal-width bins",
             "\t".join(("split",) + REPORT_FIELDS)]
    for split, rep in rows.items():
        vals = [repr(float(getattr(rep, f))) if f not in ("n_pos", "n_neg") else str(getattr(rep, f))
                for f in REPORT_FIELDS]
        lines.append("\t".join([split] + vals))
    return "\n".join(lines) + "\n"


def write_calibration(path: Path, params: CalibrationParams) -> None:
    path.write_text(f"A={params.A!r}\nB={params.B!r}\n", encoding="utf-8")


def read_calibration(path: Path) -> CalibrationParams:
    kv = dict(line.split("=", 1) for line in path.read_text(encoding="utf-8").split() if "=" in line)
    try:
        return CalibrationParams(float(kv["A"]), float(kv["B"]))
    except (KeyError, ValueError):
        raise ConfigError(f"{path}: malformed calibration file") from None


def _load_split(run: RunDir, split: str) -> RankingDataset:
    world = SyntheticWorld.load(run.require("world.npz", "gen-data"))
    return RankingDataset(world, read_impressions(run.require(f"{split}.tsv", "gen-data")))


def _bundle(run: RunDir, flavors, required: bool) -> PretrainedBundle:
    bundle = PretrainedBundle()
    hints = {"air": "pretrain air", "skipgram": "pretrain skipgram", "visual": "gen-data"}
    for flavor in flavors:
        path = run / f"{flavor}.embt"
        if not path.exists():
            if required:
                raise ConfigError(f"pretrained flavor {flavor!r} configured but {path} is missing; "
                                  f"run `{hints.get(flavor, 'pretrain')}` first")
            continue
        bundle.add(flavor, load_table(path, flavor=flavor))
    return bundle


# -- commands ---------------------------------------------------------------
def cmd_gen_data(args, cfg: Config, run: RunDir) -> None:
    if args.null_signal:
        null = cfg.generator().null_signal()
        for f in dataclasses.fields(null):
            cfg.set("data", f.name, getattr(null, f.name))
    seed = cfg["run"]["seed"]
    world = generate_world(cfg.generator(), seed)
    world.save(run / "world.npz")
    for split, n in (("train", cfg["data"]["n_train"]), ("valid", cfg["data"]["n_valid"])):
        data = generate_impressions(world, n, stream(seed, "impressions", split))
        write_impressions(data, run / f"{split}.tsv")
        print(f"{split}: {n} rows, click rate {data.click.mean():.4f}, purchase rate {data.purchase.mean():.4f}")
    visual = unit_rows(content_features(world, seed, cfg["air"]["nuisance"])[:, :VISUAL_DIM])
    save_table(EmbeddingTable.frozen(visual, "visual"), run / "visual.embt")


def cmd_build_vocab(args, cfg: Config, run: RunDir) -> None:
    data = _load_split(run, "train")
    for kind in ("listing", "shop", "taxonomy"):
        n = data.world.num_entities(kind)
        k = cfg.vocab_k().get(kind, n)
        vocab = vocab_from_counts(entity_counts(data.impressions, kind, n, include_candidates=True), k,
                                  cfg["vocab"]["num_oov"])
        vocab.save(run / f"vocab.{kind}.tsv")
        print(f"vocab.{kind}.tsv: {len(vocab.entries)} entries + {vocab.num_oov} OOV")


def cmd_pretrain(args, cfg: Config, run: RunDir) -> None:
    seed = cfg["run"]["seed"]
    log_lines = ["step\tloss"]
    on_step = lambda step, loss: log_lines.append(f"{step}\t{loss!r}")
    if args.kind == "skipgram":
        data = _load_split(run, "train")
        sessions = sessions_from_impressions(data.impressions)
        model = fit_skipgram(sessions, cfg.skipgram(), stream(seed, "pretrain", "skipgram"), on_step)
        table = model.to_table(data.world.num_listings, name="skipgram")
    else:
        world = SyntheticWorld.load(run.require("world.npz", "gen-data"))
        air = cfg["air"]
        features = content_features(world, seed, air["nuisance"])
        pairs = co_click_pairs(world, air["n_pairs"], stream(seed, "pretrain", "air-pairs"), air["neighbors"])
        model = fit_air(features, pairs, cfg.air(), stream(seed, "pretrain", "air"), on_step)
        table = infer_table(model, features, name="air")
    if table.dim != FLAVOR_DIMS[args.kind]:
        raise ConfigError(f"{args.kind} tables must be {FLAVOR_DIMS[args.kind]}-dimensional, got {table.dim}")
    save_table(table, run / f"{args.kind}.embt")
    (run / f"pretrain-{args.kind}.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    print(f"{args.kind}.embt: {table.vocab_size} x {table.dim}")


def _fit_calibration(model: AdsformerRanker, valid: RankingDataset, cfg: Config) -> CalibrationParams:
    rows = model.evaluation_rows(valid)
    params = fit_platt(model.decision_function(rows), rows.labels(model.task),
                       cfg["calibrate"]["tol"], cfg["calibrate"]["max_iter"])
    if not params.monotone_increasing:
        # likelihood prefers flipping a worse-than-random scorer; ROC-AUC then becomes 1 - AUC
        print(f"warning: Platt slope A={params.A:.4g} <= 0 reverses the score order; "
              "the model ranks worse than chance on validation", file=sys.stderr)
    return params


def cmd_train(args, cfg: Config, run: RunDir) -> None:
    task = args.task
    params = cfg.ranker_params(task)
    probe = AdsformerRanker(**params)
    probe.preflight_config()
    cfg_adpm = probe.adpm_config({"listing": 1, "shop": 1, "taxonomy": 1}, 1)
    needs_tables = cfg_adpm is not None and cfg_adpm.use_component2
    bundle = _bundle(run, params["pretrained_flavors"], required=True) if needs_tables else None
    train, valid = _load_split(run, "train"), _load_split(run, "valid")
    model = AdsformerRanker(**params, pretrained=bundle)
    try:
        model.preflight()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    model.fit(train)
    model.save(run / f"{task}.ckpt")
    rows = {"valid": model.evaluate(valid)}
    if args.calibrate:
        calib = _fit_calibration(model, valid, cfg)
        write_calibration(run / f"{task}.calibration", calib)
        rows["valid_calibrated"] = model.evaluate(valid, calib)
    report = format_report(rows)
    (run / f"{task}.report.tsv").write_text(report, encoding="utf-8")
    print(f"{task}: {model.n_steps_} steps on {model.n_train_rows_} rows")
    print(report, end="")


def cmd_calibrate(args, cfg: Config, run: RunDir) -> None:
    model = AdsformerRanker.load(run.require(f"{args.task}.ckpt", f"train {args.task}"))
    valid = _load_split(run, "valid")
    calib = _fit_calibration(model, valid, cfg)
    write_calibration(run / f"{args.task}.calibration", calib)
    report = format_report({"valid": model.evaluate(valid), "valid_calibrated": model.evaluate(valid, calib)})
    (run / f"{args.task}.calibrated.report.tsv").write_text(report, encoding="utf-8")
    print(f"A={calib.A!r} B={calib.B!r}")
    print(report, end="")


def cmd_evaluate(args, cfg: Config, run: RunDir) -> None:
    model = AdsformerRanker.load(run.require(f"{args.task}.ckpt", f"train {args.task}"))
    if args.data:
        world = SyntheticWorld.load(run.require("world.npz", "gen-data"))
        data = RankingDataset(world, read_impressions(args.data))
    else:
        data = _load_split(run, "valid")
    rows = {"eval": model.evaluate(data)}
    calib_path = run / f"{args.task}.calibration"
    if calib_path.exists():
        rows["eval_calibrated"] = model.evaluate(data, read_calibration(calib_path))
    report = format_report(rows)
    (run / f"{args.task}.eval.tsv").write_text(report, encoding="utf-8")
    print(report, end="")


def cmd_ablate(args, cfg: Config, run: RunDir) -> None:
    ab = cfg["ablate"]
    grid_path = args.grid or (None if ab["grid"] == "default" else ab["grid"])
    if grid_path:
        try:
            lines = Path(grid_path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read grid {grid_path}: {exc}") from None
        variants = parse_grid(lines)
    else:
        variants = default_grid()
    base = cfg.ranker_params("ablate")
    flavors = set(base["pretrained_flavors"])
    for v in variants:
        flavors.update(v.params.get("pretrained_flavors", ()))
    for v in variants:
        try:
            AdsformerRanker(**{**base, **v.params}).preflight_config()
        except ValueError as exc:
            raise ConfigError(f"variant {v.name}: {exc}") from None
    bundle = _bundle(run, sorted(flavors), required=True)
    data = AblationData(_load_split(run, "train"), _load_split(run, "valid"), bundle)
    progress = lambda name, seed, rep: logger.info("%s seed %d roc_auc %.4f", name, seed, rep.roc_auc)
    result = run_ablation(variants, data, list(ab["seeds"]), base, ab["workers"], progress)
    result.write(run.path)
    print(result.summary_text(), end="")


def cmd_dump(args, cfg: Config, run: RunDir | None) -> None:
    path = Path(args.path)
    try:
        raw_head = path.read_bytes()[:8]
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if raw_head.startswith(b"EMBT"):
        table = load_table(path)
        print(f"# {table.vocab_size} x {table.dim} frozen table")
        print(dump_table(table, limit=args.rows))
    elif raw_head.startswith(b"ADSCKPT"):
        with open(path, "rb") as fh:
            fh.readline()
            for line in fh:
                text = line.decode("utf-8").rstrip("\n")
                print(text if not text.startswith("meta ") else text[:200] + ("..." if len(text) > 200 else ""))
                if text == "end":
                    break
    else:
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                if i >= args.rows:
                    break
                print(line.rstrip("\n"))


COMMANDS = {"gen-data": cmd_gen_data, "build-vocab": cmd_build_vocab, "pretrain": cmd_pretrain,
            "train": cmd_train, "calibrate": cmd_calibrate, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
            "dump": cmd_dump}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adsformer", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="flat section.key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one setting")
    p.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    p.add_argument("--run-dir", help="use this run directory instead of a new timestamped one")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", help="generate a synthetic world and train/valid impressions")
    g.add_argument("--null-signal", action="store_true", help="zero every sequence-borne label term")
    sub.add_parser("build-vocab", help="write top-K vocabularies from the training split")
    pt = sub.add_parser("pretrain", help="learn a frozen listing table")
    pt.add_argument("kind", choices=("skipgram", "air"))
    t = sub.add_parser("train", help="train a CTR or PCCVR ranker and report validation metrics")
    t.add_argument("task", choices=("ctr", "pccvr"))
    t.add_argument("--calibrate", action="store_true", help="also fit Platt scaling on the validation split")
    t.add_argument("--adpm", help="components to enable: full, none, or a comma list such as 1,3")
    t.add_argument("--epochs", type=int, help="shorthand for --set <task>.epochs=N")
    c = sub.add_parser("calibrate", help="fit Platt scaling for a trained model")
    c.add_argument("task", choices=("ctr", "pccvr"))
    e = sub.add_parser("evaluate", help="score a trained model")
    e.add_argument("task", choices=("ctr", "pccvr"))
    e.add_argument("--data", help="impressions file (default: the run's validation split)")
    a = sub.add_parser("ablate", help="run the component ablation grid over seeds")
    a.add_argument("--grid", help="grid file of variant.param=value lines")
    d = sub.add_parser("dump", help="print the first rows of a table, checkpoint manifest or text file")
    d.add_argument("path")
    d.add_argument("--rows", type=int, default=5)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = list(args.set) + ([f"run.seed={args.seed}"] if args.seed is not None else [])
        if args.command == "train":
            if args.adpm is not None:
                comps = {"full": "1,2,3", "none": ""}.get(args.adpm, args.adpm)
                overrides.append(f"{args.task}.components={comps}")
            if args.epochs is not None:
                overrides.append(f"{args.task}.epochs={args.epochs}")
        cfg = load_config(args.config, overrides)
        cfg.validate()
        if args.command == "dump":
            cmd_dump(args, cfg, None)
            return EXIT_OK
        run = _run_dir(args, cfg)
        name = args.command + (f"-{getattr(args, 'kind', None) or getattr(args, 'task', None)}"
                               if args.command in ("pretrain", "train", "calibrate", "evaluate") else "")
        COMMANDS[args.command](args, cfg, run)
        (run / f"{name}.config").write_text(format_config(cfg), encoding="utf-8")
        print(f"run directory: {run.path}", file=sys.stderr)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        if args.verbose:
            logging.exception("runtime failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

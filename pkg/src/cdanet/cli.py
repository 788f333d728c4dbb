"""Command-line entry point: ``cdanet {synth,prepare,train,eval,plot-data}``.

An experiment is one JSON config::

    {"data":   {"synth": {...}} | {"source": {"schema": p, "log": p},
                                   "target": {...}, "binarize_threshold": 3,
                                   "correspondence": p},
               "k_core": [5, 5]},
     "train":  {TrainConfig fields},
     "eval":   {"ratios": [...], "variants": [...], "seeds": [...],
                "switches": [...], "sensitivity": {"param": "alpha", "values": [...]},
                "k": 5, "metric": "euclidean"},
     "output": "runs"}

Outputs go under ``$CDANET_OUT`` (else ``output``, else ``./runs``):
``data-<hash>/`` holds the prepared splits, ``<hash>-s<seed>/`` one training run.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .config import TrainConfig
from .evaluation import (SWITCHES, VARIANTS, ExperimentData, EvalReport, ablation_grid,
                         evaluate_model, knn_probe, sensitivity_sweep, sparsity_sweep)
from .features import (ConfigError, EncodingError, FeatureEncoder, InsufficientDataError,
                       ParseError, SchemaError, SynthConfig, chrono_split, kcore_filter,
                       load_schema, parse_log, read_correspondence, save_schema,
                       synth_generate, write_correspondence, write_log, write_synth)
from .metrics import UndefinedMetricError
from .model import EmbeddingLookupError, NoTranslatorError
from .training import (DivergenceError, IntegrityError, StageError, load_checkpoint,
                       model_from_checkpoint, save_checkpoint, train_augmentation_stage,
                       train_baseline_mlp, train_baseline_sharemiddle, train_translation_stage)

log = logging.getLogger("cdanet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
DOMAINS = ("source", "target")
STAGES = ("full", "translation", "augmentation", "baseline:mlp", "baseline:sharemiddle")
SUITES = ("test", "sweep", "ablation", "sensitivity", "probe")
SPLITS = ("train", "val", "test")


class RunExistsError(ConfigError):
    pass


# ------------------------------------------------------------------ config

@dataclass
class EvalSettings:
    ratios: tuple = (0.1, 0.25, 0.5, 1.0)
    variants: tuple = ("cdanet", "mlp")
    seeds: tuple = (0, 1, 2, 3, 4)
    switches: tuple = SWITCHES
    sensitivity: dict = field(default_factory=lambda: {"param": "alpha",
                                                       "values": [0.0, 0.01, 0.1, 1.0]})
    k: int = 5
    metric: str = "euclidean"

    def validate(self):
        if not self.ratios or any(not 0.0 < r <= 1.0 for r in self.ratios):
            raise ConfigError(f"eval.ratios must be non-empty and in (0, 1], got {self.ratios}")
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise ConfigError(f"unknown eval.variants {sorted(bad)}; known: {list(VARIANTS)}")
        bad = set(self.switches) - set(SWITCHES)
        if bad:
            raise ConfigError(f"unknown eval.switches {sorted(bad)}; known: {list(SWITCHES)}")
        if not self.seeds:
            raise ConfigError("eval.seeds must be non-empty")
        sens = self.sensitivity
        if set(sens) != {"param", "values"} or sens["param"] not in ("alpha", "beta", "K") \
                or not sens["values"]:
            raise ConfigError("eval.sensitivity needs param in {alpha, beta, K} and non-empty values")
        if self.k < 1:
            raise ConfigError("eval.k must be >= 1")
        if self.metric not in ("euclidean", "cosine"):
            raise ConfigError("eval.metric must be 'euclidean' or 'cosine'")


@dataclass
class ExperimentConfig:
    data: dict
    train: TrainConfig
    eval: EvalSettings
    output: str | None = None
    base_dir: Path = Path(".")

    @property
    def synth(self) -> SynthConfig | None:
        return SynthConfig(**_synth_kwargs(self.data["synth"])) if "synth" in self.data else None

    def data_hash(self) -> str:
        return _digest(self.data)

    def run_hash(self) -> str:
        t = self.train.to_dict()
        t.pop("seed")
        return _digest({"data": self.data, "train": t})

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        return {"data": self.data, "train": self.train.to_dict(), "eval": asdict(self.eval),
                "output": self.output}


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def _synth_kwargs(d: dict) -> dict:
    known = {f.name for f in fields(SynthConfig)}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"unknown data.synth keys {sorted(bad)}")
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_config(path, seed=None) -> ExperimentConfig:
    """Parse and fully validate an experiment config; touches no outputs."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    bad = set(raw) - {"data", "train", "eval", "output"}
    if bad:
        raise ConfigError(f"unknown config sections {sorted(bad)}")
    train = TrainConfig.from_dict(raw.get("train", {}))
    if seed is not None:
        train = train.with_(seed=seed)
    ev = raw.get("eval", {})
    bad = set(ev) - {f.name for f in fields(EvalSettings)}
    if bad:
        raise ConfigError(f"unknown eval keys {sorted(bad)}")
    settings = EvalSettings(**{k: tuple(v) if isinstance(v, list) else v for k, v in ev.items()})
    settings.validate()
    cfg = ExperimentConfig(raw.get("data", {}), train, settings, raw.get("output"),
                           path.resolve().parent)
    _validate_data(cfg)
    return cfg


def _validate_data(cfg: ExperimentConfig) -> None:
    data = cfg.data
    allowed = {"synth", "source", "target", "binarize_threshold", "correspondence", "k_core"}
    bad = set(data) - allowed
    if bad:
        raise ConfigError(f"unknown data keys {sorted(bad)}")
    k = data.get("k_core", [5, 5])
    if len(k) != 2 or min(k) < 1:
        raise ConfigError("data.k_core must be [k_user, k_item] with both >= 1")
    if "synth" in data:
        if "source" in data or "target" in data:
            raise ConfigError("data.synth excludes data.source/data.target")
        cfg.synth  # noqa: B018  (validates)
        return
    for dom in DOMAINS:
        spec = data.get(dom)
        if not isinstance(spec, dict) or set(spec) != {"schema", "log"}:
            raise ConfigError(f"data.{dom} must be {{'schema': path, 'log': path}}")
        for key in ("schema", "log"):
            if not cfg.path(spec[key]).is_file():
                raise ConfigError(f"data.{dom}.{key}: file not found: {cfg.path(spec[key])}")
    if "correspondence" in data and not cfg.path(data["correspondence"]).is_file():
        raise ConfigError(f"data.correspondence: file not found: {cfg.path(data['correspondence'])}")


def output_root(cfg: ExperimentConfig) -> Path:
    env = os.environ.get("CDANET_OUT")
    if env:
        return Path(env)
    return cfg.path(cfg.output) if cfg.output else Path("runs")


def data_dir(cfg) -> Path:
    return output_root(cfg) / f"data-{cfg.data_hash()}"


def run_dir(cfg) -> Path:
    return output_root(cfg) / f"{cfg.run_hash()}-s{cfg.train.seed}"


# ------------------------------------------------------------------ synth / prepare

def cmd_synth(cfg: ExperimentConfig, force=False) -> Path:
    if cfg.synth is None:
        raise ConfigError("`synth` needs a data.synth section")
    sc = cfg.synth
    out = output_root(cfg) / f"synth-{_digest(asdict(sc))}"
    if out.exists() and not force:
        raise RunExistsError(f"{out} exists; pass --force to regenerate")
    world = synth_generate(sc)
    write_synth(world, out)
    log.info("wrote %d source / %d target records to %s", len(world.source), len(world.target), out)
    return out


def _raw_domains(cfg: ExperimentConfig):
    """(records, schema, stats) per domain plus the correspondence, if any."""
    if cfg.synth is not None:
        world = synth_generate(cfg.synth)
        return ({"source": (world.source, world.source_schema, {}),
                 "target": (world.target, world.target_schema, {})}, world.correspondence)
    out = {}
    for dom in DOMAINS:
        schema = load_schema(cfg.path(cfg.data[dom]["schema"]))
        stats = {}
        records = parse_log(cfg.path(cfg.data[dom]["log"]), schema,
                            cfg.data.get("binarize_threshold"), stats)
        out[dom] = (records, schema, stats)
    corr = cfg.data.get("correspondence")
    return out, (read_correspondence(cfg.path(corr)) if corr else None)


def cmd_prepare(cfg: ExperimentConfig, force=False) -> Path:
    """k-core filter, chronological split, train-only vocabularies; writes data-<hash>/."""
    out = data_dir(cfg)
    if (out / "prepare.summary").exists() and not force:
        raise RunExistsError(f"{out} is already prepared; pass --force to redo it")
    domains, corr = _raw_domains(cfg)
    k_user, k_item = cfg.data.get("k_core", [5, 5])
    prepared, summary = {}, {"k_core": [k_user, k_item], "ratios": [0.8, 0.1, 0.1],
                             "seed": cfg.synth.seed if cfg.synth else None, "domains": {}}
    for dom, (records, schema, stats) in domains.items():
        kept = kcore_filter(records, k_user, k_item)
        if not kept:
            raise InsufficientDataError(f"{dom}: nothing left after {k_user}/{k_item}-core filtering")
        splits = chrono_split(kept)
        enc = FeatureEncoder.fit(splits[0], schema)
        prepared[dom] = (schema, splits, enc)
        summary["domains"][dom] = {
            "records_raw": len(records), "malformed_lines": stats.get("malformed", 0),
            "records_kept": len(kept),
            "users": len({r.user_id for r in kept}), "items": len({r.item_id for r in kept}),
            "input_feature_dim": enc.schema.total_input_dim,
            "fields": len(schema.fields),
            "samples": dict(zip(SPLITS, map(len, splits))),
            "positive_rate": sum(r.label for r in kept) / len(kept)}
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    for dom, (schema, splits, enc) in prepared.items():
        save_schema(schema, out / f"{dom}.schema.json")
        with open(out / f"{dom}.encoder.json", "w", encoding="utf-8") as fh:
            json.dump(enc.to_dict(), fh, sort_keys=True)
        for name, part in zip(SPLITS, splits):
            write_log(out / f"{dom}.{name}.tsv", part, schema)
    if corr is not None:
        write_correspondence(out / "correspondence.tsv", corr)
    (out / "prepare.summary").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


def load_prepared_domain(path: Path, domain: str):
    """(train, val, test) EncodedBatches of one domain from a prepared directory."""
    schema = load_schema(path / f"{domain}.schema.json")
    with open(path / f"{domain}.encoder.json", encoding="utf-8") as fh:
        enc = FeatureEncoder.from_dict(json.load(fh))
    return tuple(enc.encode(parse_log(path / f"{domain}.{s}.tsv", schema)) for s in SPLITS)


def _require_prepared(cfg) -> Path:
    path = data_dir(cfg)
    if not (path / "prepare.summary").exists():
        raise InsufficientDataError(f"no prepared data at {path}; run `cdanet prepare` first")
    return path


def load_experiment(cfg) -> ExperimentData:
    path = _require_prepared(cfg)
    s = load_prepared_domain(path, "source")
    t = load_prepared_domain(path, "target")
    corr = path / "correspondence.tsv"
    return ExperimentData(*s, *t, correspondence=read_correspondence(corr) if corr.exists() else None)


# ------------------------------------------------------------------ train

STAGE_FILES = {"translation": ("translation.ckpt",), "augmentation": ("augmentation.ckpt",),
               "full": ("translation.ckpt", "augmentation.ckpt"),
               "baseline:mlp": ("baseline-mlp.ckpt",),
               "baseline:sharemiddle": ("baseline-sharemiddle.ckpt",)}
METRIC_STAGES = {"translation": ("translation",), "augmentation": ("augmentation",),
                 "full": ("translation", "augmentation"), "baseline:mlp": ("baseline:mlp",),
                 "baseline:sharemiddle": ("baseline:sharemiddle",)}


def _claim_outputs(run: Path, stage: str, force: bool) -> None:
    existing = [f for f in STAGE_FILES[stage] if (run / f).exists()]
    if existing and not force:
        raise RunExistsError(f"{run} already has {', '.join(existing)}; pass --force to overwrite")
    for f in existing:
        (run / f).unlink()
    metrics = run / "metrics.jsonl"
    if existing and metrics.exists():
        # drop this stage's old epoch records so the log describes the kept checkpoints
        drop = METRIC_STAGES[stage]
        keep = [ln for ln in metrics.read_text().splitlines(keepends=True)
                if json.loads(ln)["stage"] not in drop]
        metrics.write_text("".join(keep))
        timing = run / "timing.jsonl"
        if timing.exists():
            keep = [ln for ln in timing.read_text().splitlines(keepends=True)
                    if json.loads(ln)["stage"] not in drop]
            timing.write_text("".join(keep))


def cmd_train(cfg: ExperimentConfig, stage: str, force=False) -> Path:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage '{stage}'; choose from {', '.join(STAGES)}")
    prepared = _require_prepared(cfg)
    run = run_dir(cfg)
    if stage == "augmentation" and not (run / "translation.ckpt").exists():
        raise StageError(f"no translation checkpoint in {run}; run "
                         "`cdanet train --stage translation` first (or use --stage full)")
    _claim_outputs(run, stage, force)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    metrics = run / "metrics.jsonl"
    tc = cfg.train

    if stage == "baseline:mlp":
        train, val, _ = load_prepared_domain(prepared, "target")
        res = train_baseline_mlp(train, val, tc, metrics_path=metrics)
        save_checkpoint(res.checkpoint, run / "baseline-mlp.ckpt")
        return run
    if stage == "augmentation":
        train_t, val_t, _ = load_prepared_domain(prepared, "target")
        ckpt = load_checkpoint(run / "translation.ckpt")
        res = train_augmentation_stage(ckpt, train_t, val_t, tc, metrics_path=metrics)
        save_checkpoint(res.checkpoint, run / "augmentation.ckpt")
        return run

    train_s, _, _ = load_prepared_domain(prepared, "source")
    train_t, val_t, _ = load_prepared_domain(prepared, "target")
    if stage == "baseline:sharemiddle":
        res = train_baseline_sharemiddle(train_s, train_t, val_t, tc, metrics_path=metrics)
        save_checkpoint(res.checkpoint, run / "baseline-sharemiddle.ckpt")
        return run
    res = train_translation_stage(train_s, train_t, val_t, tc, metrics_path=metrics)
    save_checkpoint(res.checkpoint, run / "translation.ckpt")
    log.info("translation: best val AUC %.4f", res.checkpoint.summary["best_val_auc"])
    if stage == "full":
        aug = train_augmentation_stage(res.checkpoint, train_t, val_t, tc, metrics_path=metrics)
        save_checkpoint(aug.checkpoint, run / "augmentation.ckpt")
        log.info("augmentation: best val AUC %.4f", aug.checkpoint.summary["best_val_auc"])
    return run


# ------------------------------------------------------------------ eval

def _default_checkpoint(run: Path, suite: str) -> Path:
    order = (("translation.ckpt", "augmentation.ckpt") if suite == "probe" else
             ("augmentation.ckpt", "translation.ckpt", "baseline-mlp.ckpt",
              "baseline-sharemiddle.ckpt"))
    for name in order:
        if (run / name).exists():
            return run / name
    raise StageError(f"no checkpoint in {run}; run `cdanet train` first or pass --checkpoint")


def _write_report(report: EvalReport, out: Path, name: str, x="train_ratio") -> None:
    out.mkdir(parents=True, exist_ok=True)
    report.to_tsv(out / f"{name}.tsv")
    report.to_json(out / f"{name}.json")
    with open(out / f"{name}.plot.json", "w", encoding="utf-8") as fh:
        json.dump(report.plot_data(x=x), fh, indent=2, sort_keys=True)


def cmd_eval(cfg: ExperimentConfig, suite: str, checkpoint=None, jobs=1) -> Path:
    if suite not in SUITES:
        raise ConfigError(f"unknown suite '{suite}'; choose from {', '.join(SUITES)}")
    run = run_dir(cfg)
    out = run / "eval"
    ev, tc = cfg.eval, cfg.train
    if suite in ("test", "probe"):
        path = Path(checkpoint) if checkpoint else _default_checkpoint(run, suite)
        ckpt = load_checkpoint(path)
        model = model_from_checkpoint(ckpt)
        data = load_experiment(cfg)
        splits = {"source": data.test_s, "target": data.test_t}
        if suite == "test":
            rows = []
            for dom in ckpt.schemas:
                res = evaluate_model(model, splits[dom], dom, tc.eval_batch_size)
                rows.append({"variant": f"{ckpt.stage}:{ckpt.model_kind}", "domain": dom,
                             "train_ratio": 1.0, "seed": ckpt.config["seed"], "auc": res["auc"],
                             "loss": res["bce"], "config_hash": TrainConfig.from_dict(ckpt.config).hash(),
                             "checkpoint": str(path)})
                print(f"{dom}\tauc={res['auc']:.6f}\tbce={res['bce']:.6f}")
            _write_report(EvalReport(rows), out, "test")
            return out
        source_model = None
        if "source" not in ckpt.schemas:
            tpath = path.with_name("translation.ckpt")
            if model.kind != "augmentation" or not tpath.exists():
                raise NoTranslatorError(f"{ckpt.stage}:{ckpt.model_kind} checkpoint has no translator")
            source_model = model_from_checkpoint(load_checkpoint(tpath))
        res = knn_probe(model, data.test_t, data.test_s, ev.k, data.correspondence, ev.metric,
                        source_model=source_model)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"checkpoint": str(path), "seed": ckpt.config["seed"], "k": res.k,
               "recall_at_k": res.recall_at_k, "chance": res.chance, "metric": ev.metric,
               "items": [{"target_item": t, "neighbours": n, "match_rank": r}
                         for t, n, r in zip(res.target_items, res.neighbours, res.match_rank)]}
        (out / "probe.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print(f"recall@{res.k}={res.recall_at_k}\tchance={res.chance:.6f}")
        return out

    data = load_experiment(cfg)
    if suite == "sweep":
        report = sparsity_sweep(data, ev.ratios, ev.variants, tc, ev.seeds, jobs)
        _write_report(report, out, "sweep")
    elif suite == "ablation":
        report = ablation_grid(data, tc, ev.seeds, ev.switches, jobs)
        _write_report(report, out, "ablation")
    else:
        report = sensitivity_sweep(data, ev.sensitivity["param"], ev.sensitivity["values"], tc,
                                   ev.seeds, jobs)
        _write_report(report, out, "sensitivity", x="value")
    for row in report.aggregate():
        print("\t".join(f"{k}={v}" for k, v in row.items()))
    return out


def cmd_plot_data(report_path, x="train_ratio", series="variant") -> dict:
    try:
        rows = json.loads(Path(report_path).read_text(encoding="utf-8"))["rows"]
    except FileNotFoundError:
        raise ConfigError(f"report not found: {report_path}") from None
    except (json.JSONDecodeError, KeyError):
        raise ParseError(f"{report_path} is not an eval report") from None
    series_data = EvalReport(rows).plot_data(x=x, series=series)
    print(json.dumps(series_data, indent=2, sort_keys=True))
    return series_data


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdanet", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    common(sub.add_parser("synth", help="write a synthetic two-domain world as logs"))
    common(sub.add_parser("prepare", help="filter, split and encode both domains"), seed=False)
    t = sub.add_parser("train", help="train a stage or a baseline")
    common(t)
    t.add_argument("--stage", default="full", choices=STAGES)
    e = sub.add_parser("eval", help="evaluate checkpoints or run experiment grids")
    e.add_argument("--config", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--suite", default="test", choices=SUITES)
    e.add_argument("--checkpoint", help="checkpoint file (default: newest stage of the run)")
    e.add_argument("--jobs", type=int, default=1, help="parallel worker processes for grids")
    pd = sub.add_parser("plot-data", help="print (x, mean, std) series from an eval report")
    pd.add_argument("--report", required=True)
    pd.add_argument("--x", default="train_ratio")
    pd.add_argument("--series", default="variant")
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(exc, (ParseError, EncodingError, InsufficientDataError, IntegrityError,
                        UndefinedMetricError, EmbeddingLookupError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (ConfigError, SchemaError, StageError, NoTranslatorError, KeyError,
                        TypeError, ValueError)):
        return EXIT_CONFIG
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "plot-data":
            cmd_plot_data(args.report, args.x, args.series)
            return EXIT_OK
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, getattr(args, "seed", None))
        if args.command == "synth":
            if args.seed is not None:
                cfg.data = {**cfg.data, "synth": {**cfg.data["synth"], "seed": args.seed}} \
                    if "synth" in cfg.data else cfg.data
            print(cmd_synth(cfg, args.force))
        elif args.command == "prepare":
            print(cmd_prepare(cfg, args.force))
        elif args.command == "train":
            print(cmd_train(cfg, args.stage, args.force))
        else:
            print(cmd_eval(cfg, args.suite, args.checkpoint, args.jobs))
    except Exception as exc:  # mapped to the documented exit codes
        code = _exit_code(exc)
        print(f"cdanet: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

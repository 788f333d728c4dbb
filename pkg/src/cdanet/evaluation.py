"""Test-set evaluation, experiment grids and the translated-feature k-NN probe."""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .features import (ConfigError, EncodedBatch, FeatureEncoder, SynthConfig, chrono_split,
                       kcore_filter, synth_generate)
from .metrics import UndefinedMetricError, auc, auc_pairwise, predict_logits  # noqa: F401
from .model import NoTranslatorError, has_translator, translate
from .training import (train_augmentation_from_scratch, train_augmentation_stage,
                       train_baseline_mlp, train_baseline_sharemiddle,
                       train_translation_stage)

SWITCHES = ("no_mmoe", "no_orth", "no_cross", "no_translation_net", "no_augmentation_net")
VARIANTS = ("cdanet", "mlp", "sharemiddle")
SENSITIVITY_PARAMS = ("alpha", "beta", "K")


def evaluate_model(model, split: EncodedBatch, domain="target", batch_size=8192) -> dict:
    logits = predict_logits(model, split, domain, batch_size)
    p = nx.sigmoid(logits)
    return {"auc": auc(p, split.labels), "bce": nx.bce_mean(p, split.labels)}


# ------------------------------------------------------------------- data

@dataclass
class ExperimentData:
    """Encoded splits for both domains (vocabularies fit on each train split)."""
    train_s: EncodedBatch
    val_s: EncodedBatch
    test_s: EncodedBatch
    train_t: EncodedBatch
    val_t: EncodedBatch
    test_t: EncodedBatch
    encoders: dict = field(default_factory=dict)
    correspondence: dict | None = None

    def subsample_target(self, ratio: float, seed: int) -> "ExperimentData":
        idx = subsample_indices(len(self.train_t), ratio, seed)
        return ExperimentData(self.train_s, self.val_s, self.test_s, self.train_t.take(idx),
                              self.val_t, self.test_t, self.encoders, self.correspondence)


def subsample_indices(n: int, ratio: float, seed: int) -> np.ndarray:
    """Same rule as features.subsample_train, on positions."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"train ratio must be in (0, 1], got {ratio}")
    return np.sort(np.random.default_rng(seed).choice(n, size=math.floor(ratio * n), replace=False))


def prepare_domain(records, schema, k_user=1, k_item=1, ratios=(0.8, 0.1, 0.1)):
    """k-core filter, chronological split, train-only vocabulary; returns (splits, encoder)."""
    kept = kcore_filter(records, k_user, k_item)
    train, val, test = chrono_split(kept, ratios)
    enc = FeatureEncoder.fit(train, schema)
    return (enc.encode(train), enc.encode(val), enc.encode(test)), enc


def synthetic_experiment(synth: SynthConfig, k_core=(5, 5)) -> ExperimentData:
    world = synth_generate(synth)
    (s_tr, s_va, s_te), s_enc = prepare_domain(world.source, world.source_schema, *k_core)
    (t_tr, t_va, t_te), t_enc = prepare_domain(world.target, world.target_schema, *k_core)
    return ExperimentData(s_tr, s_va, s_te, t_tr, t_va, t_te,
                          {"source": s_enc, "target": t_enc}, world.correspondence)


# ------------------------------------------------------------------- runs

def switched_config(cfg: TrainConfig, switches) -> TrainConfig:
    unknown = set(switches) - set(SWITCHES)
    if unknown:
        raise ConfigError(f"unknown ablation switch(es): {sorted(unknown)}")
    if "no_mmoe" in switches:
        cfg = cfg.with_(extractor="shared")
    if "no_orth" in switches:
        cfg = cfg.with_(beta=0.0)
    if "no_cross" in switches:
        cfg = cfg.with_(alpha=0.0)
    return cfg


def fit_variant(data: ExperimentData, cfg: TrainConfig, variant="cdanet", switches=()):
    """Train one variant; returns the model evaluated on the target test split."""
    switches = frozenset(switches)
    if variant == "mlp":
        return train_baseline_mlp(data.train_t, data.val_t, cfg).model
    if variant == "sharemiddle":
        return train_baseline_sharemiddle(data.train_s, data.train_t, data.val_t, cfg).model
    if variant != "cdanet":
        raise ConfigError(f"unknown variant '{variant}'")
    cfg = switched_config(cfg, switches)
    if "no_translation_net" in switches:
        return train_augmentation_from_scratch(data.train_t, data.val_t, cfg).model
    stage1 = train_translation_stage(data.train_s, data.train_t, data.val_t, cfg)
    if "no_augmentation_net" in switches:
        return stage1.model
    return train_augmentation_stage(stage1.checkpoint, data.train_t, data.val_t, cfg).model


def run_cell(data: ExperimentData, cfg: TrainConfig, variant="cdanet", switches=(),
             train_ratio=1.0, seed=0) -> dict:
    cfg = cfg.with_(seed=seed)
    if train_ratio < 1.0:
        data = data.subsample_target(train_ratio, seed)
    model = fit_variant(data, cfg, variant, switches)
    res = evaluate_model(model, data.test_t, "target", cfg.eval_batch_size)
    name = variant if not switches else "+".join(sorted(switches))
    return {"variant": name, "domain": "target", "train_ratio": train_ratio, "seed": seed,
            "auc": res["auc"], "loss": res["bce"], "config_hash": switched_config(cfg, switches).hash()}


def _run_cell_args(args):
    return run_cell(*args)


def _run_grid(cells, jobs=1):
    if jobs <= 1:
        return [run_cell(*c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_run_cell_args, cells))


# ----------------------------------------------------------------- reports

@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def aggregate(self, keys=("variant", "domain", "train_ratio")) -> list:
        groups = {}
        for r in self.rows:
            groups.setdefault(tuple(r[k] for k in keys), []).append(r["auc"])
        return [dict(zip(keys, k), auc_mean=float(np.mean(v)), auc_std=float(np.std(v)), n=len(v))
                for k, v in groups.items()]

    def mean_auc(self, **match) -> float:
        vals = [r["auc"] for r in self.rows if all(r.get(k) == v for k, v in match.items())]
        if not vals:
            raise KeyError(f"no rows match {match}")
        return float(np.mean(vals))

    def to_tsv(self, path) -> None:
        cols = ["variant", "domain", "train_ratio", "seed", "auc", "loss", "config_hash"]
        extra = sorted({k for r in self.rows for k in r} - set(cols))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(cols + extra) + "\n")
            for r in self.rows:
                fh.write("\t".join(str(r.get(c, "")) for c in cols + extra) + "\n")

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"rows": self.rows, "aggregate": self.aggregate()}, fh, indent=2, sort_keys=True)

    def plot_data(self, x="train_ratio", series="variant") -> dict:
        """{series value: [(x, mean auc, std auc), ...]} sorted by x."""
        out = {}
        for row in self.aggregate(keys=(series, x)):
            out.setdefault(row[series], []).append((row[x], row["auc_mean"], row["auc_std"]))
        return {k: sorted(v) for k, v in out.items()}


def sparsity_sweep(data: ExperimentData, ratios, variants, cfg: TrainConfig, seeds,
                   jobs=1) -> EvalReport:
    """Subsample only the target train split; validation and test stay fixed."""
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ConfigError(f"ratio {r} outside (0, 1]")
    cells = [(data, cfg, v, (), r, s) for r, v, s in product(ratios, variants, seeds)]
    return EvalReport(_run_grid(cells, jobs))


def ablation_run(data: ExperimentData, cfg: TrainConfig, switches, seeds=(0,), jobs=1) -> EvalReport:
    """One configuration with every switch in ``switches`` applied."""
    switched_config(cfg, switches)
    cells = [(data, cfg, "cdanet", tuple(sorted(switches)), 1.0, s) for s in seeds]
    return EvalReport(_run_grid(cells, jobs))


def ablation_grid(data: ExperimentData, cfg: TrainConfig, seeds, switches=SWITCHES,
                  jobs=1) -> EvalReport:
    """Full model plus each single-switch ablation."""
    cells = [(data, cfg, "cdanet", sw, 1.0, s)
             for sw in [()] + [(w,) for w in switches] for s in seeds]
    return EvalReport(_run_grid(cells, jobs))


def sensitivity_sweep(data: ExperimentData, param: str, values, cfg: TrainConfig, seeds=(0,),
                      jobs=1) -> EvalReport:
    if param not in SENSITIVITY_PARAMS:
        raise ConfigError(f"sensitivity parameter must be one of {SENSITIVITY_PARAMS}")
    if not values:
        raise ConfigError("no values to sweep")
    cells = [(data, cfg.with_(**{param: v}), "cdanet", (), 1.0, s) for v in values for s in seeds]
    rows = _run_grid(cells, jobs)
    for (_, c, *_), row in zip(cells, rows):
        row["param"] = param
        row["value"] = getattr(c, param)
    return EvalReport(rows)


# ------------------------------------------------------------------- probe

@dataclass
class ProbeResult:
    target_items: list
    translated: np.ndarray
    source_items: list
    neighbours: list            # per target item: k source item ids, nearest first
    distances: np.ndarray       # (n_target, k)
    match_rank: list            # 1-based rank of the true counterpart, None if unknown
    k: int
    recall_at_k: float | None
    chance: float


def _item_means(z: np.ndarray, items: np.ndarray):
    ids, inv = np.unique(items.astype(str), return_inverse=True)
    sums = np.zeros((ids.size, z.shape[1]))
    np.add.at(sums, inv, z)
    return list(ids), sums / np.bincount(inv)[:, None]


def pairwise_distances(a: np.ndarray, b: np.ndarray, metric="euclidean") -> np.ndarray:
    if metric == "euclidean":
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        return np.sqrt(np.maximum(sq, 0.0))
    if metric == "cosine":
        an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
        return 1.0 - an @ bn.T
    raise ConfigError(f"unknown metric '{metric}'")


def shared_positive_users(target: EncodedBatch, source: EncodedBatch):
    """Positive instances of users that have positives in both domains."""
    tp, sp = target.positives(), source.positives()
    both = np.intersect1d(tp.user_ids.astype(str), sp.user_ids.astype(str))
    return (tp.take(np.flatnonzero(np.isin(tp.user_ids.astype(str), both))),
            sp.take(np.flatnonzero(np.isin(sp.user_ids.astype(str), both))))


def knn_probe(model, target: EncodedBatch, source: EncodedBatch, k=5, correspondence=None,
              metric="euclidean", source_model=None, target_domain="target") -> ProbeResult:
    """Nearest source items of each translated target item.

    Latents come from positive instances of users active in both domains and are
    averaged per item. Target item rows are mapped by the target translator and
    ranked against source item rows. ``source_model`` supplies source latents
    when ``model`` (an augmentation network) only covers the target domain.
    """
    if not has_translator(model):
        raise NoTranslatorError(f"{type(model).__name__} has no translator")
    src_model = source_model or model
    source_domain = "source" if target_domain == "target" else "target"
    if source_domain not in getattr(src_model, "H", {}):
        raise NoTranslatorError("no model covering the source domain was given")
    tgt, src = shared_positive_users(target, source)
    t_items, zt = _item_means(model.latent(tgt, target_domain), tgt.item_ids)
    s_items, zs = _item_means(src_model.latent(src, source_domain), src.item_ids)
    if k > len(s_items):
        raise ConfigError(f"k={k} exceeds the {len(s_items)} source items")
    zt_prime = translate(zt, model.W_tran[target_domain].value)
    dist = pairwise_distances(zt_prime, zs, metric)
    order = np.argsort(dist, axis=1, kind="stable")
    nbrs = [[s_items[j] for j in row[:k]] for row in order]
    ranks = []
    if correspondence is not None:
        pos = {s: j for j, s in enumerate(s_items)}
        for i, t in enumerate(t_items):
            s = correspondence.get(t)
            ranks.append(None if s not in pos else int(np.flatnonzero(order[i] == pos[s])[0]) + 1)
    scored = [r for r in ranks if r is not None]
    recall = float(np.mean([r <= k for r in scored])) if scored else None
    return ProbeResult(t_items, zt_prime, s_items, nbrs, np.take_along_axis(dist, order[:, :k], 1),
                       ranks, k, recall, k / len(s_items))

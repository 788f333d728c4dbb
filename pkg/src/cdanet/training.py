"""Two-stage training, baselines and checkpoint files."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .features import FeatureSchema
from .metrics import auc, predict_proba
from .model import (AugmentationModel, MLPModel, ShareMiddleModel, TranslationModel,
                    build_model)
from .objectives import (LossWeights, augmentation_objective, translation_objective,
                         vanilla_objective)

log = logging.getLogger(__name__)

MAGIC = b"CDANETv1"
STAGES = ("translation", "augmentation", "baseline")

__all__ = ["TrainConfig", "Checkpoint", "TrainResult", "train_translation_stage",
           "train_augmentation_stage", "train_augmentation_from_scratch",
           "train_baseline_mlp", "train_baseline_sharemiddle", "save_checkpoint",
           "load_checkpoint"]


class DivergenceError(FloatingPointError):
    pass


class StageError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    model_kind: str
    config: dict
    schemas: dict
    params: dict
    summary: dict = field(default_factory=dict)
    domain: str = "target"

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def resolved_schemas(self) -> dict:
        return {k: FeatureSchema.from_dict(v) for k, v in self.schemas.items()}


@dataclass
class TrainResult:
    model: object
    checkpoint: Checkpoint
    history: list


def checkpoint_from_model(model, stage: str, summary=None) -> Checkpoint:
    if stage not in STAGES:
        raise StageError(f"unknown stage '{stage}'")
    return Checkpoint(stage, model.kind, model.cfg.to_dict(),
                      {k: s.to_dict() for k, s in model.schemas.items()},
                      model.store.values(), dict(summary or {}),
                      getattr(model, "domain", "target"))


def model_from_checkpoint(ckpt: Checkpoint):
    model = build_model(ckpt.model_kind, ckpt.resolved_schemas(), ckpt.train_config(), ckpt.domain)
    if set(model.store.names()) != set(ckpt.params):
        raise IntegrityError("checkpoint parameter names do not match the model")
    model.store.load_values(ckpt.params)
    return model


# ------------------------------------------------------------------- files

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = list(ckpt.params)
    manifest = {
        "stage": ckpt.stage, "model_kind": ckpt.model_kind, "domain": ckpt.domain,
        "config": ckpt.config, "schemas": ckpt.schemas, "summary": ckpt.summary,
        "params": [{"name": n, "shape": list(ckpt.params[n].shape), "dtype": "<f8"} for n in names],
    }
    blob = b"".join(np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes() for n in names)
    manifest["blob_bytes"] = len(blob)
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + hlen > len(data):
        raise IntegrityError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt manifest ({exc})") from None
    blob = data[start + hlen:]
    expected = sum(8 * int(np.prod(p["shape"])) for p in manifest["params"])
    if len(blob) != manifest["blob_bytes"] or len(blob) != expected:
        raise IntegrityError(f"{path}: blob has {len(blob)} bytes, manifest expects {expected}")
    names = [p["name"] for p in manifest["params"]]
    if len(set(names)) != len(names):
        raise IntegrityError(f"{path}: duplicate parameter names")
    params, off = {}, 0
    for p in manifest["params"]:
        size = int(np.prod(p["shape"]))
        params[p["name"]] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(
            np.float64).reshape(p["shape"])
        off += 8 * size
    return Checkpoint(manifest["stage"], manifest["model_kind"], manifest["config"],
                      manifest["schemas"], params, manifest["summary"], manifest["domain"])


# ------------------------------------------------------------------- loop

class _Cycler:
    """Endless shuffled index stream; reshuffles each time it runs dry."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.perm, self.pos = rng.permutation(n), 0

    def take(self, k):
        out = []
        while k > 0:
            if self.pos == self.n:
                self.perm, self.pos = self.rng.permutation(self.n), 0
            chunk = self.perm[self.pos:self.pos + k]
            self.pos += chunk.size
            k -= chunk.size
            out.append(chunk)
        return np.concatenate(out)


def _first_nonfinite(parts: dict, store) -> str:
    for k, v in parts.items():
        if not np.isfinite(v):
            return f"loss part '{k}'"
    for p in store:
        if not np.all(np.isfinite(p.value)):
            return f"parameter '{p.name}'"
        if not np.all(np.isfinite(p.grad)):
            return f"gradient of '{p.name}'"
    return "unknown tensor"


def _fit(model, step, n_train, val, val_domain, cfg: TrainConfig, stage, rng,
         frozen=frozenset(), metrics_path=None):
    opt = nx.Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    model.store.zero_grad()
    history = []
    best_auc, best_params, best_epoch, wait = -np.inf, None, -1, 0
    metrics_fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    timing_fh = (open(Path(metrics_path).with_name("timing.jsonl"), "a", encoding="utf-8")
                 if metrics_path else None)
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            perm = rng.permutation(n_train)
            sums, steps = {}, 0
            for lo in range(0, n_train, cfg.batch_size):
                parts = step(perm[lo:lo + cfg.batch_size])
                if not np.isfinite(parts["total"]):
                    raise DivergenceError(
                        f"{stage} epoch {epoch}: non-finite {_first_nonfinite(parts, model.store)}")
                opt.step(model.store, skip=frozen)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                steps += 1
            record = {"stage": stage, "epoch": epoch, "seed": cfg.seed}
            record.update({k: v / steps for k, v in sums.items()})
            scores = predict_proba(model, val, val_domain, cfg.eval_batch_size)
            record["val_auc"] = auc(scores, val.labels)
            history.append(record)
            if metrics_fh:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                timing_fh.write(json.dumps({"stage": stage, "epoch": epoch,
                                            "wall_time": time.perf_counter() - t0}) + "\n")
            log.info("%s epoch %d loss %.5f val_auc %.4f", stage, epoch, record["total"],
                     record["val_auc"])
            if record["val_auc"] > best_auc:
                best_auc, best_epoch, wait = record["val_auc"], epoch, 0
                if cfg.early_stopping:
                    best_params = model.store.values()
            else:
                wait += 1
                if cfg.early_stopping and wait >= cfg.patience:
                    break
    finally:
        if metrics_fh:
            metrics_fh.close()
            timing_fh.close()
    if cfg.early_stopping and best_params is not None:
        model.store.load_values(best_params)
    summary = {"best_val_auc": best_auc, "best_epoch": best_epoch,
               "epochs_run": len(history), "history": history}
    return history, summary


def _source_ratio(cfg, train_s, train_t):
    return len(train_s) / len(train_t) if cfg.source_batch == "proportional" else 1.0


def _source_count(n_target, ratio):
    return max(1, int(round(n_target * ratio)))


def _stage_rng(cfg, salt):
    return np.random.default_rng([cfg.seed, salt])


def train_translation_stage(train_s, train_t, val_t, cfg: TrainConfig,
                            metrics_path=None) -> TrainResult:
    """Jointly train both domains on vanilla + cross-supervision + orthogonality losses.

    An epoch is one pass over the target train set. Each target batch is paired
    with a source batch drawn from a reshuffling stream: of equal size, or with
    ``source_batch="proportional"`` scaled by the train-set size ratio so an
    epoch also covers the source set once.
    """
    if len(train_s) == 0 or len(train_t) == 0:
        raise ValueError("both train sets must be non-empty")
    model = TranslationModel(train_s.schema, train_t.schema, cfg)
    weights = LossWeights(cfg.alpha, cfg.beta)
    rng = _stage_rng(cfg, 1)
    src = _Cycler(len(train_s), rng)
    ratio = _source_ratio(cfg, train_s, train_t)

    def step(idx):
        b = translation_objective(model, train_s.take(src.take(_source_count(idx.size, ratio))),
                                  train_t.take(idx),
                                  weights, cfg.orth_norm)
        return b.as_dict()

    history, summary = _fit(model, step, len(train_t), val_t, "target", cfg, "translation",
                            rng, metrics_path=metrics_path)
    return TrainResult(model, checkpoint_from_model(model, "translation", summary), history)


def transfer_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig | None = None,
                             domain="target") -> AugmentationModel:
    """Augmentation model whose transferred params are read from ``ckpt``.

    Only the augmented domain's embedding, the extractor parts it uses and its
    translator are read; source-side params and both old towers are never touched.
    """
    if ckpt.stage != "translation":
        raise StageError(f"augmentation needs a translation checkpoint, got '{ckpt.stage}'")
    cfg = cfg or ckpt.train_config()
    schema = FeatureSchema.from_dict(ckpt.schemas[domain])
    aug = AugmentationModel(schema, cfg, domain)
    for name in sorted(aug.transferred):
        aug.store[name].value[...] = ckpt.params[name]
    return aug


def _train_augmentation(aug, train_t, val_t, cfg, frozen, metrics_path, stage_name):
    weights = LossWeights(cfg.alpha, cfg.beta)
    rng = _stage_rng(cfg, 2)

    def step(idx):
        v = augmentation_objective(aug, train_t.take(idx), weights, cfg.orth_norm)
        return {"total": v}

    return _fit(aug, step, len(train_t), val_t, aug.domain, cfg, stage_name, rng,
                frozen=frozen, metrics_path=metrics_path)


def train_augmentation_stage(ckpt: Checkpoint, train_t, val_t, cfg: TrainConfig | None = None,
                             metrics_path=None, use_translator=True) -> TrainResult:
    """Fine-tune transferred params plus a fresh 2d tower on target data only.

    ``use_translator=False`` is the z ⊕ 0 control: the translator is zeroed and
    frozen and the orthogonality term is dropped.
    """
    if ckpt.stage != "translation":
        raise StageError(f"augmentation needs a translation checkpoint, got '{ckpt.stage}'")
    cfg = cfg or ckpt.train_config()
    aug = transfer_from_checkpoint(ckpt, cfg, cfg.target_domain)
    frozen = aug.transferred if cfg.freeze_transferred else frozenset()
    if not use_translator:
        W = aug.W_tran[cfg.target_domain]
        W.value[...] = 0.0
        frozen = frozen | {W.name}
        cfg = cfg.with_(beta=0.0)
    history, summary = _train_augmentation(aug, train_t, val_t, cfg, frozen, metrics_path,
                                           "augmentation")
    return TrainResult(aug, checkpoint_from_model(aug, "augmentation", summary), history)


def train_augmentation_from_scratch(train_t, val_t, cfg: TrainConfig,
                                    metrics_path=None) -> TrainResult:
    """Augmentation architecture trained from random init (no translation stage)."""
    aug = AugmentationModel(train_t.schema, cfg, cfg.target_domain)
    history, summary = _train_augmentation(aug, train_t, val_t, cfg, frozenset(), metrics_path,
                                           "augmentation")
    return TrainResult(aug, checkpoint_from_model(aug, "augmentation", summary), history)


def train_baseline_mlp(train, val, cfg: TrainConfig, domain="target",
                       metrics_path=None) -> TrainResult:
    model = MLPModel(train.schema, cfg, domain)
    rng = _stage_rng(cfg, 3)

    def step(idx):
        losses = vanilla_objective(model, {domain: train.take(idx)})
        return {"total": losses[domain]}

    history, summary = _fit(model, step, len(train), val, domain, cfg, "baseline:mlp", rng,
                            metrics_path=metrics_path)
    return TrainResult(model, checkpoint_from_model(model, "baseline", summary), history)


def train_baseline_sharemiddle(train_s, train_t, val_t, cfg: TrainConfig,
                               metrics_path=None) -> TrainResult:
    model = ShareMiddleModel(train_s.schema, train_t.schema, cfg)
    rng = _stage_rng(cfg, 4)
    src = _Cycler(len(train_s), rng)
    ratio = _source_ratio(cfg, train_s, train_t)

    def step(idx):
        sb = train_s.take(src.take(_source_count(idx.size, ratio)))
        losses = vanilla_objective(model, {"source": sb,
                                           "target": train_t.take(idx)})
        return {"vani_s": losses["source"], "vani_t": losses["target"],
                "total": losses["source"] + losses["target"]}

    history, summary = _fit(model, step, len(train_t), val_t, "target", cfg,
                            "baseline:sharemiddle", rng, metrics_path=metrics_path)
    return TrainResult(model, checkpoint_from_model(model, "baseline", summary), history)

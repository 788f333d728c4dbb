"""Computation graph: decoupled embeddings, MMOE extractor, translators, towers.

Layers keep no per-call state; ``forward`` returns ``(output, cache)`` and
``backward(dout, cache)`` accumulates parameter gradients and returns the
gradient w.r.t. the layer input. This lets one expert or tower run on both
domains inside a single step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .features import ID, MULTI_HOT, ONE_HOT, EncodedBatch, FeatureSchema

DOMAINS = ("source", "target")
SUFFIX = {"source": "s", "target": "t"}


class EmbeddingLookupError(IndexError):
    """Embedding index outside the field's table."""


class NoTranslatorError(TypeError):
    pass


def _other(domain: str) -> str:
    return "target" if domain == "source" else "source"


class Dense:
    def __init__(self, store, name, fan_in, fan_out, rng, activate=True):
        self.W = store.add(f"{name}.W", nx.glorot_uniform(rng, fan_in, fan_out))
        self.b = store.add(f"{name}.b", np.zeros((1, fan_out)))
        self.activate = activate

    def forward(self, x):
        pre = nx.affine(x, self.W.value, self.b.value)
        return (nx.relu(pre) if self.activate else pre), (x, pre)

    def backward(self, dout, cache):
        x, pre = cache
        if self.activate:
            dout = nx.relu_backward(dout, pre)
        dx, dW, db = nx.affine_backward(dout, x, self.W.value)
        self.W.grad += dW
        self.b.grad += db
        return dx


class MLP:
    """Stack of Dense layers; ``widths`` includes input and output widths."""

    def __init__(self, store, name, widths, rng, last_activate=True):
        n = len(widths) - 1
        self.in_width, self.out_width = widths[0], widths[-1]
        self.layers = [Dense(store, f"{name}.{i}", widths[i], widths[i + 1], rng,
                             activate=last_activate or i < n - 1) for i in range(n)]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dout, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dout = layer.backward(dout, c)
        return dout


class EmbeddingLayer:
    """Per-field lookups concatenated and projected affinely to width d.

    Categorical one-hot/multi-hot fields occupy ``cardinality`` input slots and
    are realized as row lookups into the projection; multi-hot rows are
    mean-pooled (an empty list contributes nothing). id-embedding fields go
    through their own table first. Dense fields enter the projection as is.
    """

    def __init__(self, store, prefix, schema: FeatureSchema, d, rng):
        self.schema = schema
        self.prefix = prefix
        self.d = d
        self.tables = {}
        for f in schema.fields:
            if f.kind == ID:
                init = nx.glorot_uniform(rng, f.cardinality, f.embed_dim)
                self.tables[f.name] = store.add(f"{prefix}.{f.name}.table", init)
        self.proj = Dense(store, f"{prefix}.proj", schema.total_input_dim, d, rng, activate=False)
        self.offsets = {}
        off = 0
        for f in schema.fields:
            self.offsets[f.name] = off
            off += f.width

    def _check(self, f, idx):
        if idx.size and (idx.max() >= f.cardinality or idx.min() < (-1 if f.kind == MULTI_HOT else 0)):
            raise EmbeddingLookupError(f"{self.prefix}.{f.name}: index out of range [0, {f.cardinality})")

    def forward(self, batch: EncodedBatch):
        W, b = self.proj.W.value, self.proj.b.value
        n = len(batch)
        h = np.repeat(b, n, axis=0)
        cache = {}
        for f in self.schema.fields:
            o = self.offsets[f.name]
            if f.kind == ID:
                idx = batch.cats[f.name]
                self._check(f, idx)
                e = self.tables[f.name].value[idx]
                h += e @ W[o:o + f.width]
                cache[f.name] = (idx, e)
            elif f.kind == ONE_HOT:
                idx = batch.cats[f.name]
                self._check(f, idx)
                h += W[o + idx]
                cache[f.name] = idx
            elif f.kind == MULTI_HOT:
                m = batch.multi[f.name]
                self._check(f, m)
                valid = m >= 0
                counts = valid.sum(axis=1)
                rows, cols = np.nonzero(valid)
                wts = 1.0 / counts[rows]
                np.add.at(h, rows, W[o + m[rows, cols]] * wts[:, None])
                cache[f.name] = (rows, o + m[rows, cols], wts)
            else:
                x = batch.dense[f.name]
                if x.shape[1] != f.width:
                    raise nx.DimensionError(f"{f.name}: dense width {x.shape[1]} != {f.width}")
                h += x @ W[o:o + f.width]
                cache[f.name] = x
        return h, cache

    def backward(self, dh, cache):
        W = self.proj.W.value
        dW = self.proj.W.grad
        self.proj.b.grad += dh.sum(axis=0, keepdims=True)
        for f in self.schema.fields:
            o = self.offsets[f.name]
            c = cache[f.name]
            if f.kind == ID:
                idx, e = c
                dW[o:o + f.width] += e.T @ dh
                np.add.at(self.tables[f.name].grad, idx, dh @ W[o:o + f.width].T)
            elif f.kind == ONE_HOT:
                np.add.at(dW, o + c, dh)
            elif f.kind == MULTI_HOT:
                rows, slots, wts = c
                np.add.at(dW, slots, dh[rows] * wts[:, None])
            else:
                dW[o:o + f.width] += c.T @ dh


class MmoeExtractor:
    """K shared experts mixed per domain by a softmax gate."""

    kind = "mmoe"

    def __init__(self, store, d, K, L, rng, domains=DOMAINS):
        self.K = K
        self.experts = [MLP(store, f"expert.{i}", [d] * (L + 1), rng) for i in range(K)]
        self.gates = {dom: MLP(store, f"gate_{SUFFIX[dom]}", [d] * (L + 1), rng) for dom in domains}
        self.W_gate = {dom: store.add(f"W_gate_{SUFFIX[dom]}", nx.glorot_uniform(rng, d, K, shape=(K, d)))
                       for dom in domains}

    def gate(self, h, domain):
        gh, gc = self.gates[domain].forward(h)
        return nx.softmax_rows(gh @ self.W_gate[domain].value.T), (gh, gc)

    def extract(self, h, domain):
        outs = [e.forward(h) for e in self.experts]
        g, gcache = self.gate(h, domain)
        z = np.zeros_like(outs[0][0])
        for k, (f, _) in enumerate(outs):
            z += g[:, k:k + 1] * f
        return z, (domain, outs, g, gcache)

    def backward(self, dz, cache):
        domain, outs, g, (gh, gc) = cache
        dg = np.stack([np.einsum("ij,ij->i", dz, f) for f, _ in outs], axis=1)
        dlogits = nx.softmax_rows_backward(dg, g)
        Wg = self.W_gate[domain]
        Wg.grad += dlogits.T @ gh
        dh = self.gates[domain].backward(dlogits @ Wg.value, gc)
        for k, (e, (_, c)) in enumerate(zip(self.experts, outs)):
            dh = dh + e.backward(dz * g[:, k:k + 1], c)
        return dh


class SharedExtractor:
    """One MLP shared by both domains (ShareMiddle body, MMOE ablation)."""

    kind = "shared"

    def __init__(self, store, d, L, rng, name="middle"):
        self.mlp = MLP(store, name, [d] * (L + 1), rng)

    def extract(self, h, domain):
        return self.mlp.forward(h)

    def backward(self, dz, cache):
        return self.mlp.backward(dz, cache)


def translate(z: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Row-wise z' = W z, i.e. z @ W.T."""
    if W.shape[0] != W.shape[1] or z.shape[1] != W.shape[1]:
        raise nx.DimensionError(f"translate: z{z.shape} with W{W.shape}")
    return z @ W.T


def translate_backward(dzp, z, W):
    """Returns (dz, dW)."""
    return dzp @ W, dzp.T @ z


def augment(z, z_prime):
    if z.shape != z_prime.shape:
        raise nx.DimensionError(f"augment: {z.shape} vs {z_prime.shape}")
    return nx.concat_cols(z, z_prime)


class Tower:
    """Prediction head ending in a raw logit (no sigmoid)."""

    def __init__(self, store, name, in_width, n_layers, width, rng):
        self.in_width = in_width
        self.mlp = MLP(store, name, [in_width] + [width] * (n_layers - 1) + [1], rng,
                       last_activate=False)

    def forward(self, z):
        if z.shape[1] != self.in_width:
            raise nx.DimensionError(f"tower expects width {self.in_width}, got {z.shape[1]}")
        return self.mlp.forward(z)

    def backward(self, dlogit, cache):
        return self.mlp.backward(dlogit, cache)


def _make_extractor(store, cfg: TrainConfig, rng, domains=DOMAINS):
    if cfg.extractor == "mmoe":
        return MmoeExtractor(store, cfg.d, cfg.K, cfg.L, rng, domains)
    return SharedExtractor(store, cfg.d, cfg.L, rng)


def _tower_layers(cfg, domain):
    return cfg.tower_layers_s if domain == "source" else cfg.tower_layers_t


@dataclass
class TranslationOutputs:
    logit_s: np.ndarray
    logit_t: np.ndarray
    logit_s_cross: np.ndarray
    logit_t_cross: np.ndarray
    z_s: np.ndarray
    z_t: np.ndarray
    cache: tuple = None


class TranslationModel:
    """Stage-one network trained jointly on both domains."""

    kind = "translation"

    def __init__(self, schema_s: FeatureSchema, schema_t: FeatureSchema, cfg: TrainConfig,
                 seed: int | None = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.cfg = cfg
        self.schemas = {"source": schema_s, "target": schema_t}
        self.store = s = nx.ParamStore()
        self.H = {"source": EmbeddingLayer(s, "H_s", schema_s, cfg.d, rng),
                  "target": EmbeddingLayer(s, "H_t", schema_t, cfg.d, rng)}
        self.extractor = _make_extractor(s, cfg, rng)
        self.W_tran = {dom: s.add(f"W_tran_{SUFFIX[dom]}", nx.glorot_uniform(rng, cfg.d, cfg.d))
                       for dom in DOMAINS}
        self.towers = {dom: Tower(s, f"tower_{SUFFIX[dom]}", cfg.d, _tower_layers(cfg, dom),
                                  cfg.tower_width, rng) for dom in DOMAINS}

    def latent(self, batch, domain):
        h, _ = self.H[domain].forward(batch)
        return self.extractor.extract(h, domain)[0]

    def gates(self, batch, domain):
        h, _ = self.H[domain].forward(batch)
        return self.extractor.gate(h, domain)[0]

    def predict_logits(self, batch, domain="target"):
        z = self.latent(batch, domain)
        return self.towers[domain].forward(z)[0]

    def forward(self, batch_s, batch_t) -> TranslationOutputs:
        caches = {}
        z, logit, logit_cross = {}, {}, {}
        for dom, batch in (("source", batch_s), ("target", batch_t)):
            h, ch = self.H[dom].forward(batch)
            z[dom], cz = self.extractor.extract(h, dom)
            logit[dom], ct = self.towers[dom].forward(z[dom])
            # cross supervision: translated latent scored by the other domain's tower
            zp = translate(z[dom], self.W_tran[dom].value)
            logit_cross[dom], cx = self.towers[_other(dom)].forward(zp)
            caches[dom] = (ch, cz, ct, cx)
        return TranslationOutputs(logit["source"], logit["target"], logit_cross["source"],
                                  logit_cross["target"], z["source"], z["target"], caches)

    def backward(self, out: TranslationOutputs, grads: dict) -> None:
        """Backprop. ``grads`` maps output names (logit_s, ..., z_t) to upstream grads."""
        for dom in DOMAINS:
            sfx = SUFFIX[dom]
            ch, cz, ct, cx = out.cache[dom]
            z = out.z_s if dom == "source" else out.z_t
            dz = np.zeros_like(z)
            if grads.get(f"z_{sfx}") is not None:
                dz += grads[f"z_{sfx}"]
            if grads.get(f"logit_{sfx}") is not None:
                dz += self.towers[dom].backward(grads[f"logit_{sfx}"], ct)
            if grads.get(f"logit_{sfx}_cross") is not None:
                dzp = self.towers[_other(dom)].backward(grads[f"logit_{sfx}_cross"], cx)
                W = self.W_tran[dom]
                dz_, dW = translate_backward(dzp, z, W.value)
                dz += dz_
                W.grad += dW
            dh = self.extractor.backward(dz, cz)
            self.H[dom].backward(dh, ch)


def forward_translation(batch_s, batch_t, m: TranslationModel) -> TranslationOutputs:
    return m.forward(batch_s, batch_t)


@dataclass
class AugmentationOutputs:
    logit_aug: np.ndarray
    z_t: np.ndarray
    z_t_prime: np.ndarray
    cache: tuple = None


class AugmentationModel:
    """Stage-two network: embedding, extractor and translator of one domain plus a fresh 2d tower.

    ``domain`` is the domain being augmented (the target in every experiment).
    Parameter names keep the translation-stage names so values can be compared
    with the checkpoint they came from.
    """

    kind = "augmentation"

    def __init__(self, schema: FeatureSchema, cfg: TrainConfig, domain="target",
                 seed: int | None = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.cfg = cfg
        self.domain = domain
        self.schemas = {domain: schema}
        self.store = s = nx.ParamStore()
        sfx = SUFFIX[domain]
        self.H = {domain: EmbeddingLayer(s, f"H_{sfx}", schema, cfg.d, rng)}
        self.extractor = _make_extractor(s, cfg, rng, domains=(domain,))
        self.W_tran = {domain: s.add(f"W_tran_{sfx}", nx.glorot_uniform(rng, cfg.d, cfg.d))}
        self.transferred = frozenset(s.names())
        self.tower = Tower(s, "tower_aug", 2 * cfg.d, _tower_layers(cfg, domain), cfg.tower_width, rng)

    def latent(self, batch, domain=None):
        domain = domain or self.domain
        h, _ = self.H[domain].forward(batch)
        return self.extractor.extract(h, domain)[0]

    def forward(self, batch) -> AugmentationOutputs:
        h, ch = self.H[self.domain].forward(batch)
        z, cz = self.extractor.extract(h, self.domain)
        zp = translate(z, self.W_tran[self.domain].value)
        logit, ct = self.tower.forward(augment(z, zp))
        return AugmentationOutputs(logit, z, zp, (ch, cz, ct))

    def backward(self, out: AugmentationOutputs, grads: dict) -> None:
        ch, cz, ct = out.cache
        d = out.z_t.shape[1]
        dz = np.zeros_like(out.z_t)
        if grads.get("z_t") is not None:
            dz += grads["z_t"]
        if grads.get("logit_aug") is not None:
            dz_aug = self.tower.backward(grads["logit_aug"], ct)
            dz_left, dzp = nx.concat_cols_backward(dz_aug, d)
            W = self.W_tran[self.domain]
            dz_, dW = translate_backward(dzp, out.z_t, W.value)
            dz += dz_left + dz_
            W.grad += dW
        dh = self.extractor.backward(dz, cz)
        self.H[self.domain].backward(dh, ch)

    def predict_logits(self, batch, domain=None):
        return self.forward(batch).logit_aug


def forward_augmentation(batch_t, m: AugmentationModel) -> AugmentationOutputs:
    return m.forward(batch_t)


def transfer_parameters(src: TranslationModel, target_domain="target",
                        seed: int | None = None) -> AugmentationModel:
    """Build the augmentation network from a trained translation network.

    Embedding, extractor and translator values are copied; the tower is newly
    initialized (the source model's towers are not carried over).
    """
    aug = AugmentationModel(src.schemas[target_domain], src.cfg, target_domain, seed=seed)
    for name in aug.transferred:
        aug.store[name].value[...] = src.store[name].value
    return aug


class MLPModel:
    """Single-domain baseline: embedding, L-layer body, tower."""

    kind = "mlp"

    def __init__(self, schema: FeatureSchema, cfg: TrainConfig, domain="target",
                 seed: int | None = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.cfg = cfg
        self.domain = domain
        self.schemas = {domain: schema}
        self.store = s = nx.ParamStore()
        sfx = SUFFIX[domain]
        self.H = {domain: EmbeddingLayer(s, f"H_{sfx}", schema, cfg.d, rng)}
        self.body = MLP(s, "body", [cfg.d] * (cfg.L + 1), rng)
        self.towers = {domain: Tower(s, f"tower_{sfx}", cfg.d, _tower_layers(cfg, domain),
                                     cfg.tower_width, rng)}

    def forward(self, batch, domain=None):
        domain = domain or self.domain
        h, ch = self.H[domain].forward(batch)
        z, cb = self.body.forward(h)
        logit, ct = self.towers[domain].forward(z)
        return logit, (ch, cb, ct)

    def backward(self, dlogit, cache, domain=None):
        domain = domain or self.domain
        ch, cb, ct = cache
        dz = self.towers[domain].backward(dlogit, ct)
        self.H[domain].backward(self.body.backward(dz, cb), ch)

    def predict_logits(self, batch, domain=None):
        return self.forward(batch, domain)[0]


class ShareMiddleModel:
    """Two-domain baseline: private embeddings, one shared middle MLP, private towers."""

    kind = "sharemiddle"

    def __init__(self, schema_s, schema_t, cfg: TrainConfig, seed: int | None = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.cfg = cfg
        self.schemas = {"source": schema_s, "target": schema_t}
        self.store = s = nx.ParamStore()
        self.H = {"source": EmbeddingLayer(s, "H_s", schema_s, cfg.d, rng),
                  "target": EmbeddingLayer(s, "H_t", schema_t, cfg.d, rng)}
        self.middle = SharedExtractor(s, cfg.d, cfg.L, rng, name="middle")
        self.towers = {dom: Tower(s, f"tower_{SUFFIX[dom]}", cfg.d, _tower_layers(cfg, dom),
                                  cfg.tower_width, rng) for dom in DOMAINS}

    def forward(self, batch, domain):
        h, ch = self.H[domain].forward(batch)
        z, cm = self.middle.extract(h, domain)
        logit, ct = self.towers[domain].forward(z)
        return logit, (ch, cm, ct)

    def backward(self, dlogit, cache, domain):
        ch, cm, ct = cache
        dz = self.towers[domain].backward(dlogit, ct)
        self.H[domain].backward(self.middle.backward(dz, cm), ch)

    def predict_logits(self, batch, domain="target"):
        return self.forward(batch, domain)[0]


MODEL_KINDS = {m.kind: m for m in (TranslationModel, AugmentationModel, MLPModel, ShareMiddleModel)}


def build_model(kind: str, schemas: dict, cfg: TrainConfig, domain="target"):
    """Construct an untrained model of ``kind`` from resolved schemas."""
    if kind == "translation":
        return TranslationModel(schemas["source"], schemas["target"], cfg)
    if kind == "augmentation":
        return AugmentationModel(schemas[domain], cfg, domain)
    if kind == "mlp":
        return MLPModel(schemas[domain], cfg, domain)
    if kind == "sharemiddle":
        return ShareMiddleModel(schemas["source"], schemas["target"], cfg)
    raise ValueError(f"unknown model kind '{kind}'")


def has_translator(model) -> bool:
    return hasattr(model, "W_tran")

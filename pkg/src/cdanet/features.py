"""Two-domain interaction logs: schemas, parsing, preparation protocol, encoding.

Also hosts the synthetic world generator used for desk-scale experiments: users
and items share latent vectors across domains but each domain observes them
through its own feature fields.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ID = "id-embedding"
ONE_HOT = "one-hot"
MULTI_HOT = "multi-hot"
DENSE = "dense-vector"
KINDS = (ID, ONE_HOT, MULTI_HOT, DENSE)
CATEGORICAL = (ID, ONE_HOT, MULTI_HOT)
REQUIRED_COLUMNS = ("user_id", "item_id", "timestamp", "label")
OOV = 0


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, msg, line=None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class EncodingError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str
    cardinality: int
    embed_dim: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"field '{self.name}': unknown kind '{self.kind}'")
        if self.cardinality < 1:
            raise SchemaError(f"field '{self.name}': cardinality must be >= 1")
        if self.kind == ID and self.embed_dim < 1:
            raise SchemaError(f"field '{self.name}': id-embedding needs embed_dim >= 1")

    @property
    def width(self) -> int:
        """Width of this field's slot in the concatenated input vector."""
        return self.embed_dim if self.kind == ID else self.cardinality


@dataclass(frozen=True)
class FeatureSchema:
    domain_tag: str
    fields: tuple[FieldSpec, ...]

    def __post_init__(self):
        if self.domain_tag not in ("source", "target"):
            raise SchemaError(f"domain_tag must be source or target, got '{self.domain_tag}'")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in {names}")
        object.__setattr__(self, "fields", tuple(self.fields))

    @property
    def total_input_dim(self) -> int:
        return sum(f.width for f in self.fields)

    def field(self, name: str) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise SchemaError(f"no field named '{name}'")

    def to_dict(self) -> dict:
        return {"domain_tag": self.domain_tag, "fields": [asdict(f) for f in self.fields]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(d["domain_tag"], tuple(FieldSpec(**f) for f in d["fields"]))


def load_schema(path) -> FeatureSchema:
    with open(path, encoding="utf-8") as fh:
        return FeatureSchema.from_dict(json.load(fh))


def save_schema(schema: FeatureSchema, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
        fh.write("\n")


@dataclass
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int
    raw_fields: dict
    label: int


# ---------------------------------------------------------------- log files

def _parse_value(spec: FieldSpec, text: str):
    if spec.kind == MULTI_HOT:
        return [t for t in text.split(",") if t] if text else []
    if spec.kind == DENSE:
        return np.array([float(t) for t in text.split()], dtype=np.float64)
    return text


def _format_value(spec: FieldSpec, value) -> str:
    if spec.kind == MULTI_HOT:
        return ",".join(value)
    if spec.kind == DENSE:
        return " ".join(repr(float(v)) for v in value)
    return str(value)


def parse_log(path, schema: FeatureSchema, binarize_threshold: float | None = None,
              stats: dict | None = None) -> list[InteractionRecord]:
    """Read a tab-separated interaction log.

    With ``binarize_threshold`` set, raw scores strictly greater than the
    threshold become label 1 and the rest 0; otherwise labels must be 0 or 1.
    Lines with the wrong column count are skipped and counted in ``stats``.
    """
    records = []
    malformed = 0
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, no header", line=1) from None
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise ParseError(f"missing required column '{col}'", line=1)
        known = {f.name for f in schema.fields}
        for col in header:
            if col not in known and col not in REQUIRED_COLUMNS:
                raise SchemaError(f"column '{col}' is not a field of the {schema.domain_tag} schema")
        for f in schema.fields:
            if f.name not in header:
                raise ParseError(f"missing schema field column '{f.name}'", line=1)
        pos = {c: i for i, c in enumerate(header)}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                malformed += 1
                continue
            raw_label = row[pos["label"]]
            try:
                if binarize_threshold is not None:
                    label = int(float(raw_label) > binarize_threshold)
                else:
                    label = int(raw_label)
                    if raw_label.strip() not in ("0", "1"):
                        raise ValueError
            except ValueError:
                raise ParseError(f"label '{raw_label}' is not 0/1", line=lineno) from None
            try:
                ts = int(row[pos["timestamp"]])
                fields = {f.name: _parse_value(f, row[pos[f.name]]) for f in schema.fields}
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            records.append(InteractionRecord(row[pos["user_id"]], row[pos["item_id"]],
                                             ts, fields, label))
    if malformed:
        log.warning("%s: skipped %d malformed line(s)", path, malformed)
    if stats is not None:
        stats["malformed"] = malformed
        stats["records"] = len(records)
    return records


def write_log(path, records, schema: FeatureSchema) -> None:
    extra = [f for f in schema.fields if f.name not in REQUIRED_COLUMNS]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(list(REQUIRED_COLUMNS) + [f.name for f in extra]) + "\n")
        for r in records:
            cols = [r.user_id, r.item_id, str(r.timestamp), str(r.label)]
            cols += [_format_value(f, r.raw_fields[f.name]) for f in extra]
            fh.write("\t".join(cols) + "\n")


# ------------------------------------------------------- preparation protocol

def binarize_ratings(ratings, threshold=3.0) -> np.ndarray:
    return (np.asarray(ratings, dtype=np.float64) > threshold).astype(np.int64)


def kcore_filter(records, k_user: int, k_item: int) -> list:
    """Drop users/items below their interaction minimum until nothing changes."""
    if k_user < 1 or k_item < 1:
        raise ConfigError("k_user and k_item must be >= 1")
    current = list(records)
    while True:
        users = Counter(r.user_id for r in current)
        items = Counter(r.item_id for r in current)
        kept = [r for r in current if users[r.user_id] >= k_user and items[r.item_id] >= k_item]
        if len(kept) == len(current):
            return kept
        current = kept


def split_sizes(n: int, ratios=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    """Floor the train and validation shares, give the rest to test.

    Validation and test must be non-empty: an empty validation share takes one
    record from test (if test keeps one) or else from train; an empty test
    share takes one from train.
    """
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    if n < 3:
        raise InsufficientDataError(f"need at least 3 records to split, got {n}")
    n_train = math.floor(ratios[0] * n)
    n_val = math.floor(ratios[1] * n)
    n_test = n - n_train - n_val
    if n_val == 0:
        if n_test >= 2:
            n_test -= 1
        else:
            n_train -= 1
        n_val = 1
    if n_test == 0:
        n_train -= 1
        n_test = 1
    return n_train, n_val, n_test


def chrono_split(records, ratios=(0.8, 0.1, 0.1)):
    ordered = sorted(records, key=lambda r: r.timestamp)  # stable: ties keep input order
    n_train, n_val, _ = split_sizes(len(ordered), ratios)
    return (ordered[:n_train], ordered[n_train:n_train + n_val], ordered[n_train + n_val:])


def subsample_train(train, ratio: float, seed: int) -> list:
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"train ratio must be in (0, 1], got {ratio}")
    n = len(train)
    keep = math.floor(ratio * n)
    idx = np.sort(np.random.default_rng(seed).choice(n, size=keep, replace=False))
    return [train[i] for i in idx]


# ------------------------------------------------------------------- encoding

@dataclass
class EncodedBatch:
    """Index-encoded samples of one domain.

    ``cats`` holds one index per sample (id-embedding and one-hot fields),
    ``multi`` a right-padded index matrix with -1 padding, ``dense`` real rows.
    """
    schema: FeatureSchema
    cats: dict
    multi: dict
    dense: dict
    labels: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    def __len__(self):
        return self.labels.shape[0]

    def take(self, idx) -> "EncodedBatch":
        idx = np.asarray(idx)
        return EncodedBatch(
            self.schema,
            {k: v[idx] for k, v in self.cats.items()},
            {k: v[idx] for k, v in self.multi.items()},
            {k: v[idx] for k, v in self.dense.items()},
            self.labels[idx], self.user_ids[idx], self.item_ids[idx])

    def positives(self) -> "EncodedBatch":
        return self.take(np.flatnonzero(self.labels[:, 0] == 1.0))


class FeatureEncoder:
    """Frozen train-split vocabularies; index 0 is reserved for unseen values."""

    def __init__(self, schema: FeatureSchema, vocabs: dict[str, dict[str, int]]):
        self.vocabs = vocabs
        fields = []
        for f in schema.fields:
            if f.kind in CATEGORICAL:
                f = replace(f, cardinality=len(vocabs[f.name]) + 1)
            fields.append(f)
        self.schema = FeatureSchema(schema.domain_tag, tuple(fields))

    @classmethod
    def fit(cls, train, schema: FeatureSchema) -> "FeatureEncoder":
        vocabs = {}
        for f in schema.fields:
            if f.kind not in CATEGORICAL:
                continue
            seen = set()
            for r in train:
                v = r.raw_fields[f.name]
                seen.update(v if f.kind == MULTI_HOT else (v,))
            vocabs[f.name] = {v: i + 1 for i, v in enumerate(sorted(seen))}
        return cls(schema, vocabs)

    def encode(self, records) -> EncodedBatch:
        n = len(records)
        cats, multi, dense = {}, {}, {}
        for f in self.schema.fields:
            if f.kind in (ID, ONE_HOT):
                vocab = self.vocabs[f.name]
                cats[f.name] = np.fromiter((vocab.get(r.raw_fields[f.name], OOV) for r in records),
                                           dtype=np.int64, count=n)
            elif f.kind == MULTI_HOT:
                vocab = self.vocabs[f.name]
                rows = [[vocab.get(v, OOV) for v in r.raw_fields[f.name]] for r in records]
                width = max((len(x) for x in rows), default=0)
                m = np.full((n, max(width, 1)), -1, dtype=np.int64)
                for i, x in enumerate(rows):
                    m[i, :len(x)] = x
                multi[f.name] = m
            else:
                m = np.zeros((n, f.cardinality))
                for i, r in enumerate(records):
                    v = np.asarray(r.raw_fields[f.name], dtype=np.float64)
                    if v.shape != (f.cardinality,):
                        raise EncodingError(
                            f"field '{f.name}': expected {f.cardinality} values, got {v.size}")
                    m[i] = v
                dense[f.name] = m
        labels = np.array([r.label for r in records], dtype=np.float64).reshape(n, 1)
        users = np.array([r.user_id for r in records], dtype=object)
        items = np.array([r.item_id for r in records], dtype=object)
        return EncodedBatch(self.schema, cats, multi, dense, labels, users, items)

    def to_dict(self) -> dict:
        return {"schema": self.schema.to_dict(), "vocabs": self.vocabs}

    @classmethod
    def from_dict(cls, d) -> "FeatureEncoder":
        return cls(FeatureSchema.from_dict(d["schema"]), d["vocabs"])


def encode_batch(records, schema: FeatureSchema, train=None) -> EncodedBatch:
    """Encode ``records`` with vocabularies built from ``train`` (default: records)."""
    return FeatureEncoder.fit(records if train is None else train, schema).encode(records)


# ------------------------------------------------------------ synthetic world

@dataclass
class SynthConfig:
    n_users: int = 3000
    n_items_source: int = 1200
    n_items_target: int = 600
    latent_dim: int = 8
    n_source: int = 250_000
    n_target: int = 62_500
    noise: float = 0.5
    signal: float = 2.0
    pos_rate: float = 0.25
    # share of each user's taste that is private to a domain (0: identical tastes)
    user_drift: float = 0.0
    # per-domain layout: (user profile width, item text width, one-hot cardinalities, multi-hot cardinality)
    source_profile_dim: int = 12
    target_profile_dim: int = 10
    source_text_dim: int = 16
    target_text_dim: int = 10
    source_onehot: tuple = (40, 15)
    target_onehot: tuple = (25, 8)
    target_multihot: int = 12
    # 0 leaves user_id/item_id out of the feature schemas (they stay log columns);
    # every entity here is fully described by its content features, so id
    # embeddings only add memorization capacity
    id_embed_dim: int = 0
    seed: int = 0

    def __post_init__(self):
        for k in ("n_users", "n_items_source", "n_items_target", "latent_dim",
                  "n_source", "n_target"):
            if getattr(self, k) < 1:
                raise ConfigError(f"SynthConfig.{k} must be >= 1")
        if self.id_embed_dim < 0:
            raise ConfigError("id_embed_dim must be >= 0")
        if self.n_items_target > self.n_items_source:
            raise ConfigError("n_items_target must not exceed n_items_source")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if not 0.0 <= self.user_drift <= 1.0:
            raise ConfigError("user_drift must be in [0, 1]")
        if not 0.0 < self.pos_rate < 1.0:
            raise ConfigError("pos_rate must be in (0, 1)")


@dataclass
class SynthWorld:
    source: list
    target: list
    correspondence: dict  # target item id -> source item id
    source_schema: FeatureSchema
    target_schema: FeatureSchema
    user_taste: dict = field(repr=False)       # domain -> (n_users, r) latent tastes
    item_latent: np.ndarray = field(repr=False)  # indexed by source item index
    bias: float = 0.0
    scale: float = 1.0
    positive_rate: float = 0.0


def synth_schemas(cfg: SynthConfig) -> tuple[FeatureSchema, FeatureSchema]:
    d = cfg.id_embed_dim

    def ids(n_items):
        if d == 0:
            return []
        return [FieldSpec("user_id", ID, cfg.n_users + 1, d), FieldSpec("item_id", ID, n_items + 1, d)]

    src = ids(cfg.n_items_source) + [FieldSpec("user_profile", DENSE, cfg.source_profile_dim),
                                     FieldSpec("item_text", DENSE, cfg.source_text_dim)]
    src += [FieldSpec(f"item_cat{j}", ONE_HOT, c + 1) for j, c in enumerate(cfg.source_onehot)]
    tgt = ids(cfg.n_items_target) + [FieldSpec("user_profile", DENSE, cfg.target_profile_dim),
                                     FieldSpec("item_text", DENSE, cfg.target_text_dim),
                                     FieldSpec("item_tags", MULTI_HOT, cfg.target_multihot + 1)]
    tgt += [FieldSpec(f"item_class{j}", ONE_HOT, c + 1) for j, c in enumerate(cfg.target_onehot)]
    return FeatureSchema("source", tuple(src)), FeatureSchema("target", tuple(tgt))


def _calibrate_bias(scores, target_rate):
    lo, hi = -50.0, 50.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        rate = np.mean(1.0 / (1.0 + np.exp(-(scores + mid))))
        lo, hi = (mid, hi) if rate < target_rate else (lo, mid)
    return 0.5 * (lo + hi)


def synth_generate(cfg: SynthConfig) -> SynthWorld:
    """Draw a two-domain world with shared user/item latents.

    Click logit = signal * <u, v> / sqrt(r) + bias + noise * eps, where the
    bias is shared by both domains so a user meets identical click odds on a
    target item and its source counterpart.
    """
    rng = np.random.default_rng(cfg.seed)
    r = cfg.latent_dim
    U = rng.standard_normal((cfg.n_users, r))
    V = rng.standard_normal((cfg.n_items_source, r))
    # target item j is the counterpart of source item corr[j]
    corr = rng.choice(cfg.n_items_source, size=cfg.n_items_target, replace=False)

    def render(n_items, item_lat, profile_dim, text_dim, onehots, multihot):
        P = rng.standard_normal((r, profile_dim)) / np.sqrt(r)
        T = rng.standard_normal((r, text_dim)) / np.sqrt(r)
        profile = U @ P
        text = item_lat @ T
        cats = []
        for c in onehots:
            C = rng.standard_normal((r, c))
            cats.append(np.argmax(item_lat @ C, axis=1))
        tags = None
        if multihot:
            C = rng.standard_normal((r, multihot))
            top = np.argsort(-(item_lat @ C), axis=1)[:, :3]
            tags = [sorted(row) for row in top]
        return profile, text, cats, tags

    s_profile, s_text, s_cats, _ = render(cfg.n_items_source, V, cfg.source_profile_dim,
                                          cfg.source_text_dim, cfg.source_onehot, 0)
    t_profile, t_text, t_cats, t_tags = render(cfg.n_items_target, V[corr], cfg.target_profile_dim,
                                               cfg.target_text_dim, cfg.target_onehot,
                                               cfg.target_multihot)

    su = rng.integers(0, cfg.n_users, cfg.n_source)
    si = rng.integers(0, cfg.n_items_source, cfg.n_source)
    tu = rng.integers(0, cfg.n_users, cfg.n_target)
    ti = rng.integers(0, cfg.n_items_target, cfg.n_target)
    scale = cfg.signal / np.sqrt(r)
    keep, drift = np.sqrt(1.0 - cfg.user_drift), np.sqrt(cfg.user_drift)
    U_s = keep * U + drift * rng.standard_normal(U.shape)
    U_t = keep * U + drift * rng.standard_normal(U.shape)
    s_score = scale * np.einsum("ij,ij->i", U_s[su], V[si]) + cfg.noise * rng.standard_normal(cfg.n_source)
    t_score = scale * np.einsum("ij,ij->i", U_t[tu], V[corr[ti]]) + cfg.noise * rng.standard_normal(cfg.n_target)
    bias = _calibrate_bias(np.concatenate([s_score, t_score]), cfg.pos_rate)
    s_label = (rng.random(cfg.n_source) < 1.0 / (1.0 + np.exp(-(s_score + bias)))).astype(int)
    t_label = (rng.random(cfg.n_target) < 1.0 / (1.0 + np.exp(-(t_score + bias)))).astype(int)
    s_time = rng.permutation(cfg.n_source)
    t_time = rng.permutation(cfg.n_target)

    positive_rate = float(np.concatenate([s_label, t_label]).mean())
    if cfg.n_source + cfg.n_target >= 100_000 and abs(positive_rate - cfg.pos_rate) > 0.02:
        raise RuntimeError(f"positive rate {positive_rate:.4f} misses target {cfg.pos_rate}")

    source = []
    for k in range(cfg.n_source):
        u, i = int(su[k]), int(si[k])
        fields = {"user_id": f"u{u}", "item_id": f"s{i}",
                  "user_profile": s_profile[u], "item_text": s_text[i]}
        for j, c in enumerate(s_cats):
            fields[f"item_cat{j}"] = f"c{c[i]}"
        source.append(InteractionRecord(f"u{u}", f"s{i}", int(s_time[k]), fields, int(s_label[k])))
    target = []
    for k in range(cfg.n_target):
        u, i = int(tu[k]), int(ti[k])
        fields = {"user_id": f"u{u}", "item_id": f"t{i}",
                  "user_profile": t_profile[u], "item_text": t_text[i],
                  "item_tags": [f"g{g}" for g in t_tags[i]]}
        for j, c in enumerate(t_cats):
            fields[f"item_class{j}"] = f"k{c[i]}"
        target.append(InteractionRecord(f"u{u}", f"t{i}", int(t_time[k]), fields, int(t_label[k])))

    correspondence = {f"t{j}": f"s{int(corr[j])}" for j in range(cfg.n_items_target)}
    s_schema, t_schema = synth_schemas(cfg)
    return SynthWorld(source, target, correspondence, s_schema, t_schema,
                      {"source": U_s, "target": U_t}, V, float(bias), float(scale), positive_rate)


def click_probability(world: SynthWorld, domain: str, user_id: str, item_id: str) -> float:
    """Click probability before label noise for a user/item of ``domain``."""
    if domain == "target":
        item_id = world.correspondence[item_id]
    u = world.user_taste[domain][int(user_id[1:])]
    s = world.scale * u @ world.item_latent[int(item_id[1:])]
    return float(1.0 / (1.0 + np.exp(-(s + world.bias))))


def write_correspondence(path, correspondence: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("source_item_id\ttarget_item_id\n")
        for t, s in sorted(correspondence.items(), key=lambda kv: int(kv[0][1:]) if kv[0][1:].isdigit() else kv[0]):
            fh.write(f"{s}\t{t}\n")


def read_correspondence(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            s, t = line.rstrip("\n").split("\t")
            out[t] = s
    return out


def write_synth(world: SynthWorld, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_schema(world.source_schema, out / "source.schema.json")
    save_schema(world.target_schema, out / "target.schema.json")
    write_log(out / "source.tsv", world.source, world.source_schema)
    write_log(out / "target.tsv", world.target, world.target_schema)
    write_correspondence(out / "correspondence.tsv", world.correspondence)
    return out

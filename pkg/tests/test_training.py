import json

import numpy as np
import pytest

from cdanet import training as tr
from cdanet.config import TrainConfig
from cdanet.features import DENSE, EncodedBatch, FeatureSchema, FieldSpec
from cdanet.metrics import auc, predict_proba
from cdanet.model import MLPModel, ShareMiddleModel
from cdanet.objectives import vanilla_objective
from conftest import random_batch


class TrackingDict(dict):
    """dict that remembers which keys were read."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.read = set()

    def __getitem__(self, k):
        self.read.add(k)
        return super().__getitem__(k)

    def get(self, k, default=None):
        self.read.add(k)
        return super().get(k, default)


def _stage1(data, cfg, path=None):
    return tr.train_translation_stage(data.train_s, data.train_t, data.val_t, cfg, metrics_path=path)


def test_zero_weights_both_vanilla_losses_decrease(small_data, small_cfg):
    cfg = small_cfg.with_(alpha=0.0, beta=0.0, epochs=5)
    res = _stage1(small_data, cfg)
    h = res.history
    assert len(h) == 5
    assert h[-1]["vani_s"] < h[0]["vani_s"] and h[-1]["vani_t"] < h[0]["vani_t"]
    assert all(r["cross_s"] > 0 for r in h)  # still reported, just not weighted


def test_default_config_total_loss_decreases(small_data):
    cfg = TrainConfig(epochs=6, early_stopping=False, seed=1)
    h = _stage1(small_data, cfg).history
    assert h[5]["total"] < h[0]["total"]


def test_history_bounded_by_epochs(small_data, small_cfg):
    res = _stage1(small_data, small_cfg.with_(epochs=4, early_stopping=True, patience=1))
    assert 1 <= len(res.history) <= 4
    s = res.checkpoint.summary
    assert s["epochs_run"] == len(res.history)
    assert s["best_val_auc"] == max(r["val_auc"] for r in res.history)


def test_early_stopping_restores_best_params(small_data, small_cfg):
    cfg = small_cfg.with_(epochs=6, early_stopping=True, patience=2, lr=0.05)
    res = _stage1(small_data, cfg)
    p = predict_proba(res.model, small_data.val_t, "target")
    assert auc(p, small_data.val_t.labels) == res.checkpoint.summary["best_val_auc"]


def test_translation_determinism(small_data, small_cfg, tmp_path):
    a = _stage1(small_data, small_cfg, tmp_path / "a.jsonl")
    b = _stage1(small_data, small_cfg, tmp_path / "b.jsonl")
    tr.save_checkpoint(a.checkpoint, tmp_path / "a.ckpt")
    tr.save_checkpoint(b.checkpoint, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    # wall time lives in a side file so the metrics log itself stays reproducible
    rec = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert {"epoch", "total", "vani_s", "vani_t", "cross_s", "cross_t", "orth", "val_auc"} <= set(rec)
    assert "wall_time" in json.loads((tmp_path / "timing.jsonl").read_text().splitlines()[0])
    c = _stage1(small_data, small_cfg.with_(seed=6))
    assert any(not np.array_equal(c.checkpoint.params[n], a.checkpoint.params[n])
               for n in a.checkpoint.params)


def test_proportional_source_batches(small_data, small_cfg):
    res = _stage1(small_data, small_cfg.with_(source_batch="proportional", epochs=2))
    assert len(res.history) == 2 and np.isfinite(res.history[-1]["total"])


def test_empty_train_set_rejected(small_data, small_cfg):
    with pytest.raises(ValueError):
        tr.train_translation_stage(small_data.train_s.take(np.arange(0)), small_data.train_t,
                                   small_data.val_t, small_cfg)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_tensor(small_data, small_cfg):
    with pytest.raises(tr.DivergenceError, match="non-finite"):
        _stage1(small_data, small_cfg.with_(lr=1e300, epochs=2))


def test_augmentation_stage_basics(small_data, small_cfg):
    s1 = _stage1(small_data, small_cfg)
    res = tr.train_augmentation_stage(s1.checkpoint, small_data.train_t, small_data.val_t, small_cfg)
    assert res.checkpoint.stage == "augmentation"
    assert res.checkpoint.model_kind == "augmentation"
    changed = [n for n in res.model.transferred
               if not np.array_equal(res.model.store[n].value, s1.checkpoint.params[n])]
    assert changed  # fine-tuning, not frozen
    with pytest.raises(tr.StageError):
        tr.train_augmentation_stage(res.checkpoint, small_data.train_t, small_data.val_t)


def test_freeze_transferred_keeps_values(small_data, small_cfg):
    s1 = _stage1(small_data, small_cfg)
    cfg = small_cfg.with_(freeze_transferred=True)
    res = tr.train_augmentation_stage(s1.checkpoint, small_data.train_t, small_data.val_t, cfg)
    for n in res.model.transferred:
        assert res.model.store[n].value.tobytes() == s1.checkpoint.params[n].tobytes()
    assert not np.array_equal(res.model.store["tower_aug.0.W"].value,
                              tr.transfer_from_checkpoint(s1.checkpoint, cfg).store["tower_aug.0.W"].value)


def test_no_translator_control(small_data, small_cfg):
    s1 = _stage1(small_data, small_cfg)
    res = tr.train_augmentation_stage(s1.checkpoint, small_data.train_t, small_data.val_t,
                                      small_cfg, use_translator=False)
    assert not res.model.W_tran["target"].value.any()


def test_augmentation_reads_no_source_side(small_data, small_cfg):
    s1 = _stage1(small_data, small_cfg)
    ckpt = s1.checkpoint
    ckpt.params = TrackingDict(ckpt.params)
    ckpt.schemas = TrackingDict(ckpt.schemas)
    tr.train_augmentation_stage(ckpt, small_data.train_t, small_data.val_t, small_cfg)
    assert ckpt.params.read
    source_side = ("H_s.", "gate_s.", "W_gate_s", "W_tran_s", "tower_s.", "tower_t.")
    assert not [k for k in ckpt.params.read if k.startswith(source_side)]
    assert ckpt.schemas.read == {"target"}


def test_from_scratch_augmentation(small_data, small_cfg):
    res = tr.train_augmentation_from_scratch(small_data.train_t, small_data.val_t, small_cfg)
    assert res.checkpoint.stage == "augmentation" and len(res.history) == small_cfg.epochs


def _separable(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3))
    y = (x @ np.array([1.0, -2.0, 0.5]) > 0).astype(float).reshape(n, 1)
    schema = FeatureSchema("target", (FieldSpec("x", DENSE, 3),))
    ids = np.array([f"u{i}" for i in range(n)], dtype=object)
    return EncodedBatch(schema, {}, {}, {"x": x}, y, ids, ids.copy())


def test_mlp_learns_separable_data():
    train, val = _separable(2000, 0), _separable(500, 1)
    cfg = TrainConfig(d=8, L=1, tower_width=8, epochs=20, early_stopping=False, seed=0)
    res = tr.train_baseline_mlp(train, val, cfg)
    assert auc(predict_proba(res.model, train, "target"), train.labels) > 0.95
    assert res.checkpoint.stage == "baseline" and res.checkpoint.model_kind == "mlp"


def test_mlp_has_no_cross_domain_parts(small_data, small_cfg):
    m = MLPModel(small_data.train_t.schema, small_cfg)
    assert not [n for n in m.store.names()
                if n.startswith(("H_s", "W_tran", "expert", "gate", "W_gate", "tower_s"))]


def test_baseline_determinism(small_data, small_cfg):
    a = tr.train_baseline_mlp(small_data.train_t, small_data.val_t, small_cfg)
    b = tr.train_baseline_mlp(small_data.train_t, small_data.val_t, small_cfg)
    assert all(a.checkpoint.params[n].tobytes() == b.checkpoint.params[n].tobytes()
               for n in a.checkpoint.params)
    c = tr.train_baseline_sharemiddle(small_data.train_s, small_data.train_t, small_data.val_t, small_cfg)
    d = tr.train_baseline_sharemiddle(small_data.train_s, small_data.train_t, small_data.val_t, small_cfg)
    assert all(c.checkpoint.params[n].tobytes() == d.checkpoint.params[n].tobytes()
               for n in c.checkpoint.params)


def test_sharemiddle_gradient_from_both_domains(toy_schemas, toy_cfg):
    rng = np.random.default_rng(0)
    bs, bt = random_batch(toy_schemas[0], 4, rng), random_batch(toy_schemas[1], 4, rng)
    m = ShareMiddleModel(*toy_schemas, toy_cfg)

    def middle_grad(batches):
        m.store.zero_grad()
        vanilla_objective(m, batches)
        return {n: m.store[n].grad.copy() for n in m.store.names() if n.startswith("middle")}

    gs, gt = middle_grad({"source": bs}), middle_grad({"target": bt})
    both = middle_grad({"source": bs, "target": bt})
    for n in both:
        assert np.any(gs[n]) or np.any(gt[n])
        np.testing.assert_allclose(both[n], gs[n] + gt[n], atol=1e-14)


def test_sharemiddle_on_identical_domains_matches_mlp(small_data):
    cfg = TrainConfig(d=8, L=1, tower_width=8, epochs=4, early_stopping=False, lr=3e-3, seed=2)
    t = small_data.train_t
    same = EncodedBatch(FeatureSchema("source", t.schema.fields), t.cats, t.multi, t.dense,
                        t.labels, t.user_ids, t.item_ids)
    sm = tr.train_baseline_sharemiddle(same, t, small_data.val_t, cfg)
    mlp = tr.train_baseline_mlp(t, small_data.val_t, cfg)
    a_sm = auc(predict_proba(sm.model, small_data.test_t, "target"), small_data.test_t.labels)
    a_mlp = auc(predict_proba(mlp.model, small_data.test_t, "target"), small_data.test_t.labels)
    assert abs(a_sm - a_mlp) < 0.05


# ---- checkpoint files -------------------------------------------------------------

@pytest.fixture(scope="module")
def three_checkpoints(small_data):
    cfg = TrainConfig(d=8, K=2, L=1, tower_width=8, batch_size=128, epochs=1,
                      early_stopping=False, seed=5)
    s1 = _stage1(small_data, cfg)
    s2 = tr.train_augmentation_stage(s1.checkpoint, small_data.train_t, small_data.val_t, cfg)
    b = tr.train_baseline_mlp(small_data.train_t, small_data.val_t, cfg)
    return {"translation": s1, "augmentation": s2, "baseline": b}


@pytest.mark.parametrize("stage", ["translation", "augmentation", "baseline"])
def test_checkpoint_round_trip(three_checkpoints, small_data, tmp_path, stage):
    res = three_checkpoints[stage]
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(res.checkpoint, path)
    back = tr.load_checkpoint(path)
    assert back.stage == stage
    m = tr.model_from_checkpoint(back)
    batch = small_data.test_t.take(np.arange(64))
    assert m.predict_logits(batch, "target").tobytes() == res.model.predict_logits(batch, "target").tobytes()
    assert back.config == res.checkpoint.config


def test_checkpoint_manifest_lists_each_param_once(three_checkpoints, tmp_path):
    ck = three_checkpoints["translation"].checkpoint
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(ck, path)
    raw = path.read_bytes()
    n = int.from_bytes(raw[8:16], "little")
    manifest = json.loads(raw[16:16 + n])
    names = [p["name"] for p in manifest["params"]]
    assert sorted(names) == sorted(ck.params) and len(set(names)) == len(names)
    assert all(p["dtype"] == "<f8" for p in manifest["params"])


@pytest.mark.parametrize("cut", [3, 12, 40, -8])
def test_truncated_checkpoint_rejected(three_checkpoints, tmp_path, cut):
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(three_checkpoints["baseline"].checkpoint, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(tr.IntegrityError):
        tr.load_checkpoint(path)


def test_bad_magic_and_no_tmp_left(three_checkpoints, tmp_path):
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(three_checkpoints["baseline"].checkpoint, path)
    assert not list(tmp_path.glob("*.tmp"))
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(tr.IntegrityError, match="magic"):
        tr.load_checkpoint(path)


def test_mismatched_params_rejected(three_checkpoints):
    ck = three_checkpoints["baseline"].checkpoint
    bad = tr.Checkpoint(ck.stage, ck.model_kind, ck.config, ck.schemas,
                        {k: v for k, v in list(ck.params.items())[1:]}, ck.summary, ck.domain)
    with pytest.raises(tr.IntegrityError):
        tr.model_from_checkpoint(bad)


def test_unknown_stage_tag(three_checkpoints):
    with pytest.raises(tr.StageError):
        tr.checkpoint_from_model(three_checkpoints["baseline"].model, "pretraining")

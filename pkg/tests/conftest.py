import numpy as np
import pytest

from cdanet.config import TrainConfig
from cdanet.features import DENSE, ID, MULTI_HOT, ONE_HOT, FeatureSchema, FieldSpec


def numeric_grad(f, x, idx, h=1e-5):
    """Central difference of scalar f() w.r.t. x[idx], perturbing x in place."""
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@pytest.fixture
def toy_schemas():
    """Heterogeneous: different field counts, kinds and cardinalities."""
    src = FeatureSchema("source", (
        FieldSpec("user_id", ID, 6, 3),
        FieldSpec("item_id", ID, 5, 2),
        FieldSpec("writer", ONE_HOT, 4),
        FieldSpec("text", DENSE, 3),
    ))
    tgt = FeatureSchema("target", (
        FieldSpec("user_id", ID, 7, 2),
        FieldSpec("genre", MULTI_HOT, 5),
        FieldSpec("director", ONE_HOT, 3),
        FieldSpec("profile", DENSE, 2),
        FieldSpec("item_id", ID, 4, 3),
    ))
    return src, tgt


@pytest.fixture
def toy_cfg():
    return TrainConfig(d=4, K=2, L=2, tower_width=5, tower_layers_s=2, tower_layers_t=3,
                       alpha=0.5, beta=0.3, seed=3)


def random_batch(schema, n, rng, labels=None):
    from cdanet.features import EncodedBatch
    cats, multi, dense = {}, {}, {}
    for f in schema.fields:
        if f.kind in (ID, ONE_HOT):
            cats[f.name] = rng.integers(0, f.cardinality, n)
        elif f.kind == MULTI_HOT:
            m = rng.integers(0, f.cardinality, (n, 3))
            m[rng.random((n, 3)) < 0.3] = -1
            multi[f.name] = m
        else:
            dense[f.name] = rng.standard_normal((n, f.cardinality))
    y = labels if labels is not None else rng.integers(0, 2, (n, 1)).astype(float)
    ids = np.array([f"u{i}" for i in range(n)], dtype=object)
    return EncodedBatch(schema, cats, multi, dense, np.asarray(y, dtype=float).reshape(n, 1),
                        ids, ids.copy())


def param_grad_errors(store, loss, floor=1e-6, h=1e-5):
    """Max relative error between ``store`` grads and central differences of ``loss()``, per param.

    Grads must already be accumulated in ``store``. ``floor`` keeps the ratio
    meaningful where both gradients are ~0.
    """
    errs = {}
    for p in store:
        worst = 0.0
        g = p.grad.copy()
        for idx in np.ndindex(p.value.shape):
            num = numeric_grad(loss, p.value, idx, h)
            worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), floor))
        errs[p.name] = worst
    return errs


def translation_loss_value(model, bs, bt, weights, norm="batch"):
    from cdanet import objectives as ob
    out = model.forward(bs, bt)
    parts = {"vani_s": ob.loss_vanilla(out.logit_s, bs.labels)[0],
             "vani_t": ob.loss_vanilla(out.logit_t, bt.labels)[0],
             "cross_s": ob.loss_cross(out.logit_s_cross, bs.labels)[0],
             "cross_t": ob.loss_cross(out.logit_t_cross, bt.labels)[0],
             "orth": ob.loss_orth(model.W_tran["source"].value, model.W_tran["target"].value,
                                  out.z_s, out.z_t, norm)[0]}
    return ob.loss_translation_total(parts, weights).total


def augmentation_loss_value(model, batch, weights, norm="batch"):
    from cdanet import objectives as ob
    out = model.forward(batch)
    return ob.loss_augmentation(out.logit_aug, batch.labels, model.W_tran[model.domain].value,
                                out.z_t, weights, norm)[0]


def jitter_biases(store, rng, scale=0.1):
    """Move zero-initialized biases off zero.

    With zero biases a sample whose previous layer is fully dead has a
    pre-activation of exactly 0, i.e. sits on the ReLU kink where central
    differences are meaningless.
    """
    for p in store:
        if p.name.endswith(".b"):
            p.value[...] = scale * rng.standard_normal(p.value.shape)


SMALL_WORLD = dict(n_users=150, n_items_source=60, n_items_target=30, n_source=6000,
                   n_target=2500, seed=11)


@pytest.fixture(scope="session")
def small_data():
    from cdanet.evaluation import synthetic_experiment
    from cdanet.features import SynthConfig
    return synthetic_experiment(SynthConfig(**SMALL_WORLD))


@pytest.fixture
def small_cfg():
    return TrainConfig(d=8, K=2, L=1, tower_width=8, batch_size=128, epochs=3,
                       early_stopping=False, lr=3e-3, seed=5)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

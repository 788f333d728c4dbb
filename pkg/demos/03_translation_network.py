"""
The translation network and its loss
====================================

Both domains get their own embedding layer; a mixture of experts with one gate
per domain produces latent features; two linear translators map each domain's
latent into the other's tower. The stage-one loss adds cross supervision and an
orthogonality penalty to the two ordinary click losses.
"""
import numpy as np

from cdanet import objectives as ob
from cdanet.config import TrainConfig
from cdanet.evaluation import synthetic_experiment
from cdanet.features import SynthConfig
from cdanet.model import TranslationModel

data = synthetic_experiment(SynthConfig(n_users=200, n_items_source=80, n_items_target=40,
                                        n_source=8000, n_target=3000, seed=2))
cfg = TrainConfig(d=16, K=3, L=2, tower_width=16)
model = TranslationModel(data.train_s.schema, data.train_t.schema, cfg)
print("parameters:", model.store.size())
for name in model.store.names()[:8]:
    print("  ", name, model.store[name].value.shape)

bs, bt = data.train_s.take(np.arange(64)), data.train_t.take(np.arange(64))
out = model.forward(bs, bt)
print("latent shapes", out.z_s.shape, out.z_t.shape)
print("gate weights (target, first rows)\n", model.gates(bt, "target")[:3].round(3))

# the loss breakdown: vani_s + vani_t + alpha (cross_s + cross_t) + beta orth
b = ob.translation_objective(model, bs, bt, ob.LossWeights(alpha=0.01, beta=0.1))
for k, v in b.as_dict().items():
    print(f"  {k:8s} {v:.4f}")

# an orthogonal translator has zero penalty; a scaled one does not
q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((16, 16)))
print("orth(Q) =", ob.orth_term(q, out.z_t)[0], " orth(2Q) =", round(ob.orth_term(2 * q, out.z_t)[0], 3))

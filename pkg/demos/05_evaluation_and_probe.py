"""
Evaluation: AUC, sparsity sweeps, ablations and the k-NN probe
==============================================================

AUC is the rank-sum statistic with mid-ranks for ties. Experiment grids train
each (variant, target-train ratio, seed) cell independently. The probe asks
whether a target item's translated latent lands next to its true source-domain
counterpart.
"""
import numpy as np

from cdanet.config import TrainConfig
from cdanet.evaluation import ablation_grid, knn_probe, sparsity_sweep, synthetic_experiment
from cdanet.features import SynthConfig
from cdanet.metrics import auc, auc_pairwise
from cdanet.model import TranslationModel
from cdanet.training import train_translation_stage

s = np.array([0.2, 0.5, 0.5, 0.9])
y = np.array([0, 0, 1, 1])
print("AUC", auc(s, y), "pair-count", auc_pairwise(s, y))

data = synthetic_experiment(SynthConfig(n_users=300, n_items_source=100, n_items_target=50,
                                        n_source=15_000, n_target=5_000, seed=3))
cfg = TrainConfig(d=16, tower_width=16, epochs=8, patience=2)

sweep = sparsity_sweep(data, [0.2, 1.0], ["cdanet", "mlp"], cfg, seeds=[0, 1])
for row in sweep.aggregate():
    print(f"  {row['variant']:7s} ratio {row['train_ratio']:.1f}  AUC {row['auc_mean']:.4f}")

ablation = ablation_grid(data, cfg, seeds=[0], switches=["no_cross", "no_orth"])
for row in ablation.aggregate():
    print(f"  {row['variant']:10s} AUC {row['auc_mean']:.4f}")

trained = train_translation_stage(data.train_s, data.train_t, data.val_t, cfg).model
untrained = TranslationModel(data.train_s.schema, data.train_t.schema, cfg)
for name, m in (("trained", trained), ("untrained", untrained)):
    res = knn_probe(m, data.test_t, data.test_s, k=5, correspondence=data.correspondence)
    print(f"  {name:9s} recall@5 {res.recall_at_k:.3f}  (chance {res.chance:.3f})")

"""
Two-stage training against a single-domain baseline
===================================================

Stage one trains the translation network on both domains. Stage two keeps the
target-side parts, adds a tower over [z, W_t z] and fine-tunes on target data
alone. The baseline MLP only ever sees target data. (About a minute on one core.)
"""
from cdanet.config import TrainConfig
from cdanet.evaluation import evaluate_model, synthetic_experiment
from cdanet.features import SynthConfig
from cdanet.training import (train_augmentation_stage, train_baseline_mlp,
                             train_translation_stage)

world = SynthConfig(n_users=1500, n_items_source=600, n_items_target=300,
                    n_source=80_000, n_target=12_000, latent_dim=16, source_profile_dim=20,
                    target_profile_dim=16, source_text_dim=24, target_text_dim=18, seed=0)
data = synthetic_experiment(world)
print("train sizes: source", len(data.train_s), "target", len(data.train_t))

cfg = TrainConfig(d=32, tower_width=32, epochs=30, patience=3, source_batch="proportional")
stage1 = train_translation_stage(data.train_s, data.train_t, data.val_t, cfg)
stage2 = train_augmentation_stage(stage1.checkpoint, data.train_t, data.val_t, cfg)
mlp = train_baseline_mlp(data.train_t, data.val_t, cfg)

for name, res in (("translation", stage1), ("augmentation", stage2), ("mlp", mlp)):
    auc = evaluate_model(res.model, data.test_t)["auc"]
    print(f"{name:13s} epochs {len(res.history):2d}  test AUC {auc:.4f}")

"""Cross-domain augmentation networks for click-through prediction with heterogeneous inputs.

Modules: ``numerics`` (ops, Adam), ``features`` (schemas, logs, encoding, synthetic
worlds), ``model`` (translation / augmentation networks, baselines), ``objectives``,
``training`` (two-stage loop, checkpoints), ``evaluation`` (AUC, grids, probe), ``cli``.
"""
from .config import TrainConfig
from .evaluation import (ExperimentData, EvalReport, ablation_grid, evaluate_model, knn_probe,
                         sensitivity_sweep, sparsity_sweep, synthetic_experiment)
from .features import FeatureEncoder, SynthConfig, synth_generate
from .metrics import auc
from .training import (load_checkpoint, save_checkpoint, train_augmentation_stage,
                       train_baseline_mlp, train_baseline_sharemiddle, train_translation_stage)

__version__ = "0.1.0"

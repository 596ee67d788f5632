"""Asymmetric soft decision-tree distillation of a heat-pump control policy."""

from .distill import (
    DistillConfig,
    DistillDataset,
    NumericalFault,
    TrainTrace,
    dataset_loss,
    distill_asymmetric,
    distill_asymmetric_path,
    distill_full,
    kl_divergence,
    load_dataset,
    loss_gradient,
    save_dataset,
)
from .evaluation import compare_budgets, fidelity, rollout_policy
from .teacher import (
    TeacherModel,
    TeacherTrainConfig,
    generate_dataset,
    generate_train_test,
    load_external_teacher,
    save_teacher,
    teacher_distribution,
    teacher_train,
)
from .thermal import EnvConfig, EnvState, env_reset, env_step
from .tree import (
    FeatureScaling,
    TreeModel,
    export_dot,
    harden,
    load_tree,
    predict,
    predict_hard,
    predict_soft,
    save_tree,
)

__version__ = "0.1.0"

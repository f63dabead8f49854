"""attnboost: how much a trainable multiplicative attention mask helps,
as a function of task difficulty, size, and perceptual similarity."""

__version__ = "0.1.0"

from .attention import (AttentionMask, attention_forward, attention_gradient,
                        read_mask_file, train_attention, write_mask_file)
from .feature_store import (Dataset, FeatureRecord, FeatureShape, SyntheticConfig,
                            generate_synthetic, read_feature_file, write_feature_file)
from .head_model import (DenseLayer, HeadModel, Prediction, TrainConfig,
                         head_forward, read_head_file, train_head, write_head_file)
from .properties import (CategoryStats, TaskSet, compute_category_stats, difficulty,
                         make_task_set, pairwise_similarity, set_similarity, size)
from .assembly import AssemblySpec, TaskSetGroup, assemble_group, verify_group
from .stats import (PairedSample, StatsRow, build_table, kendall_tau_b,
                    linear_regression, permutation_p_value, spearman_rho)
from .pipeline import (ExperimentResult, RunConfig, evaluate_network, run_experiment)

__all__ = [name for name in dir() if not name.startswith("_")]

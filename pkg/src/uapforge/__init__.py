"""uapforge: train and evaluate universal adversarial perturbations
against desk-scale convolutional classifiers."""

from .tensor import (AdamState, ContractViolation, FrozenModelError, GradGraph,
                     NumericFailure, Tensor, adam_step, backward,
                     finite_difference_check, no_grad, run_gradcheck_suite,
                     set_default_dtype, using_dtype)
from .models import (ARCH_CATALOG, CLASSIFIER_ARCHS, ModelHandle, TrainReport,
                     build_classifier, build_generator, forward_with_taps,
                     train_classifier)
from .losses import (DegenerateActivation, LossBreakdown, cross_entropy,
                     fff_layer_loss, fff_total_loss, fgsm, nontargeted_loss,
                     one_hot, targeted_loss)
from .uap import (AttackConfig, GeneratorInput, Perturbation,
                  apply_perturbation, epsilon_internal, load_uap_and_attack,
                  project_norm, sample_z, train_uap)
from .similarity import (MeanFeatureMap, SimilarityReport, SsimParams,
                         layer_similarity_table, mean_feature_map,
                         resample_map, ssim)
from .evaluation import (FoolingReport, TransferabilityMatrix, alpha_sweep,
                         emit_report, fooling_rate, random_noise_baseline,
                         top1_target_accuracy, transferability_matrix)
from .data import (ArtifactContainer, ConfigError, DataError, DatasetHandle,
                   balanced_subsample, load_artifact, load_dataset,
                   load_model, load_perturbation, parse_config, save_artifact,
                   save_model, save_perturbation, validate_config)

__version__ = "0.1.0"

"""Adversarial domain adaptation under joint conditional and label shift."""

__version__ = "0.1.0"

from .errors import (ConfigurationError, DimensionError, DomainError, IncompleteReportError,
                     InsufficientDataError, NumericalError, ShiftAlignError, StateError,
                     UndefinedPredictionError, WarmupError)
from .estimator import (FadeInSchedule, MeanMatchState, compute_gamma, estimate_prior,
                        fade_in_blend, project_to_simplex, update_means)
from .model import Architecture, ModelBundle, extract, init_model, joint_scores, split_scores
from .posterior import align_posterior, evaluate_corrected
from .synth import DomainPair, ShiftSpec, TrainingView, generate, kl_divergence, shift_sweep
from .trainer import (Evaluator, TrainConfig, concept_shift_probe, domain_confusion_diagnostic,
                      run_training)

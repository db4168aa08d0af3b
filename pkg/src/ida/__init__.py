"""Desk-scale lab for interventional domain adaptation.

Counterfactual feature intervention with an adversarial attention gate,
consistency-shaped discriminability, adversarial domain alignment over
counterfactual representations, synthetic spurious-correlation tasks, and
the matching shift diagnostics.
"""

from .backend import BACKEND
from .autodiff import (GradCheckError, ShapeError, Tape, Tensor, grad_check,
                       grad_reverse)
from .datagen import (DataConfig, Dataset, DomainSpec, ExperimentData,
                      build_experiment, gen_domain, gen_experiment,
                      read_dataset, write_dataset)
from .diagnostics import (DiagnosticsReport, evaluate, export_embeddings,
                          joint_error_probe, proxy_a_distance)
from .intervention import FeaturePair, PairBatch, fi, sample_pairs
from .layers import (AttentionSpec, MlpModel, MlpSpec, ModelBundle,
                     attention_forward, init_model, load_params, save_params)
from .losses import (ConsistencyTerm, LossTerms, certainty_weight,
                     cross_entropy, domain_adv_loss, entropy, l_fi,
                     pair_distance)
from .trainer import (MetricsRecord, TrainConfig, baseline_modes,
                      gamma_schedule, pseudo_label, train, train_step)

__version__ = "0.1.0"

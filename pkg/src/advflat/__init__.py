"""Adversarial flatness attack on small numpy classifiers."""

from .attacks import AttackConfig, afa_attack, attack_ensemble, dual_order_gradients, fgsm, mi_fgsm
from .flatness import check_vicinity_bound, estimate_flatness, estimate_psi0, estimate_psi1
from .harness import DatasetSpec, ExperimentConfig, make_synthetic_dataset, run_transfer_experiment
from .models import Ensemble, MlpClassifier, TrainConfig, train
from .numerics import SeededRng, project_box_linf

__version__ = "0.1.0"

"""Dirichlet Prior Networks, gradient attacks and uncertainty-based detection."""

from . import attacks, autodiff, data, detection, dirichlet, priornet, special, training
from .attacks import AttackConfig, fgm, fgsm, iterative_attack, project_lp, soft_constraint_attack
from .autodiff import Graph, finite_diff_check
from .dirichlet import (
    DirichletParams,
    differential_entropy,
    dirichlet_kl,
    expected_entropy,
    max_prob,
    mutual_information,
    predictive_entropy,
)
from .priornet import TargetConcentration, forward_alpha, mlp, target_alpha
from .training import TrainConfig, train_pn_adversarial, train_standard

__version__ = "0.1.0"

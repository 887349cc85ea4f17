"""Instance classification from bag labels and partial class proportions, via joint MIL + LLP training.

Bags carry a binary label and, when positive, the class proportions among
the positive classes only.  A shared feature extractor feeds a binary
instance head (trained by multiple instance learning) and a C-class head
(trained by a proportion loss in which each instance is weighted by its
positive score), so both heads train end to end.
"""
__version__ = "0.1.0"

from .autodiff import Node, Tape, backward, grad_check
from .bagdata import (Bag, DatasetSplit, Instance, compose_bag, compose_negative_bag,
                      full_proportion_from_partial, load_dataset, sample_partial_proportions,
                      save_dataset, synth_gaussian_dataset)
from .evaluation import ConfusionMatrix, EvalReport, accuracy, evaluate, miou
from .experiment import ExperimentSummary, parse_config, run_experiment
from .llp import masked_proportion, ppl_loss, proportion_loss
from .mil import LSE, AggregationKind, Max, Mean, aggregate, mil_bag_forward, mil_loss
from .nets import FlatClassifier, MlpSpec, ModelTriple, init_params
from .trainer import TrainConfig, adam_step, infer_instance, joint_loss, train, train_two_stage

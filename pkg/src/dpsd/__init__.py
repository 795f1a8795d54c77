"""Differentially private synthetic distillation at desk scale.

A pretrained teacher classifier is transcribed into a student through a
trainable generator; the teacher only ever answers through a private
annotation step (Gaussian noise on normalized distillation gradients, or
randomized response on labels), and a ledger tracks the privacy spent.
"""

from .accountant import PrivacyLedger, calibrate_sigma, dpsd_budget
from .data import LabeledDataset, load_csv, make_blobs, make_moons, split
from .engine import RunConfig, RunResult, run_dpsd, toy_config
from .fedengine import FedConfig, partition_noniid, run_feddpsd
from .losses import GeneratorLossWeights
from .mechanisms import PrivacyConfig
from .models import Classifier, Generator, LatentBank, evaluate, pretrain_teacher

__all__ = [
    "Classifier",
    "FedConfig",
    "Generator",
    "GeneratorLossWeights",
    "LabeledDataset",
    "LatentBank",
    "PrivacyConfig",
    "PrivacyLedger",
    "RunConfig",
    "RunResult",
    "calibrate_sigma",
    "dpsd_budget",
    "evaluate",
    "load_csv",
    "make_blobs",
    "make_moons",
    "partition_noniid",
    "pretrain_teacher",
    "run_dpsd",
    "run_feddpsd",
    "split",
    "toy_config",
]

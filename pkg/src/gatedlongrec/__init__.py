"""Sequential recommendation with intent-gated long-term dependence.

Numpy only: a small reverse-mode tape (:mod:`numerics`), data preparation
(:mod:`data`), the model (:mod:`model`), training (:mod:`training`),
evaluation and baselines (:mod:`evaluation`) and a command line (:mod:`cli`).
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, Example, generate_synthetic, load_dataset, make_examples, save_dataset
from .evaluation import EvalReport, evaluate_baseline, evaluate_model, run_ablation
from .model import HyperParams, ModelParams, forward, forward_batch
from .training import TrainConfig, fit

__version__ = "0.1.0"

"""
Federated SSL simulator - Core Package
Autodiff, tiny models, synthetic data, SSL pretraining, federation, evaluation and commands.
"""
from .tensor import Tensor, ParamSet
from .autodiff import CompGraph, evaluate, backward, finite_diff_grad, sgd_step
from .types import Algorithm, Pretext, Segment, SimulatorError, ValidationError
from .models import ModelSpec, init_weights
from .federation import FLConfig, run_federation
from .config import ExperimentConfig

__all__ = ['Tensor', 'ParamSet', 'CompGraph', 'evaluate', 'backward', 'finite_diff_grad', 'sgd_step',
           'Algorithm', 'Pretext', 'Segment', 'SimulatorError', 'ValidationError',
           'ModelSpec', 'init_weights', 'FLConfig', 'run_federation', 'ExperimentConfig']

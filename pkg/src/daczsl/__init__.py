"""Domain-aware continual zero-shot learning on synthetic multi-domain data.

A self-contained implementation of the domain-invariant continual zero-shot
learner: a minimal reverse-mode autodiff engine, a controllable synthetic
benchmark with every protocol variant, the two-stage adversarial training
loop with class-wise learnable prompts, the full continual/zero-shot metric
suite, and a config-driven experiment runner.
"""

from .autodiff import Tape, Tensor
from .data import (Corpus, LabeledExample, SemanticTable, SplitConfig, Task,
                   TaskStream, build_task_stream, generate_corpus, sample_kshot,
                   split_dazsl)
from .losses import Batch, LossWeights
from .metrics import ScoreTable
from .model import DinModel, ModelConfig, load_checkpoint
from .optim import ParameterGroup, cosine_lr, step_adamw, step_sgd
from .trainer import (AblationFlags, MemoryBuffer, RunResult, TrainConfig,
                      run_sequence, train_main_stage, train_prompt_stage)

__version__ = "0.1.0"

__all__ = [
    "AblationFlags", "Batch", "Corpus", "DinModel", "LabeledExample",
    "LossWeights", "MemoryBuffer", "ModelConfig", "ParameterGroup",
    "RunResult", "ScoreTable", "SemanticTable", "SplitConfig", "Tape",
    "Task", "TaskStream", "Tensor", "TrainConfig", "build_task_stream",
    "cosine_lr", "generate_corpus", "load_checkpoint", "run_sequence",
    "sample_kshot", "split_dazsl", "step_adamw", "step_sgd",
    "train_main_stage", "train_prompt_stage",
]

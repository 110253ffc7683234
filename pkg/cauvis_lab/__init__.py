"""
cauvis-lab: cross-attention prompts with spectral rank filtering, a dual-branch adapter and causal
oracles, exercised on a synthetic colour-bias benchmark.
"""

from .adapter import AdapterConfig, CauvisLayer, aux_branch, causal_branch, cauvis_layer_forward, fuse
from .biasbench import BiasSpec, Dataset, MetricsRecord, bias_sweep, evaluate, gen_dataset, train_model
from .cap import PromptBank, ProjectionWeights, SpectralDecomposition, cap_forward, spectral_split
from .causal import DiscreteSCM, attention_backdoor_equiv, backdoor_adjust, causal_loss, invariance_check
from .errors import (
    CauvisError,
    ConfigError,
    FormatError,
    GraphError,
    NumericError,
    ShapeError,
    TrainingError,
    UnknownStateError,
)
from .model import CauvisClassifier
from .optim import TrainConfig, adamw_step
from .settings import Settings, settings
from .types import ModelKind, to_str

__version__ = '0.1.0'

__all__ = [
    'AdapterConfig',
    'BiasSpec',
    'CauvisClassifier',
    'CauvisError',
    'CauvisLayer',
    'ConfigError',
    'Dataset',
    'DiscreteSCM',
    'FormatError',
    'GraphError',
    'MetricsRecord',
    'ModelKind',
    'NumericError',
    'ProjectionWeights',
    'PromptBank',
    'Settings',
    'ShapeError',
    'SpectralDecomposition',
    'TrainConfig',
    'TrainingError',
    'UnknownStateError',
    'adamw_step',
    'attention_backdoor_equiv',
    'aux_branch',
    'backdoor_adjust',
    'bias_sweep',
    'cap_forward',
    'causal_branch',
    'causal_loss',
    'cauvis_layer_forward',
    'evaluate',
    'fuse',
    'gen_dataset',
    'invariance_check',
    'settings',
    'spectral_split',
    'to_str',
    'train_model',
]

"""Shared enums, the package logger and small formatting helpers."""

import logging
from enum import Enum

logger = logging.getLogger('cauvis_lab')


class Mode(str, Enum):
    """How the cross-attention update consumes the attention map."""

    FULL = 'full'
    FILTERED = 'filtered'


class PromptInit(str, Enum):
    ZEROS = 'zeros'
    RANDOM = 'random'


class AuxOrder(str, Enum):
    """Whether the Fourier branch output replaces or adds to its input."""

    REPLACE = 'replace'
    RESIDUAL = 'residual'


class AuxFilter(str, Enum):
    """Spectral step of the Fourier branch."""

    HIGHPASS = 'highpass'
    ALL_PASS = 'all_pass'
    NONE = 'none'


class Readout(str, Enum):
    """Features the Cauvis head classifies: the high-passed causal features or the raw last-layer ones."""

    CAUSAL = 'causal'
    FULL = 'full'


class ModelKind(str, Enum):
    BASELINE = 'baseline'
    CAUVIS = 'cauvis'


class Split(str, Enum):
    TRAIN = 'train'
    BIASED_TEST = 'biased_test'
    UNBIASED_TEST = 'unbiased_test'


class ColorTag(str, Enum):
    WHITE = 'white'
    NON_WHITE = 'non-white'


class ShapeTag(str, Enum):
    """High-frequency pattern drawn per label: stripes for buses, checks for trucks."""

    STRIPES = 'stripes'
    CHECKS = 'checks'


LABEL_NAMES = {0: 'bus', 1: 'truck'}


def to_str(v) -> str:
    """Convert a value to its canonical string for CSV/JSON artifacts."""
    if isinstance(v, Enum):
        return str(v.value)
    elif isinstance(v, bool):
        return str(v).lower()
    elif isinstance(v, float):
        return repr(v)
    else:
        return str(v)

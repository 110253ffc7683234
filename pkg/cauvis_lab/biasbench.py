"""
Synthetic spurious-correlation benchmark.

Each 16x16 image carries a causal high-frequency pattern (stripes for buses, checks for trucks) and a
spurious low-frequency "colour": white images get a +0.5 offset plus a smooth blob. Trucks are white
with probability p_bias and buses with probability 1 - p_bias, so colour predicts the label on the
biased splits and carries no information on the unbiased one.

The pattern is faint against bounded uniform pixel noise, so colour is the easier cue. Amplitudes are
validated to keep every pixel inside [0, 1] without clipping, which would otherwise leak colour into the
high frequencies.
"""

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import cmat
from .adapter import AdapterConfig
from .autograd import Tape, backward
from .causal import invariance_check
from .errors import ConfigError, ShapeError, TrainingError
from .model import CauvisClassifier
from .optim import AdamWState, TrainConfig, adamw_step
from .seeding import BATCH, DATA, PROBE, UNBIASED, make_rng
from .settings import settings
from .types import LABEL_NAMES, ColorTag, ModelKind, PromptInit, ShapeTag, Split, logger, to_str

WHITE_OFFSET = 0.5
BASE_LEVEL = 0.2
BLOB_AMP = 0.1
# Room left for pattern plus noise on either side of the colour levels
HEADROOM = min(BASE_LEVEL, 1.0 - BASE_LEVEL - WHITE_OFFSET - BLOB_AMP)
EVAL_CHUNK = 128
HISTORY_COLUMNS = ['epoch', 'loss', 'tail_energy_ratio', 'jacobian_norm']
REPORT_COLUMNS = ['p_bias', 'kind', 'seed', 'acc_biased', 'acc_unbiased', 'gap']
SPEC_FILE, SAMPLES_FILE, LABELS_FILE = 'spec.json', 'samples.cmat', 'labels.csv'

# Desk-scale defaults for benchmark runs. Random prompts give the tail-energy and Jacobian trends a
# non-zero starting point; the penalty weights make both fall within the default epochs.
BENCH_ADAPTER = AdapterConfig(
    embed_dim=32, prompt_len=8, rank_k=2, cutoff=0.25, h=16, w=16, prompt_init=PromptInit.RANDOM
)
BENCH_TRAIN = TrainConfig(
    learning_rate=1e-2,
    weight_decay=1e-4,
    lambda_tail=0.1,
    lambda_inv=1.0,
    lambda_causal=1e-2,
    epochs=20,
    batch_size=32,
)


class BiasSpec(BaseModel):
    model_config = ConfigDict(extra='forbid')

    p_bias: float = Field(0.9, ge=0.5, le=1.0)
    n_train: int = Field(512, ge=1)
    n_test: int = Field(256, ge=1)
    h: int = Field(16, ge=2)
    w: int = Field(16, ge=2)
    seed: int = 0
    pattern_amp: float = Field(0.01, ge=0)
    # Half-width of the uniform pixel noise
    noise: float = Field(0.15, ge=0)

    @model_validator(mode='after')
    def _check_headroom(self):
        if self.pattern_amp + self.noise > HEADROOM:
            raise ValueError(f'pattern_amp + noise must not exceed {HEADROOM:.3f} or pixels leave [0, 1]')
        return self


@dataclass(frozen=True)
class SyntheticSample:
    pixels: np.ndarray
    label: int
    color_tag: ColorTag
    shape_tag: ShapeTag


@dataclass
class SampleSet:
    """Images (N, h, w) with labels and the white flag."""

    pixels: np.ndarray
    labels: np.ndarray
    white: np.ndarray

    def __post_init__(self):
        if not len(self.pixels) == len(self.labels) == len(self.white):
            raise ShapeError('pixels, labels and colour flags differ in length')

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> SyntheticSample:
        return SyntheticSample(
            self.pixels[i],
            int(self.labels[i]),
            ColorTag.WHITE if self.white[i] else ColorTag.NON_WHITE,
            ShapeTag.CHECKS if self.labels[i] else ShapeTag.STRIPES,
        )

    def __iter__(self) -> Iterator[SyntheticSample]:
        return (self[i] for i in range(len(self)))

    @property
    def shape_tags(self) -> list[ShapeTag]:
        return [ShapeTag.CHECKS if y else ShapeTag.STRIPES for y in self.labels]

    @property
    def color_tags(self) -> list[ColorTag]:
        return [ColorTag.WHITE if c else ColorTag.NON_WHITE for c in self.white]


@dataclass
class Dataset:
    spec: BiasSpec
    train: SampleSet
    test: SampleSet


class MetricsRecord(BaseModel):
    model_config = ConfigDict(extra='forbid')

    split: Split
    accuracy: float = Field(ge=0, le=1)
    per_class_accuracy: dict[str, float]
    n: int
    gap: float | None = None


def shape_pattern(label: int, h: int, w: int) -> np.ndarray:
    """Stripes (-1)^i for buses, checks (-1)^(i+j) for trucks."""
    i, j = np.arange(h)[:, None], np.arange(w)[None, :]
    return np.broadcast_to((-1.0) ** (i + j) if label else (-1.0) ** i * np.ones((1, w)), (h, w)).copy()


def _generate(n: int, p_bias: float, spec: BiasSpec, rng: np.random.Generator) -> SampleSet:
    h, w = spec.h, spec.w
    labels = (rng.random(n) < 0.5).astype(np.int64)
    white = rng.random(n) < np.where(labels == 1, p_bias, 1.0 - p_bias)
    phases = rng.uniform(0.0, 2 * np.pi, size=(n, 2))
    noise = rng.uniform(-spec.noise, spec.noise, size=(n, h, w))
    i, j = np.arange(h)[None, :, None], np.arange(w)[None, None, :]
    phi, psi = phases[:, 0, None, None], phases[:, 1, None, None]
    blob = BLOB_AMP * (np.cos(2 * np.pi * i / h + phi) + np.cos(2 * np.pi * j / w + psi)) / 2
    patterns = np.stack([shape_pattern(0, h, w), shape_pattern(1, h, w)])[labels]
    pixels = BASE_LEVEL + white[:, None, None] * (WHITE_OFFSET + blob) + spec.pattern_amp * patterns + noise
    return SampleSet(pixels, labels, white)


def gen_dataset(spec: BiasSpec) -> Dataset:
    """Train and biased test splits, deterministic in `spec.seed`."""
    if not isinstance(spec, BiasSpec):
        raise ConfigError('gen_dataset needs a BiasSpec')
    train = _generate(spec.n_train, spec.p_bias, spec, make_rng(spec.seed, DATA, 0))
    test = _generate(spec.n_test, spec.p_bias, spec, make_rng(spec.seed, DATA, 1))
    logger.debug('generated %d+%d samples at p_bias=%.3f', spec.n_train, spec.n_test, spec.p_bias)
    return Dataset(spec, train, test)


def unbiased_split(dataset: Dataset) -> SampleSet:
    """The unbiased test split (p_bias = 0.5) of the same size as the biased one, regenerated on demand."""
    return _generate(dataset.spec.n_test, 0.5, dataset.spec, make_rng(dataset.spec.seed, UNBIASED))


def labels_frame(dataset: Dataset) -> pd.DataFrame:
    rows = []
    for split, samples in ((Split.TRAIN, dataset.train), (Split.BIASED_TEST, dataset.test)):
        for s in samples:
            rows.append(
                {
                    'index': len(rows),
                    'split': split.value,
                    'label': s.label,
                    'label_name': LABEL_NAMES[s.label],
                    'color_tag': s.color_tag.value,
                    'shape_tag': s.shape_tag.value,
                }
            )
    return pd.DataFrame(rows, columns=['index', 'split', 'label', 'label_name', 'color_tag', 'shape_tag'])


def dataset_checksum(ds_dir: Path | str) -> str:
    digest = hashlib.sha256()
    for name in (SPEC_FILE, SAMPLES_FILE, LABELS_FILE):
        digest.update((Path(ds_dir) / name).read_bytes())
    return digest.hexdigest()


def save_dataset(dataset: Dataset, out_dir: Path | str) -> str:
    """Write spec.json, samples.cmat and labels.csv; returns the sha256 checksum of the three files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / SPEC_FILE).write_text(dataset.spec.model_dump_json(indent=2) + '\n')
    cmat.write_cmat_stack(out_dir / SAMPLES_FILE, [*dataset.train.pixels, *dataset.test.pixels])
    labels_frame(dataset).to_csv(out_dir / LABELS_FILE, index=False, lineterminator='\n')
    checksum = dataset_checksum(out_dir)
    logger.info('dataset written to %s (sha256 %s)', out_dir, checksum)
    return checksum


def load_dataset(ds_dir: Path | str) -> Dataset:
    """
    Read a dataset written by `save_dataset`.

    Args:
        ds_dir: directory holding spec.json, samples.cmat and labels.csv

    Returns:
        The dataset with its train and biased test splits; the unbiased split is regenerated on demand.

    Raises:
        FormatError: if samples.cmat is corrupt
        ShapeError: if the image and label counts disagree with the spec
        ValidationError: if spec.json is not a valid `BiasSpec`
    """
    ds_dir = Path(ds_dir)
    spec = BiasSpec.model_validate_json((ds_dir / SPEC_FILE).read_text())
    pixels = cmat.read_cmat_stack(ds_dir / SAMPLES_FILE)
    labels = pd.read_csv(ds_dir / LABELS_FILE)
    if len(pixels) != spec.n_train + spec.n_test or len(labels) != len(pixels):
        raise ShapeError(
            f'{ds_dir}: {len(pixels)} images and {len(labels)} labels for {spec.n_train}+{spec.n_test} samples'
        )
    pixels = np.stack(pixels)
    y = labels['label'].to_numpy(dtype=np.int64)
    white = (labels['color_tag'] == ColorTag.WHITE.value).to_numpy()
    cut = spec.n_train
    return Dataset(spec, SampleSet(pixels[:cut], y[:cut], white[:cut]), SampleSet(pixels[cut:], y[cut:], white[cut:]))


def _history_row(model: CauvisClassifier, train_cfg: TrainConfig, epoch: int, probe: SampleSet) -> dict:
    loss = model.objective(Tape(), probe.pixels, probe.labels, train_cfg).item()
    if not np.isfinite(loss):
        raise TrainingError('loss is not finite', epoch)
    jacobian = invariance_check(
        model.causal_feature_fn(probe.pixels),
        model.prompt_matrix(),
        train_cfg.num_probes,
        train_cfg.probe_eps,
        make_rng(train_cfg.seed, PROBE),
    )
    return {
        'epoch': epoch,
        'loss': loss,
        'tail_energy_ratio': model.tail_energy(probe.pixels),
        'jacobian_norm': jacobian,
    }


def train_model(
    dataset: Dataset, kind: ModelKind, adapter_cfg: AdapterConfig, train_cfg: TrainConfig
) -> tuple[CauvisClassifier, pd.DataFrame]:
    """
    Train a baseline or Cauvis classifier with AdamW and return it with its per-epoch history.

    Row 0 of the history describes the initial model. Loss, tail-energy ratio and Jacobian norm are all
    measured on a fixed probe batch (the first `batch_size` training images) with fixed probe directions.
    """
    if len(dataset.train) == 0:
        raise ConfigError('training split is empty')
    if (adapter_cfg.h, adapter_cfg.w) != dataset.train.pixels.shape[1:]:
        grid = dataset.train.pixels.shape[1:]
        raise ShapeError(f'adapter grid {adapter_cfg.h}x{adapter_cfg.w} does not match images {grid}')
    model = CauvisClassifier.create(kind, adapter_cfg, train_cfg.seed)
    params = model.trainable_parameters()
    lr_scales = model.lr_scales(train_cfg)
    n = len(dataset.train)
    probe_idx = np.arange(min(train_cfg.batch_size, n))
    probe = SampleSet(dataset.train.pixels[probe_idx], dataset.train.labels[probe_idx], dataset.train.white[probe_idx])
    batch_rng = make_rng(train_cfg.seed, BATCH)

    rows = [_history_row(model, train_cfg, 0, probe)]
    state, step = AdamWState(), 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = batch_rng.permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            tape = Tape()
            loss = model.objective(tape, dataset.train.pixels[idx], dataset.train.labels[idx], train_cfg)
            if not np.isfinite(loss.item()):
                raise TrainingError('loss is not finite', epoch)
            grads = backward(tape, loss)
            step += 1
            state = adamw_step(params, grads, train_cfg, step, state, lr_scales)
        rows.append(_history_row(model, train_cfg, epoch, probe))
        logger.info(
            '%s epoch %d loss %.4f tail %.4f jacobian %.4e',
            model.kind.value,
            epoch,
            rows[-1]['loss'],
            rows[-1]['tail_energy_ratio'],
            rows[-1]['jacobian_norm'],
        )
    return model, pd.DataFrame(rows, columns=HISTORY_COLUMNS)


def predict_samples(model: CauvisClassifier, samples: SampleSet) -> np.ndarray:
    chunks = [model.predict(samples.pixels[i : i + EVAL_CHUNK]) for i in range(0, len(samples), EVAL_CHUNK)]
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)


def evaluate_predictions(predictions, labels, split: Split) -> MetricsRecord:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape or labels.size == 0:
        raise ShapeError(f'{predictions.shape} predictions for {labels.shape} labels')
    correct = predictions == labels
    per_class = {LABEL_NAMES[c]: float(correct[labels == c].mean()) for c in sorted(LABEL_NAMES) if np.any(labels == c)}
    return MetricsRecord(split=split, accuracy=float(correct.mean()), per_class_accuracy=per_class, n=int(labels.size))


def evaluate(model: CauvisClassifier, samples: SampleSet, split: Split = Split.BIASED_TEST) -> MetricsRecord:
    """Argmax accuracy overall and per class."""
    return evaluate_predictions(predict_samples(model, samples), samples.labels, split)


def evaluate_splits(model: CauvisClassifier, dataset: Dataset) -> tuple[MetricsRecord, MetricsRecord]:
    """Biased and unbiased test metrics from the same model; both records carry the gap."""
    biased = evaluate(model, dataset.test, Split.BIASED_TEST)
    unbiased = evaluate(model, unbiased_split(dataset), Split.UNBIASED_TEST)
    gap = biased.accuracy - unbiased.accuracy
    return biased.model_copy(update={'gap': gap}), unbiased.model_copy(update={'gap': gap})


def color_only_predict(samples: SampleSet) -> np.ndarray:
    """Predict truck for white images and bus otherwise."""
    return samples.white.astype(np.int64)


def shape_only_predict(samples: SampleSet) -> np.ndarray:
    """Read the label off the shape tag: checks are trucks."""
    return np.array([int(tag == ShapeTag.CHECKS) for tag in samples.shape_tags], dtype=np.int64)


def _sweep_cell(
    p_bias: float, kind: ModelKind, seed: int, base_spec: BiasSpec, adapter_cfg: AdapterConfig, train_cfg: TrainConfig
) -> dict:
    dataset = gen_dataset(base_spec.model_copy(update={'p_bias': p_bias, 'seed': seed}))
    model, _ = train_model(dataset, kind, adapter_cfg, train_cfg.model_copy(update={'seed': seed}))
    biased, unbiased = evaluate_splits(model, dataset)
    logger.info('sweep p=%.3f %s seed %d: gap %.4f', p_bias, kind.value, seed, biased.gap)
    return {
        'p_bias': p_bias,
        'kind': kind.value,
        'seed': seed,
        'acc_biased': biased.accuracy,
        'acc_unbiased': unbiased.accuracy,
        'gap': biased.gap,
    }


def bias_sweep(
    p_list: Sequence[float],
    model_kinds: Sequence[ModelKind],
    seeds: Sequence[int],
    base_spec: BiasSpec | None = None,
    adapter_cfg: AdapterConfig = BENCH_ADAPTER,
    train_cfg: TrainConfig = BENCH_TRAIN,
    threads: int | None = None,
    cell: Callable[..., dict] = _sweep_cell,
) -> tuple[pd.DataFrame, dict]:
    """
    Train and evaluate every (p_bias, kind, seed) cell and tabulate the gaps.

    Cells run on up to `threads` workers (default `settings.threads`); rows come back sorted by
    (p_bias, kind, seed) whatever the completion order. The summary holds median gaps per kind and p_bias.
    """
    base_spec = base_spec or BiasSpec()
    for p in p_list:
        if not 0.5 <= p <= 1.0:
            raise ConfigError(f'p_bias {p} outside [0.5, 1]')
    if not p_list or not model_kinds or not seeds:
        raise ConfigError('sweep needs at least one p_bias, model kind and seed')
    keys = sorted((float(p), ModelKind(k), int(s)) for p in p_list for k in model_kinds for s in seeds)
    threads = threads or settings.threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(cell, p, k, s, base_spec, adapter_cfg, train_cfg) for p, k, s in keys]
        rows = [f.result() for f in futures]
    report = pd.DataFrame(rows, columns=REPORT_COLUMNS).sort_values(['p_bias', 'kind', 'seed'], ignore_index=True)
    medians = report.groupby(['kind', 'p_bias'])['gap'].median()
    summary = {'median_gap': {}}
    for (kind, p), gap in medians.items():
        summary['median_gap'].setdefault(kind, {})[to_str(float(p))] = float(gap)
    return report, summary

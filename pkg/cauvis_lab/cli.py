"""Command-line entry point: `cauvis-lab <command> [flags]`."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import biasbench, causal
from .adapter import AdapterConfig
from .biasbench import BENCH_ADAPTER, BENCH_TRAIN, BiasSpec
from .cap import spectrum_frame
from .checkpoint import load_checkpoint
from .errors import CauvisError, ConfigError, NumericError
from .model import CauvisClassifier
from .optim import TrainConfig
from .seeding import ORACLE, make_rng
from .settings import settings
from .types import AuxFilter, ModelKind, Readout, logger

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4


class SweepConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    p_list: list[float] = Field(default_factory=lambda: [0.75, 0.8, 0.85, 0.9])
    kinds: list[ModelKind] = Field(default_factory=lambda: [ModelKind.BASELINE, ModelKind.CAUVIS])
    num_seeds: int = Field(5, ge=1)


class RunConfig(BaseModel):
    """Everything a command needs, loaded from `--config` and then overridden by flags."""

    model_config = ConfigDict(extra='forbid')

    seed: int | None = None
    out: str | None = None
    kind: ModelKind = ModelKind.CAUVIS
    data: BiasSpec = Field(default_factory=BiasSpec)
    adapter: AdapterConfig = Field(default_factory=lambda: BENCH_ADAPTER.model_copy())
    train: TrainConfig = Field(default_factory=lambda: BENCH_TRAIN.model_copy())
    sweep: SweepConfig = Field(default_factory=SweepConfig)


# flag dest -> path inside RunConfig
OVERRIDES = {
    'seed': ('seed',),
    'out': ('out',),
    'kind': ('kind',),
    'p_bias': ('data', 'p_bias'),
    'n_train': ('data', 'n_train'),
    'n_test': ('data', 'n_test'),
    'epochs': ('train', 'epochs'),
    'lr': ('train', 'learning_rate'),
    'batch_size': ('train', 'batch_size'),
    'lambda_tail': ('train', 'lambda_tail'),
    'lambda_inv': ('train', 'lambda_inv'),
    'lambda_causal': ('train', 'lambda_causal'),
    'prompt_lr_scale': ('train', 'prompt_lr_scale'),
    'prompt_len': ('adapter', 'prompt_len'),
    'rank_k': ('adapter', 'rank_k'),
    'cutoff': ('adapter', 'cutoff'),
    'mode': ('adapter', 'mode'),
    'prompt_init': ('adapter', 'prompt_init'),
    'aux_order': ('adapter', 'aux_order'),
    'num_layers': ('adapter', 'num_layers'),
    'readout': ('adapter', 'readout'),
    'aux_filter': ('adapter', 'aux_filter'),
    'cross_attention': ('adapter', 'cross_attention'),
    'dual_branch': ('adapter', 'dual_branch'),
    'shared_prompts': ('adapter', 'shared_prompts'),
    'p': ('sweep', 'p_list'),
    'kinds': ('sweep', 'kinds'),
    'num_seeds': ('sweep', 'num_seeds'),
}


def load_run_config(args: argparse.Namespace) -> RunConfig:
    data: dict[str, Any] = {}
    if getattr(args, 'config', None):
        data = json.loads(Path(args.config).read_text())
    base = RunConfig.model_validate(data).model_dump(mode='json')
    for dest, path in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == 'rank_k' and value == 'auto':
            value = None
        node = base
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    # Grid follows the data spec unless the config says otherwise
    if 'adapter' not in data or not {'h', 'w'} & set(data['adapter']):
        base['adapter']['h'], base['adapter']['w'] = base['data']['h'], base['data']['w']
    return RunConfig.model_validate(base)


def _require_seed(cfg: RunConfig, command: str) -> int:
    if cfg.seed is None:
        raise ConfigError(f'{command} needs --seed (or "seed" in the config file)')
    return cfg.seed


def _out_dir(cfg: RunConfig, default: str) -> Path:
    out = Path(cfg.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n')
    logger.info('wrote %s', path)
    return path


def _write_csv(path: Path, df: pd.DataFrame) -> Path:
    df.to_csv(path, index=False, lineterminator='\n')
    logger.info('wrote %s', path)
    return path


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    seed = _require_seed(cfg, 'gen-data')
    out = _out_dir(cfg, 'data')
    checksum = biasbench.save_dataset(biasbench.gen_dataset(cfg.data.model_copy(update={'seed': seed})), out)
    print(f'{out} {checksum}')
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    seed = _require_seed(cfg, 'train')
    dataset = biasbench.load_dataset(args.data)
    adapter = cfg.adapter.model_copy(update={'h': dataset.spec.h, 'w': dataset.spec.w})
    train_cfg = cfg.train.model_copy(update={'seed': seed})
    model, history = biasbench.train_model(dataset, cfg.kind, adapter, train_cfg)
    out = _out_dir(cfg, 'run')
    model.save(out / 'checkpoint', step=train_cfg.epochs, extra={'train': train_cfg.model_dump(mode='json')})
    _write_csv(out / 'history.csv', history)
    print(out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    model = CauvisClassifier.load(args.checkpoint)
    biased, unbiased = biasbench.evaluate_splits(model, biasbench.load_dataset(args.data))
    out = _out_dir(cfg, 'eval')
    _write_json(out / 'metrics.json', [biased.model_dump(mode='json'), unbiased.model_dump(mode='json')])
    print(f'biased {biased.accuracy:.4f} unbiased {unbiased.accuracy:.4f} gap {biased.gap:.4f}')
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    first = _require_seed(cfg, 'sweep')
    seeds = list(range(first, first + cfg.sweep.num_seeds))
    report, summary = biasbench.bias_sweep(cfg.sweep.p_list, cfg.sweep.kinds, seeds, cfg.data, cfg.adapter, cfg.train)
    out = _out_dir(cfg, 'sweep')
    _write_csv(out / 'report.csv', report)
    _write_json(out / 'summary.json', summary)
    print(out)
    return EXIT_OK


def cmd_spectrum(args: argparse.Namespace) -> int:
    """Per-layer spectrum of the attention scores averaged over the probe batch of the training split."""
    cfg = load_run_config(args)
    manifest, _ = load_checkpoint(args.checkpoint)
    model = CauvisClassifier.load(args.checkpoint)
    dataset = biasbench.load_dataset(args.data)
    probe = dataset.train.pixels[: cfg.train.batch_size]
    out = _out_dir(cfg, 'spectrum')
    _write_csv(out / 'spectrum.csv', spectrum_frame(model.spectra(probe), manifest.step))
    print(out)
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    scms = [causal.DiscreteSCM.model_validate_json(Path(p).read_text()) for p in args.scm or []]
    if args.random_scms:
        rng = make_rng(_require_seed(cfg, 'oracle'), ORACLE)
        scms.extend(causal.random_scm(rng) for _ in range(args.random_scms))
    if not scms:
        raise ConfigError('oracle needs --random-scms or at least one --scm file')
    report = causal.oracle_report(scms)
    out = _out_dir(cfg, 'oracle')
    (out / 'oracle.json').write_text(report.model_dump_json(indent=2) + '\n')
    print(f'{len(report.cases)} cases, max diff {report.max_abs_diff:.3e}')
    if not report.passed:
        raise NumericError(f'oracle failed: max diff {report.max_abs_diff:.3e} above {report.tolerance:.0e}')
    return EXIT_OK


def _floats(value: str) -> list[float]:
    return [float(v) for v in value.split(',') if v]


def _kinds(value: str) -> list[str]:
    return [v for v in value.split(',') if v]


def _rank(value: str) -> int | str:
    return value if value == 'auto' else int(value)


def _prompt_len(value: str) -> int | str:
    return value if value == 'seq' else int(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='cauvis-lab', description='Cauvis prompts on a desk-scale bias benchmark')
    sub = parser.add_subparsers(dest='command', required=True)

    def command(name: str, func, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument('--config', help='JSON run config')
        p.add_argument('--seed', type=int)
        p.add_argument('--out', help='output directory')
        return p

    def model_flags(p: argparse.ArgumentParser):
        p.add_argument('--kind', choices=[k.value for k in ModelKind])
        p.add_argument('--epochs', type=int)
        p.add_argument('--lr', type=float)
        p.add_argument('--batch-size', type=int)
        p.add_argument('--lambda-tail', type=float)
        p.add_argument('--lambda-inv', type=float)
        p.add_argument('--lambda-causal', type=float)
        p.add_argument('--prompt-lr-scale', type=float)
        p.add_argument('--prompt-len', type=_prompt_len)
        p.add_argument('--rank-k', type=_rank, help="integer or 'auto'")
        p.add_argument('--cutoff', type=float)
        p.add_argument('--mode', choices=['full', 'filtered'])
        p.add_argument('--prompt-init', choices=['zeros', 'random'])
        p.add_argument('--aux-order', choices=['replace', 'residual'])
        p.add_argument('--num-layers', type=int)
        p.add_argument('--readout', choices=[r.value for r in Readout])
        ablation = p.add_argument_group('ablations')
        ablation.add_argument('--aux-filter', choices=[f.value for f in AuxFilter])
        ablation.add_argument(
            '--no-cross-attention', dest='cross_attention', action='store_const', const=False, help='add prompts'
        )
        ablation.add_argument('--no-dual-branch', dest='dual_branch', action='store_const', const=False)
        ablation.add_argument('--shared-prompts', action='store_const', const=True, help='one bank for all layers')

    p = command('gen-data', cmd_gen_data, 'generate a biased dataset')
    p.add_argument('--p-bias', type=float)
    p.add_argument('--n-train', type=int)
    p.add_argument('--n-test', type=int)

    p = command('train', cmd_train, 'train a baseline or Cauvis classifier')
    p.add_argument('--data', required=True)
    model_flags(p)

    p = command('eval', cmd_eval, 'evaluate a checkpoint on the biased and unbiased test splits')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)

    p = command('sweep', cmd_sweep, 'gap across bias levels, model kinds and seeds')
    p.add_argument('--p', type=_floats, help='comma separated p_bias values')
    p.add_argument('--kinds', type=_kinds, help='comma separated model kinds')
    p.add_argument('--num-seeds', type=int)
    p.add_argument('--n-train', type=int)
    p.add_argument('--n-test', type=int)
    model_flags(p)

    p = command('spectrum', cmd_spectrum, 'dump attention spectra of a checkpoint')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)

    p = command('oracle', cmd_oracle, 'check the back-door equivalence on discrete models')
    p.add_argument('--random-scms', type=int, default=0)
    p.add_argument('--scm', action='append', help='SCM JSON file, repeatable')
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=settings.log_level, format='%(levelname)s %(name)s: %(message)s')
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f'error: invalid config: {ConfigError(str(exc))}', file=sys.stderr)
        return EXIT_CONFIG
    except CauvisError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return exc.exit_code
    except json.JSONDecodeError as exc:
        print(f'error: config is not valid JSON: {exc}', file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return EXIT_IO


if __name__ == '__main__':
    sys.exit(main())

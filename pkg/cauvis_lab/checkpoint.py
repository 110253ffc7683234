"""Checkpoints: a JSON manifest plus one CMAT1 file per parameter in a sibling directory."""

from pathlib import Path
from typing import Any, Iterable

from pydantic import BaseModel, ConfigDict

from . import cmat
from .autograd import Parameter
from .errors import ShapeError
from .types import logger

MANIFEST = 'manifest.json'
PARAMS_DIR = 'params'


class ParameterEntry(BaseModel):
    model_config = ConfigDict(extra='forbid')

    id: str
    rows: int
    cols: int
    trainable: bool = True
    file: str


class CheckpointManifest(BaseModel):
    model_config = ConfigDict(extra='forbid')

    step: int
    config: dict[str, Any]
    parameters: list[ParameterEntry]


def save_checkpoint(out_dir: Path | str, params: Iterable[Parameter], config: dict[str, Any], step: int) -> Path:
    """Write `params` and `config` under `out_dir` and return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / PARAMS_DIR).mkdir(parents=True, exist_ok=True)
    entries = []
    for p in sorted(params, key=lambda q: q.id):
        file = f'{PARAMS_DIR}/{p.id}.cmat'
        cmat.write_cmat(out_dir / file, p.value)
        entries.append(ParameterEntry(id=p.id, rows=p.shape[0], cols=p.shape[1], trainable=p.trainable, file=file))
    manifest = CheckpointManifest(step=step, config=config, parameters=entries)
    path = out_dir / MANIFEST
    path.write_text(manifest.model_dump_json(indent=2) + '\n')
    logger.info('checkpoint written to %s (step %d)', out_dir, step)
    return path


def load_checkpoint(ckpt_dir: Path | str) -> tuple[CheckpointManifest, dict[str, Parameter]]:
    """
    Read a checkpoint written by `save_checkpoint`.

    Returns:
        The manifest and the stored parameters keyed by id

    Raises:
        FormatError: if a parameter file is corrupt
        ShapeError: if a parameter file disagrees with the manifest
    """
    ckpt_dir = Path(ckpt_dir)
    manifest = CheckpointManifest.model_validate_json((ckpt_dir / MANIFEST).read_text())
    params = {}
    for e in manifest.parameters:
        value = cmat.read_cmat(ckpt_dir / e.file)
        if value.shape != (e.rows, e.cols):
            raise ShapeError(f'{e.file} holds {value.shape}, manifest says {(e.rows, e.cols)}')
        params[e.id] = Parameter(e.id, value, trainable=e.trainable)
    return manifest, params

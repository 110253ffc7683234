"""Tests for checkpoint manifests."""

import json

import numpy as np
import pytest

from cauvis_lab.autograd import Parameter
from cauvis_lab.checkpoint import load_checkpoint, save_checkpoint


class TestCheckpoint:
    """Tests for save_checkpoint and load_checkpoint."""

    def test_round_trip(self, tmp_path, rng):
        """Values, trainable flags, step and config come back unchanged."""
        params = [Parameter('b', rng.normal(size=(2, 3))), Parameter('a', np.eye(2), trainable=False)]
        path = save_checkpoint(tmp_path, params, {'kind': 'cauvis'}, step=7)
        manifest, back = load_checkpoint(tmp_path)
        assert path == tmp_path / 'manifest.json'
        assert manifest.step == 7
        assert manifest.config == {'kind': 'cauvis'}
        assert [e.id for e in manifest.parameters] == ['a', 'b']
        assert np.array_equal(back['b'].value, params[0].value)
        assert back['a'].trainable is False

    def test_manifest_is_json(self, tmp_path):
        """The manifest lists one CMAT1 file per parameter."""
        save_checkpoint(tmp_path, [Parameter('w', np.ones((1, 2)))], {}, step=0)
        data = json.loads((tmp_path / 'manifest.json').read_text())
        assert data['parameters'][0]['file'] == 'params/w.cmat'
        assert (tmp_path / 'params' / 'w.cmat').exists()

    def test_missing_directory(self, tmp_path):
        """A missing checkpoint is an OSError."""
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / 'nope')

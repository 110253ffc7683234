"""Tests for the patch-embedding classifier."""

import json

import numpy as np
import pytest

from cauvis_lab.autograd import Tape, finite_diff_check
from cauvis_lab.causal import causal_loss
from cauvis_lab.errors import ConfigError, ShapeError
from cauvis_lab.model import CauvisClassifier, patch_tokens
from cauvis_lab.numerics import filter_grid
from cauvis_lab.optim import TrainConfig
from cauvis_lab.seeding import make_rng
from cauvis_lab.types import ModelKind, PromptInit, Readout


@pytest.fixture
def pixels(rng):
    return rng.uniform(0.0, 1.0, size=(3, 8, 8))


def activate(model, rng):
    for p in model.trainable_parameters():
        if p.id.endswith(('prompts', 'causal_w1', 'causal_w2', 'aux_w_up', 'head_w')):
            p.value = rng.normal(0.0, 0.3, size=p.shape)


class TestPatchTokens:
    """Tests for patch_tokens."""

    def test_shape_and_centre(self, rng):
        """Each pixel yields patch^2 values and the centre column is the pixel itself."""
        img = rng.normal(size=(2, 4, 5))
        tokens = patch_tokens(img, 3)
        assert tokens.shape == (40, 9)
        np.testing.assert_array_equal(tokens[:, 4], img.ravel())

    def test_circular_padding(self):
        """Neighbours wrap around the grid edges."""
        img = np.arange(9, dtype=float).reshape(1, 3, 3)
        first = patch_tokens(img, 3)[0]
        assert first.tolist() == [8.0, 6.0, 7.0, 2.0, 0.0, 1.0, 5.0, 3.0, 4.0]

    def test_single_pixel_patch(self, rng):
        img = rng.normal(size=(1, 2, 2))
        np.testing.assert_array_equal(patch_tokens(img, 1), img.reshape(4, 1))

    def test_needs_batch(self):
        with pytest.raises(ShapeError):
            patch_tokens(np.zeros((4, 4)), 3)


class TestClassifier:
    """Tests for CauvisClassifier."""

    def test_baseline_shares_embedding(self, small_model_config):
        """Baseline and Cauvis models of one seed draw the same frozen embedding."""
        base = CauvisClassifier.create(ModelKind.BASELINE, small_model_config, seed=4)
        cauvis = CauvisClassifier.create(ModelKind.CAUVIS, small_model_config, seed=4)
        np.testing.assert_array_equal(base.embedding.value, cauvis.embedding.value)
        assert base.layers == [] and len(cauvis.layers) == 1
        assert not base.embedding.trainable
        assert [p.id for p in base.parameters()] == ['embedding', 'head_b', 'head_w']

    def test_parameters_sorted(self, small_model_config):
        model = CauvisClassifier.create(ModelKind.CAUVIS, small_model_config.model_copy(update={'num_layers': 2}), 0)
        ids = [p.id for p in model.parameters()]
        assert ids == sorted(ids)
        assert 'embedding' not in [p.id for p in model.trainable_parameters()]
        assert {i.split('.')[0] for i in ids if '.' in i} == {'layer0', 'layer1'}

    def test_neutral_at_init(self, small_model_config, pixels):
        """Fresh Cauvis layers leave the embedded features unchanged and the zero head predicts class 0."""
        model = CauvisClassifier.create(ModelKind.CAUVIS, small_model_config, seed=1)
        assert np.array_equal(model.features(pixels), model.embed(pixels))
        assert np.all(model.logits(pixels) == 0.0)
        assert model.predict(pixels).tolist() == [0, 0, 0]

    def test_accepts_single_image(self, small_model_config, pixels):
        model = CauvisClassifier.create(ModelKind.BASELINE, small_model_config, seed=1)
        assert model.logits(pixels[0]).shape == (1, 2)
        with pytest.raises(ShapeError):
            model.logits(np.zeros((2, 7, 8)))

    def test_lr_scales(self, small_model_config):
        """Only prompt tokens get the prompt learning-rate multiplier."""
        model = CauvisClassifier.create(ModelKind.CAUVIS, small_model_config, seed=0)
        assert model.lr_scales(TrainConfig(prompt_lr_scale=0.1)) == {'layer0.prompts': 0.1}

    def test_objective_gradients(self, small_adapter, rng):
        """Cross-entropy, tail penalty and joint causal loss differentiate correctly together."""
        cfg = small_adapter.model_copy(update={'prompt_init': PromptInit.RANDOM})
        model = CauvisClassifier.create(ModelKind.CAUVIS, cfg, seed=2)
        activate(model, rng)
        pixels = rng.uniform(size=(2, 4, 4))
        labels = np.array([0, 1])
        train_cfg = TrainConfig(lambda_tail=0.1, lambda_causal=0.5, lambda_inv=0.2)
        worst = finite_diff_check(
            lambda tape: model.objective(tape, pixels, labels, train_cfg), model.trainable_parameters()
        )
        assert worst <= 1e-4

    def test_objective_at_init(self, small_model_config, pixels):
        """A zero head gives log 2 cross-entropy and untouched features give no causal loss."""
        model = CauvisClassifier.create(ModelKind.CAUVIS, small_model_config, seed=1)
        for lambda_causal in (0.0, 0.5):
            train_cfg = TrainConfig(lambda_causal=lambda_causal, lambda_inv=2.0)
            loss = model.objective(Tape(), pixels, np.array([0, 1, 1]), train_cfg).item()
            assert loss == pytest.approx(np.log(2), abs=1e-12)

    def test_objective_penalises_shift(self, small_model_config, pixels, rng):
        """Once the layers move the features, the causal term adds the loss of the low-pass shift."""
        model = CauvisClassifier.create(ModelKind.CAUVIS, small_model_config, seed=1)
        activate(model, rng)
        labels = np.array([0, 1, 1])
        plain = model.objective(Tape(), pixels, labels, TrainConfig(lambda_causal=0.0)).item()
        loss = model.objective(Tape(), pixels, labels, TrainConfig(lambda_causal=0.5)).item()
        x0, x_last = model.embed(pixels), model.features(pixels)
        hp = model.highpass
        f_s = filter_grid(x_last - x0, hp.complement(), 8, 8)
        f_c = [filter_grid(a, hp, 8, 8) for a in (x_last, x0)]
        expected = causal_loss(f_s, *f_c, TrainConfig().lambda_inv, groups=3)
        assert expected > 0.0
        assert loss - plain == pytest.approx(0.5 * expected, rel=1e-8)

    def test_spectra(self, small_model_config, pixels, rng):
        """One averaged spectrum per layer with min(n, t) values; none for the baseline."""
        cfg = small_model_config.model_copy(update={'prompt_init': PromptInit.RANDOM})
        model = CauvisClassifier.create(ModelKind.CAUVIS, cfg, seed=1)
        spectra = model.spectra(pixels)
        assert len(spectra) == 1 and spectra[0].shape == (4,)
        assert np.all(np.diff(spectra[0]) <= 1e-12)
        assert 0.0 < model.tail_energy(pixels) < 1.0
        base = CauvisClassifier.create(ModelKind.BASELINE, small_model_config, seed=1)
        assert base.spectra(pixels) == [] and base.tail_energy(pixels) == 0.0

    def test_prompt_matrix(self, small_model_config):
        cauvis = CauvisClassifier.create(ModelKind.CAUVIS, small_model_config.model_copy(update={'num_layers': 2}), 0)
        assert cauvis.prompt_matrix().shape == (8, 8)
        assert CauvisClassifier.create(ModelKind.BASELINE, small_model_config, 0).prompt_matrix().shape == (0, 8)

    def test_causal_feature_fn(self, small_model_config, pixels, rng):
        """f swaps the prompts in temporarily and returns high-passed features."""
        model = CauvisClassifier.create(ModelKind.CAUVIS, small_model_config, seed=1)
        activate(model, rng)
        original = model.prompt_matrix().copy()
        f = model.causal_feature_fn(pixels)
        expected = filter_grid(model.features(pixels), model.highpass, 8, 8)
        np.testing.assert_allclose(f(original), expected, atol=1e-12)
        other = f(rng.normal(size=original.shape))
        assert not np.allclose(other, expected)
        np.testing.assert_array_equal(model.prompt_matrix(), original)


class TestVariants:
    """Tests for the readout choice and the ablated model variants."""

    def test_causal_readout_drops_offsets(self, small_model_config, pixels, rng):
        """With identity layers the causal readout ignores a constant brightness offset; the raw readouts do not."""
        logits = {}
        for name, kind, readout in [
            ('causal', ModelKind.CAUVIS, Readout.CAUSAL),
            ('full', ModelKind.CAUVIS, Readout.FULL),
            ('baseline', ModelKind.BASELINE, Readout.CAUSAL),
        ]:
            model = CauvisClassifier.create(kind, small_model_config.model_copy(update={'readout': readout}), seed=1)
            model.head_w.value = make_rng(8, 0).normal(size=model.head_w.shape)
            logits[name] = model.logits(pixels), model.logits(pixels + 0.2)
        np.testing.assert_allclose(*logits['causal'], atol=1e-9)
        assert not np.allclose(*logits['full'])
        assert not np.allclose(*logits['baseline'])
        np.testing.assert_array_equal(logits['full'][0], logits['baseline'][0])

    def test_shared_prompts(self, small_model_config, pixels, rng):
        """Stacked layers attend to one bank that is stored, scaled and stacked once."""
        cfg = small_model_config.model_copy(update={'num_layers': 2, 'shared_prompts': True})
        model = CauvisClassifier.create(ModelKind.CAUVIS, cfg, seed=0)
        assert model.layers[0].prompts is model.layers[1].prompts
        ids = [p.id for p in model.parameters()]
        assert ids.count('prompts') == 1
        assert not any(i.endswith('.prompts') for i in ids)
        assert model.prompt_matrix().shape == (4, 8)
        assert model.lr_scales(TrainConfig(prompt_lr_scale=0.1)) == {'prompts': 0.1}
        layer_wise = CauvisClassifier.create(ModelKind.CAUVIS, cfg.model_copy(update={'shared_prompts': False}), 0)
        assert len(layer_wise.parameters()) == len(model.parameters()) + 1

    def test_shared_prompts_round_trip(self, tmp_path, small_model_config, pixels, rng):
        cfg = small_model_config.model_copy(update={'num_layers': 2, 'shared_prompts': True})
        model = CauvisClassifier.create(ModelKind.CAUVIS, cfg, seed=0)
        activate(model, rng)
        model.save(tmp_path, step=1)
        back = CauvisClassifier.load(tmp_path)
        assert back.layers[0].prompts is back.layers[1].prompts
        np.testing.assert_array_equal(back.logits(pixels), model.logits(pixels))

    def test_shared_prompts_gradients(self, small_adapter, rng):
        """Both layers contribute to the gradient of the shared bank."""
        cfg = small_adapter.model_copy(update={'num_layers': 2, 'shared_prompts': True})
        model = CauvisClassifier.create(ModelKind.CAUVIS, cfg, seed=2)
        activate(model, rng)
        pixels = rng.uniform(size=(2, 4, 4))
        train_cfg = TrainConfig(lambda_tail=0.1, lambda_causal=0.5)
        worst = finite_diff_check(
            lambda tape: model.objective(tape, pixels, np.array([0, 1]), train_cfg), model.trainable_parameters()
        )
        assert worst <= 1e-4

    def test_prompt_add_has_no_spectra(self, small_model_config, pixels):
        cfg = small_model_config.model_copy(update={'cross_attention': False, 'prompt_init': PromptInit.RANDOM})
        model = CauvisClassifier.create(ModelKind.CAUVIS, cfg, seed=1)
        assert model.spectra(pixels) == []
        assert model.tail_energy(pixels) == 0.0

class TestCheckpointing:
    """Tests for save and load."""

    def test_round_trip(self, tmp_path, small_model_config, pixels, rng):
        model = CauvisClassifier.create(ModelKind.CAUVIS, small_model_config, seed=1)
        activate(model, rng)
        model.save(tmp_path, step=3, extra={'seed': 1})
        back = CauvisClassifier.load(tmp_path)
        assert back.kind == ModelKind.CAUVIS
        assert back.config == small_model_config
        np.testing.assert_array_equal(back.logits(pixels), model.logits(pixels))

    def test_mismatched_shape(self, tmp_path, small_model_config):
        """A manifest whose config disagrees with the stored weights is a shape error."""
        CauvisClassifier.create(ModelKind.BASELINE, small_model_config, seed=1).save(tmp_path, step=0)
        manifest = json.loads((tmp_path / 'manifest.json').read_text())
        manifest['config']['adapter']['embed_dim'] = 4
        (tmp_path / 'manifest.json').write_text(json.dumps(manifest))
        with pytest.raises(ShapeError):
            CauvisClassifier.load(tmp_path)

    def test_missing_config(self, tmp_path, small_model_config):
        CauvisClassifier.create(ModelKind.BASELINE, small_model_config, seed=1).save(tmp_path, step=0)
        manifest = json.loads((tmp_path / 'manifest.json').read_text())
        del manifest['config']['kind']
        (tmp_path / 'manifest.json').write_text(json.dumps(manifest))
        with pytest.raises(ConfigError):
            CauvisClassifier.load(tmp_path)

    def test_missing_parameter(self, tmp_path, small_model_config):
        """A baseline checkpoint cannot be loaded as a Cauvis model."""
        CauvisClassifier.create(ModelKind.BASELINE, small_model_config, seed=1).save(tmp_path, step=0)
        manifest = json.loads((tmp_path / 'manifest.json').read_text())
        manifest['config']['kind'] = 'cauvis'
        (tmp_path / 'manifest.json').write_text(json.dumps(manifest))
        with pytest.raises(ConfigError):
            CauvisClassifier.load(tmp_path)

import numpy as np
import pytest
import torch

from rasgen import forge, training
from rasgen.diffusion import LossWeights
from rasgen.training import (
    DiffusionTrainConfig,
    SurrogateTrainConfig,
    load_denoiser_checkpoint,
    split_tensors,
    train_diffusion,
    train_surrogate,
)

TINY_DENOISER = {"base_width": 4}


@pytest.fixture(scope="module")
def small_samples():
    samples = [
        forge._draw_sample(forge.ForgeConfig(n=1, seed=31), i) for i in range(48)
    ]
    splits, _ = forge.stratified_split([s.category for s in samples], seed=31)
    for s, sp in zip(samples, splits):
        s.split = sp
    return samples


class TestSplitTensors:
    def test_shapes(self, small_samples):
        tensors = split_tensors(small_samples, "train")
        n = tensors["images"].shape[0]
        assert tensors["images"].shape == (n, 3, 32, 32)
        assert tensors["spectra"].shape == (n, 201)
        assert tensors["materials"].shape == (n, 3)
        assert len(tensors["categories"]) == n

    def test_missing_split_errors(self, small_samples):
        with pytest.raises(ValueError):
            split_tensors([s for s in small_samples if s.split == "train"], "val")


class TestTrainSurrogate:
    def test_history_and_determinism(self, small_samples):
        cfg = SurrogateTrainConfig(
            epochs=2, seed=7, surrogate={"widths": (4, 8, 8, 8), "head_hidden": 32}
        )
        m1, h1 = train_surrogate(small_samples, cfg)
        m2, h2 = train_surrogate(small_samples, cfg)
        assert len(h1) == 2
        assert {"epoch", "lr", "train_loss", "val_mse"} <= set(h1[0])
        assert h1 == h2
        for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
            assert torch.equal(a, b)

    def test_cosine_lr_applied(self, small_samples):
        cfg = SurrogateTrainConfig(
            epochs=4, seed=1, lr0=2e-3,
            surrogate={"widths": (4, 8, 8, 8), "head_hidden": 32},
        )
        _, history = train_surrogate(small_samples, cfg)
        lrs = [h["lr"] for h in history]
        assert lrs[0] == 2e-3
        assert all(a > b for a, b in zip(lrs, lrs[1:]))


class TestTrainDiffusion:
    def test_requires_surrogate_when_spectral_on(self, small_samples):
        cfg = DiffusionTrainConfig(epochs=1, T=10, denoiser=TINY_DENOISER)
        with pytest.raises(ValueError, match="surrogate"):
            train_diffusion(small_samples, None, cfg)

    def test_spectral_off_runs_without_surrogate(self, small_samples, recwarn):
        cfg = DiffusionTrainConfig(
            epochs=1, T=10, spectral_loss=False, denoiser=TINY_DENOISER, seed=2
        )
        _, schedule, history = train_diffusion(small_samples, None, cfg)
        assert schedule.T == 10
        assert len(history) == 1
        assert history[0]["l_spec"] == 0.0

    def test_effective_weights(self):
        cfg = DiffusionTrainConfig(spectral_loss=False)
        assert cfg.effective_weights().lambda_spec == 0.0
        assert cfg.effective_weights().w_r == 2.0
        cfg_on = DiffusionTrainConfig(spectral_loss=True)
        assert cfg_on.effective_weights().lambda_spec == 5.0

    def test_checkpoints_written_and_loadable(self, small_samples, tmp_path):
        cfg = DiffusionTrainConfig(
            epochs=2,
            T=10,
            spectral_loss=False,
            denoiser=TINY_DENOISER,
            seed=3,
            checkpoint_every=1,
        )
        model, _, _ = train_diffusion(small_samples, None, cfg, out_dir=tmp_path)
        assert (tmp_path / "model_epoch0001.ckpt").exists()
        assert (tmp_path / "model_epoch0002.ckpt").exists()
        loaded, schedule, meta = load_denoiser_checkpoint(tmp_path / "model.ckpt")
        assert schedule.T == 10
        assert meta["conditioning"] == "film"
        x = torch.randn(1, 3, 32, 32)
        args = (x, torch.tensor([5]), torch.rand(1, 201), torch.rand(1, 3))
        model.eval()
        assert torch.equal(model(*args), loaded(*args))

    def test_weighted_sampling_uses_inverse_frequency(self, small_samples):
        train = split_tensors(small_samples, "train")
        w = forge.sampling_weights(train["categories"])
        per_cat = {}
        for cat, wi in zip(train["categories"], w):
            per_cat.setdefault(cat, set()).add(round(float(wi), 12))
        # one weight per category, inversely proportional to its count
        for cat, weights in per_cat.items():
            assert len(weights) == 1
            assert weights == {round(1.0 / train["categories"].count(cat), 12)}

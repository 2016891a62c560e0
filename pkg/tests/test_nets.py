import numpy as np
import pytest
import torch

import gradcheck_suite
from rasgen import nets
from rasgen.nets import (
    CONDITION_DIM,
    ConditionEmbedder,
    DenoiserUNet,
    FiLM,
    apply_checkpoint,
    count_parameters,
    load_checkpoint,
    lr_at,
    make_denoiser,
    make_surrogate,
    save_checkpoint,
)

TOY = gradcheck_suite.TOY_DENOISER


def toy_batch(b=2, spectrum_dim=201):
    g = torch.Generator().manual_seed(0)
    return (
        torch.randn(b, 3, 32, 32, generator=g),
        torch.randint(1, 200, (b,), generator=g),
        torch.rand(b, spectrum_dim, generator=g),
        torch.tensor([[3.48, 0.0037, 1.524]] * b),
    )


class TestConditionEmbedder:
    def test_output_dimension(self):
        emb = ConditionEmbedder()
        c = emb(torch.rand(3, 201), torch.tensor([[2.2, 0.0009, 1.575]] * 3))
        assert c.shape == (3, CONDITION_DIM)

    def test_null_token_deterministic(self):
        emb = ConditionEmbedder()
        mask = torch.ones(2, dtype=torch.bool)
        a = emb(torch.rand(2, 201), torch.rand(2, 3), mask)
        b = emb(torch.rand(2, 201), torch.rand(2, 3), mask)
        assert torch.equal(a[0], a[1])
        assert torch.equal(a, b)

    def test_material_sensitivity(self):
        torch.manual_seed(0)
        emb = ConditionEmbedder()
        spec = torch.rand(1, 201)
        c1 = emb(spec, torch.tensor([[2.2, 0.0009, 1.575]]))
        c2 = emb(spec, torch.tensor([[6.4, 0.0038, 1.524]]))
        assert not torch.allclose(c1, c2)

    def test_wrong_spectrum_length(self):
        emb = ConditionEmbedder()
        with pytest.raises(ValueError):
            emb(torch.rand(1, 150), torch.rand(1, 3))

    def test_path_counters(self):
        emb = ConditionEmbedder()
        mask = torch.tensor([True, False, False, True])
        emb(torch.rand(4, 201), torch.rand(4, 3), mask)
        assert emb.cond_rows_seen == 2
        assert emb.null_rows_seen == 2
        emb.reset_counters()
        emb(torch.rand(3, 201), torch.rand(3, 3), torch.zeros(3, dtype=torch.bool))
        assert emb.null_rows_seen == 0

    def test_all_null_never_runs_real_path(self):
        emb = ConditionEmbedder()
        emb(torch.rand(5, 201), torch.rand(5, 3), torch.ones(5, dtype=torch.bool))
        assert emb.cond_rows_seen == 0
        assert emb.null_rows_seen == 5


class TestFiLM:
    def test_identity_at_init(self):
        film = FiLM(16, 4)
        g = torch.Generator().manual_seed(1)
        fmap = torch.randn(2, 4, 5, 5, generator=g)
        out = film(fmap, torch.randn(2, 16, generator=g))
        assert torch.equal(out, fmap)

    def test_zero_gamma_gives_constant_beta(self):
        film = FiLM(4, 2)
        with torch.no_grad():
            film.proj.weight.zero_()
            film.proj.bias.copy_(torch.tensor([-1.0, -1.0, 0.7, -0.3]))
        out = film(torch.randn(1, 2, 3, 3), torch.zeros(1, 4))
        assert torch.allclose(out[0, 0], torch.full((3, 3), 0.7))
        assert torch.allclose(out[0, 1], torch.full((3, 3), -0.3))

    def test_hand_computed_modulation(self):
        film = FiLM(4, 2)
        with torch.no_grad():
            film.proj.weight.zero_()
            # gamma = (2, -1), beta = (0.5, 0)
            film.proj.bias.copy_(torch.tensor([1.0, -2.0, 0.5, 0.0]))
        fmap = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]]])
        out = film(fmap, torch.zeros(1, 4))
        want = torch.tensor(
            [[[[2.5, 4.5], [6.5, 8.5]], [[-5.0, -6.0], [-7.0, -8.0]]]]
        )
        assert torch.allclose(out, want)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            FiLM(4, 2)(torch.randn(1, 3, 2, 2), torch.zeros(1, 4))

    def test_linear_in_feature_map_when_beta_zero(self):
        film = FiLM(4, 3)
        with torch.no_grad():
            film.proj.weight.zero_()
            film.proj.bias.copy_(torch.tensor([0.4, -0.2, 1.1, 0.0, 0.0, 0.0]))
        cond = torch.zeros(1, 4)
        g = torch.Generator().manual_seed(2)
        f1 = torch.randn(1, 3, 4, 4, generator=g)
        f2 = torch.randn(1, 3, 4, 4, generator=g)
        a, b = 0.7, -1.3
        lhs = film(a * f1 + b * f2, cond)
        rhs = a * film(f1, cond) + b * film(f2, cond)
        assert torch.allclose(lhs, rhs, atol=1e-6)


class TestDenoiser:
    def test_shape_contract(self):
        net = make_denoiser(TOY)
        x = torch.randn(2, 3, 8, 8)
        out = net(x, torch.tensor([1, 5]), torch.rand(2, 8), torch.rand(2, 3))
        assert out.shape == x.shape

    def test_default_shape_and_size(self):
        net = make_denoiser()
        x, t, spec, mat = toy_batch()
        assert net(x, t, spec, mat).shape == x.shape
        assert count_parameters(net) < 5_000_000

    def test_deterministic(self):
        net = make_denoiser(TOY)
        net.eval()
        x = torch.randn(1, 3, 8, 8)
        args = (x, torch.tensor([4]), torch.rand(1, 8), torch.rand(1, 3))
        assert torch.equal(net(*args), net(*args))

    def test_rejects_bad_timestep(self):
        net = make_denoiser(TOY)
        with pytest.raises(ValueError):
            net(torch.randn(1, 3, 8, 8), torch.tensor([0]), torch.rand(1, 8), torch.rand(1, 3))

    def test_rejects_bad_shape(self):
        net = make_denoiser(TOY)
        with pytest.raises(ValueError):
            net(torch.randn(1, 2, 8, 8), torch.tensor([1]), torch.rand(1, 8), torch.rand(1, 3))

    def test_input_concat_variant(self):
        cfg = dict(TOY)
        cfg["conditioning"] = "input_concat"
        net = make_denoiser(cfg)
        x = torch.randn(2, 3, 8, 8)
        out = net(x, torch.tensor([1, 2]), torch.rand(2, 8), torch.rand(2, 3))
        assert out.shape == x.shape

    def test_condition_matters_after_training_step(self):
        torch.manual_seed(0)
        net = make_denoiser(TOY)
        x = torch.randn(4, 3, 8, 8)
        t = torch.tensor([1, 2, 3, 4])
        spec = torch.rand(4, 8)
        mat = torch.rand(4, 3)
        opt = torch.optim.Adam(net.parameters(), lr=1e-2)
        for _ in range(2):
            out = net(x, t, spec, mat, torch.tensor([False, False, True, True]))
            loss = ((out - torch.randn_like(out)) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        net.eval()
        probe = (x[:1], t[:1], spec[:1], mat[:1])
        cond_out = net(*probe, torch.zeros(1, dtype=torch.bool))
        null_out = net(*probe, torch.ones(1, dtype=torch.bool))
        assert not torch.allclose(cond_out, null_out)


class TestSurrogate:
    def test_range_and_shape(self):
        net = make_surrogate()
        out = net(torch.rand(3, 3, 32, 32), torch.rand(3, 3))
        assert out.shape == (3, 201)
        assert torch.all((out >= 0) & (out <= 1))

    def test_deterministic(self):
        net = make_surrogate()
        net.eval()
        img = torch.rand(1, 3, 32, 32)
        mat = torch.rand(1, 3)
        assert torch.equal(net(img, mat), net(img, mat))


class TestLRSchedule:
    def test_endpoints_and_midpoint(self):
        assert lr_at(0, 100) == 1e-4
        assert lr_at(100, 100) == 0.0
        assert lr_at(50, 100) == pytest.approx(5e-5, rel=1e-12)

    def test_monotone_decreasing(self):
        vals = [lr_at(e, 60) for e in range(61)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(-1, 10)
        with pytest.raises(ValueError):
            lr_at(11, 10)


class TestGradients:
    def test_identity_exact(self):
        # parameter-free linear path: only finite-difference rounding remains
        report = gradcheck_suite.check_identity()
        assert report.max_rel_err < 1e-7

    def test_film_gradients(self):
        report = gradcheck_suite.check_film()
        assert report.passed, report.worst

    def test_embedder_gradients(self):
        report = gradcheck_suite.check_embedder()
        assert report.passed, report.worst

    def test_resblock_gradients(self):
        report = gradcheck_suite.check_resblock()
        assert report.passed, report.worst

    def test_denoiser_gradients_sampled(self):
        # full element coverage runs in the acceptance suite
        report = gradcheck_suite.check_denoiser(max_per_tensor=24)
        assert report.passed, report.worst

    def test_surrogate_gradients_sampled(self):
        report = gradcheck_suite.check_surrogate(max_per_tensor=24)
        assert report.passed, report.worst


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(4)
        net = make_denoiser(TOY)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, net, "denoiser", {"denoiser": TOY})
        ckpt = load_checkpoint(path)
        assert ckpt.kind == "denoiser"
        assert ckpt.config["denoiser"]["base_width"] == TOY["base_width"]
        net2 = make_denoiser(ckpt.config["denoiser"])
        apply_checkpoint(net2, ckpt)
        x = torch.randn(1, 3, 8, 8)
        args = (x, torch.tensor([2]), torch.rand(1, 8), torch.rand(1, 3))
        net.eval()
        net2.eval()
        # float32 storage reproduces float32 weights exactly
        assert torch.equal(net(*args), net2(*args))

    def test_shape_table_validated(self, tmp_path):
        net = make_denoiser(TOY)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, net, "denoiser", {})
        bigger = dict(TOY)
        bigger["base_width"] = 4
        with pytest.raises(ValueError, match="shape table"):
            apply_checkpoint(make_denoiser(bigger), load_checkpoint(path))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="not a rasgen checkpoint"):
            load_checkpoint(path)

    def test_surrogate_checkpoint(self, tmp_path):
        from rasgen.training import load_surrogate_checkpoint, save_surrogate_checkpoint

        net = make_surrogate(gradcheck_suite.TOY_SURROGATE)
        path = tmp_path / "s.ckpt"
        save_surrogate_checkpoint(path, net)
        net2 = load_surrogate_checkpoint(path)
        img = torch.rand(1, 3, 8, 8)
        mat = torch.rand(1, 3)
        net.eval()
        assert torch.equal(net(img, mat), net2(img, mat))


class TestConditionRecord:
    def test_batch_conversion(self):
        rng = np.random.default_rng(0)
        conds = [
            nets.Condition(rng.random(201), np.array([2.2, 0.0009, 1.575])),
            nets.Condition.null(),
        ]
        spectra, materials, null_mask = nets.Condition.batch(conds)
        assert spectra.shape == (2, 201)
        assert materials.shape == (2, 3)
        assert null_mask.tolist() == [False, True]
        emb = ConditionEmbedder()
        out = emb(spectra, materials, null_mask)
        assert out.shape == (2, CONDITION_DIM)
        assert torch.equal(out[1], emb.null_embedding)


class TestTimeEmbedding:
    def test_shape_and_determinism(self):
        t = torch.tensor([1.0, 57.0, 300.0])
        emb = nets.sinusoidal_time_embedding(t, 64)
        assert emb.shape == (3, 64)
        assert torch.equal(emb, nets.sinusoidal_time_embedding(t, 64))
        assert not torch.allclose(emb[0], emb[1])

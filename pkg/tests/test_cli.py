import json
from pathlib import Path

import numpy as np
import pytest

from rasgen import cli, oracle, plots
from rasgen.cli import main

TINY_TRAIN_CONFIG = {
    "denoiser": {"base_width": 4},
    "T": 12,
    "epochs": 2,
}


@pytest.fixture(scope="module")
def workflow(tmp_path_factory):
    """Mini end-to-end run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("wf")
    data = root / "data"
    assert main(["forge", "--n", "64", "--seed", "3", "--out", str(data)]) == 0

    surr = root / "surr"
    assert (
        main(
            [
                "train-surrogate",
                "--data", str(data),
                "--out", str(surr),
                "--epochs", "3",
                "--seed", "1",
            ]
        )
        == 0
    )

    diff = root / "diff"
    cfg_path = root / "train.json"
    cfg_path.write_text(json.dumps(TINY_TRAIN_CONFIG))
    assert (
        main(
            [
                "train-diffusion",
                "--data", str(data),
                "--surrogate", str(surr / "surrogate.ckpt"),
                "--out", str(diff),
                "--seed", "1",
                "--config", str(cfg_path),
            ]
        )
        == 0
    )

    gen = root / "gen"
    target = root / "target.bin"
    spectra = oracle.load_spectra(data / "spectra.bin")
    oracle.save_spectra(target, spectra[0][None, :])
    assert (
        main(
            [
                "generate",
                "--model", str(diff / "model.ckpt"),
                "--target", str(target),
                "--material", "RO4835",
                "--n", "3",
                "--seed", "5",
                "--out", str(gen),
            ]
        )
        == 0
    )
    return {"root": root, "data": data, "surr": surr, "diff": diff, "gen": gen,
            "target": target}


class TestUsage:
    def test_unknown_subcommand_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_no_command_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_missing_model_exit_1(self, tmp_path):
        target = tmp_path / "t.bin"
        oracle.save_spectra(target, np.ones((1, 201)) * 0.5)
        code = main(
            [
                "generate",
                "--model", str(tmp_path / "nope.ckpt"),
                "--target", str(target),
                "--material", "RO4835",
                "--out", str(tmp_path / "g"),
            ]
        )
        assert code == 1

    def test_unknown_material_exit_1(self, tmp_path, workflow):
        code = main(
            [
                "generate",
                "--model", str(workflow["diff"] / "model.ckpt"),
                "--target", str(workflow["target"]),
                "--material", "Unobtainium",
                "--out", str(tmp_path / "g"),
            ]
        )
        assert code == 1


class TestForgeCommand:
    def test_manifest_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["forge", "--n", "10", "--seed", "1", "--out", str(a)]) == 0
        assert main(["forge", "--n", "10", "--seed", "1", "--out", str(b)]) == 0
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()

    def test_writes_resolved_config(self, workflow):
        cfg = json.loads((workflow["data"] / "config.json").read_text())
        assert cfg["command"] == "forge"
        assert cfg["config"]["n"] == 64
        assert cfg["config"]["seed"] == 3

    def test_out_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path))
        assert main(["forge", "--n", "5", "--seed", "2", "--out", "rel_dir"]) == 0
        assert (tmp_path / "rel_dir" / "manifest.json").exists()


class TestGenerate:
    def test_report_contents(self, workflow):
        report = json.loads((workflow["gen"] / "report.json").read_text())
        assert report["n"] == 3
        assert len(report["designs"]) == 3
        for entry in report["designs"]:
            assert {"fabricable", "min_feature_mm", "baa_normalized", "mse",
                    "image", "meta_atom", "spectrum_offset"} <= set(entry)
            assert (workflow["gen"] / entry["image"]).exists()
            assert (workflow["gen"] / entry["meta_atom"]).exists()
        resim = oracle.load_spectra(workflow["gen"] / "respectra.bin")
        assert resim.shape == (3, 201)

    def test_generation_deterministic(self, workflow, tmp_path):
        out2 = tmp_path / "gen2"
        assert (
            main(
                [
                    "generate",
                    "--model", str(workflow["diff"] / "model.ckpt"),
                    "--target", str(workflow["target"]),
                    "--material", "RO4835",
                    "--n", "3",
                    "--seed", "5",
                    "--out", str(out2),
                ]
            )
            == 0
        )
        a = json.loads((workflow["gen"] / "report.json").read_text())
        b = json.loads((out2 / "report.json").read_text())
        a["model"] = b["model"] = ""
        assert a == b
        assert (workflow["gen"] / "respectra.bin").read_bytes() == (
            out2 / "respectra.bin"
        ).read_bytes()

    def test_candidate_selection(self, workflow, tmp_path):
        out = tmp_path / "gen_sel"
        assert (
            main(
                [
                    "generate",
                    "--model", str(workflow["diff"] / "model.ckpt"),
                    "--target", str(workflow["target"]),
                    "--material", "RO4835",
                    "--n", "2",
                    "--seed", "5",
                    "--candidates", "3",
                    "--surrogate", str(workflow["surr"] / "surrogate.ckpt"),
                    "--out", str(out),
                ]
            )
            == 0
        )
        report = json.loads((out / "report.json").read_text())
        assert report["candidates_per_design"] == 3
        assert len(report["designs"]) == 2

    def test_candidates_require_surrogate(self, workflow, tmp_path):
        code = main(
            [
                "generate",
                "--model", str(workflow["diff"] / "model.ckpt"),
                "--target", str(workflow["target"]),
                "--material", "RO4835",
                "--candidates", "2",
                "--out", str(tmp_path / "g"),
            ]
        )
        assert code == 1

    def test_select_by_surrogate_prefers_better_candidate(self, workflow):
        import torch
        from torch import nn

        import rasgen.forge as forge
        from rasgen import codec, oracle as orc

        samples = forge.load_dataset(workflow["data"])
        cond = samples[0]
        other = next(
            s for s in samples[1:] if abs(s.image[0].mean() - cond.image[0].mean()) > 0.2
        )

        class ExactSurrogate(nn.Module):
            """Stand-in that scores candidates with the true forward model."""

            def forward(self, images, materials):
                preds = [
                    orc.reflection_spectrum(codec.decode(img.numpy()), cond.material)
                    for img in images
                ]
                return torch.tensor(np.stack(preds), dtype=torch.float32)

        pool = np.stack([other.image, cond.image])  # true design second
        picked = cli.select_by_surrogate(
            pool, cond.spectrum, cond.material, ExactSurrogate(), 1
        )
        assert picked[0] == 1

    def test_inline_material_json(self, workflow, tmp_path):
        mat = json.dumps({"eps_r": 2.6, "tan_delta": 0.0013, "thickness_mm": 3.175})
        out = tmp_path / "gen_inline"
        assert (
            main(
                [
                    "generate",
                    "--model", str(workflow["diff"] / "model.ckpt"),
                    "--target", str(workflow["target"]),
                    "--material", mat,
                    "--n", "1",
                    "--seed", "2",
                    "--out", str(out),
                ]
            )
            == 0
        )
        report = json.loads((out / "report.json").read_text())
        assert report["material"]["eps_r"] == 2.6


class TestEvaluate:
    def test_eval_report(self, workflow):
        assert main(["evaluate", "--run", str(workflow["gen"])]) == 0
        result = json.loads((workflow["gen"] / "eval.json").read_text())
        for key in ("mse", "aae", "baa_normalized", "baa_literal",
                    "valid_fraction", "diversity", "n_pairs", "config"):
            assert key in result
        assert result["n_pairs"] == 3
        assert result["diversity"] is not None


class TestPlot:
    def test_plot_from_run(self, workflow):
        out = workflow["root"] / "fig.svg"
        assert main(["plot", "--run", str(workflow["gen"]), "--out", str(out)]) == 0
        content = out.read_text()
        assert content.lstrip().startswith("<?xml")
        assert "svg" in content[:300]

    def test_plot_from_files(self, workflow, tmp_path):
        out = tmp_path / "fig2.svg"
        assert (
            main(
                [
                    "plot",
                    "--target", str(workflow["target"]),
                    "--generated", str(workflow["target"]),
                    "--out", str(out),
                ]
            )
            == 0
        )
        assert out.exists()

    def test_plot_target_only(self, workflow, tmp_path):
        out = tmp_path / "single.svg"
        code = main(["plot", "--target", str(workflow["target"]), "--out", str(out)])
        assert code == 0
        assert out.exists()

    def test_to_db_conversion(self):
        vals = plots.to_db(np.array([1.0, 0.316227766, 0.0, 1e-6]))
        assert vals[0] == pytest.approx(0.0, abs=1e-9)
        assert vals[1] == pytest.approx(-10.0, abs=1e-6)
        assert vals[2] == -40.0  # exact floor for zero
        assert vals[3] == -40.0  # values below the floor clamp to it


class TestConfigOverride:
    def test_config_file_overrides_flags(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n": 7}))
        out = tmp_path / "d"
        assert (
            main(
                ["forge", "--n", "99", "--seed", "4", "--out", str(out),
                 "--config", str(cfg)]
            )
            == 0
        )
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["n_samples"] == 7

    def test_target_json_format(self, tmp_path, workflow):
        target = tmp_path / "t.json"
        target.write_text(json.dumps(list(np.full(201, 0.7))))
        loaded = cli._load_target_spectrum(str(target))
        assert loaded.shape == (201,)
        assert loaded[0] == 0.7

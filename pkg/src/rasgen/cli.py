"""Command-line workflow: forge, train, generate, evaluate, ablate, plot.

Every command writes its fully resolved configuration next to its outputs;
given the same config and seed the outputs are byte-identical. Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import codec, forge, metrics, oracle, plots, training
from .diffusion import LossWeights, sample_designs
from .forge import ForgeConfig
from .training import (
    DiffusionTrainConfig,
    SurrogateTrainConfig,
    load_denoiser_checkpoint,
    load_surrogate_checkpoint,
    save_surrogate_checkpoint,
    train_diffusion,
    train_surrogate,
)

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "RASGEN_OUT_ROOT"


def _resolve_out(path: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _write_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": resolved}
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _apply_config_file(resolved: dict, config_path: str | None) -> dict:
    if config_path:
        overrides = json.loads(Path(config_path).read_text())
        resolved.update(overrides)
    return resolved


def _load_target_spectrum(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".json":
        values = np.asarray(json.loads(p.read_text()), dtype=np.float64)
    else:
        values = oracle.load_spectra(p)[0]
    return oracle.validate_spectrum(values)


def _parse_material(spec: str) -> oracle.Material:
    spec = spec.strip()
    if spec.startswith("{"):
        rec = json.loads(spec)
        return oracle.Material(
            rec.get("name", "custom"),
            rec["eps_r"],
            rec["tan_delta"],
            rec["thickness_mm"],
        )
    presets = oracle.MATERIAL_PRESETS
    if spec not in presets:
        raise ValueError(
            f"unknown material {spec!r}; presets: {', '.join(sorted(presets))}"
        )
    return presets[spec]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_forge(args) -> int:
    out = _resolve_out(args.out)
    resolved = {
        "n": args.n,
        "seed": args.seed,
        "families": args.families.split(",") if args.families else list(forge.FAMILIES),
        "materials": args.materials,
    }
    resolved = _apply_config_file(resolved, args.config)
    materials = (
        oracle.load_material_presets(resolved["materials"])
        if resolved["materials"]
        else dict(oracle.MATERIAL_PRESETS)
    )
    config = ForgeConfig(
        n=resolved["n"],
        seed=resolved["seed"],
        families={name: 1.0 for name in resolved["families"]},
        materials=materials,
    )
    _write_config(out, "forge", resolved)
    manifest = forge.build_dataset(config, out)
    log.info(
        "forged %d samples (%d skipped) into %s; histogram %s",
        manifest["n_samples"],
        manifest["skipped"],
        out,
        manifest["category_histogram"],
    )
    return 0


def cmd_train_surrogate(args) -> int:
    out = _resolve_out(args.out)
    resolved = {
        "data": args.data,
        "epochs": args.epochs,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "lr0": args.lr,
        "input_noise_std": args.input_noise,
        "surrogate": {},
    }
    resolved = _apply_config_file(resolved, args.config)
    _write_config(out, "train-surrogate", resolved)
    samples = forge.load_dataset(resolved["data"])
    config = SurrogateTrainConfig(
        epochs=resolved["epochs"],
        seed=resolved["seed"],
        batch_size=resolved["batch_size"],
        lr0=resolved["lr0"],
        input_noise_std=resolved["input_noise_std"],
        surrogate=resolved["surrogate"],
    )
    model, history = train_surrogate(samples, config)
    save_surrogate_checkpoint(out / "surrogate.ckpt", model)
    (out / "history.json").write_text(json.dumps(history, indent=2))
    log.info("surrogate final val MSE %.3e -> %s", history[-1]["val_mse"], out)
    return 0


def cmd_train_diffusion(args) -> int:
    out = _resolve_out(args.out)
    resolved = {
        "data": args.data,
        "surrogate": args.surrogate,
        "epochs": args.epochs,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "lr0": args.lr,
        "T": args.T,
        "schedule_kind": args.schedule,
        "conditioning": args.conditioning,
        "spectral_loss": args.spectral_loss == "on",
        "checkpoint_every": args.checkpoint_every,
        "loss_weights": {},
        "denoiser": {},
    }
    resolved = _apply_config_file(resolved, args.config)
    _write_config(out, "train-diffusion", resolved)
    samples = forge.load_dataset(resolved["data"])
    surrogate = None
    if resolved["spectral_loss"]:
        if not resolved["surrogate"]:
            raise ValueError("spectral loss requires --surrogate checkpoint")
        surrogate = load_surrogate_checkpoint(resolved["surrogate"])
    config = DiffusionTrainConfig(
        epochs=resolved["epochs"],
        seed=resolved["seed"],
        batch_size=resolved["batch_size"],
        lr0=resolved["lr0"],
        T=resolved["T"],
        schedule_kind=resolved["schedule_kind"],
        conditioning=resolved["conditioning"],
        spectral_loss=resolved["spectral_loss"],
        checkpoint_every=resolved["checkpoint_every"],
        weights=LossWeights(**resolved["loss_weights"]),
        denoiser=resolved["denoiser"],
    )
    _, _, history = train_diffusion(samples, surrogate, config, out_dir=out)
    (out / "history.json").write_text(json.dumps(history, indent=2))
    log.info("diffusion training done: final loss %.4f -> %s", history[-1]["loss"], out)
    return 0


def select_by_surrogate(
    images: np.ndarray,
    target: np.ndarray,
    material: oracle.Material,
    surrogate,
    keep: int,
) -> list[int]:
    """Rank decoded candidates by surrogate-predicted spectral MSE.

    Returns the indices of the `keep` best candidates. Ranking uses only the
    trained surrogate (never the oracle), so this is a pure inference-time
    filter.
    """
    atoms = [codec.decode(img) for img in images]
    enc = torch.from_numpy(
        np.stack([codec.encode(a) for a in atoms]).astype(np.float32)
    )
    mats = torch.from_numpy(
        np.tile(material.as_vector().astype(np.float32), (len(atoms), 1))
    )
    with torch.no_grad():
        pred = surrogate(enc, mats)
        errs = ((pred - torch.from_numpy(target.astype(np.float32))) ** 2).mean(dim=1)
    order = torch.argsort(errs).tolist()
    return order[:keep]


def run_generation(
    model_path,
    target: np.ndarray,
    material: oracle.Material,
    n: int,
    seed: int,
    out_dir: Path,
    guidance_w: float | None = None,
    surrogate_path=None,
    candidates: int = 1,
) -> dict:
    """Sample designs for one condition; decode, check, re-simulate, score.

    With candidates > 1, each of the n requested designs is the best of that
    many sampled candidates as judged by the surrogate.
    """
    denoiser, schedule, meta = load_denoiser_checkpoint(model_path)
    w = meta["loss_weights"]["guidance_w"] if guidance_w is None else guidance_w
    if candidates < 1:
        raise ValueError("candidates must be >= 1")
    total = n * candidates
    spectra = torch.from_numpy(np.tile(target.astype(np.float32), (total, 1)))
    materials = torch.from_numpy(
        np.tile(material.as_vector().astype(np.float32), (total, 1))
    )
    gen = torch.Generator().manual_seed(seed)
    images = sample_designs(denoiser, spectra, materials, schedule, w, gen)
    if candidates > 1:
        if surrogate_path is None:
            raise ValueError("candidate selection needs --surrogate")
        surrogate = load_surrogate_checkpoint(surrogate_path)
        picked = []
        for i in range(n):
            pool = images[i * candidates : (i + 1) * candidates]
            best = select_by_surrogate(pool, target, material, surrogate, 1)[0]
            picked.append(pool[best])
        images = np.stack(picked)

    designs_dir = out_dir / "designs"
    designs_dir.mkdir(parents=True, exist_ok=True)
    oracle.save_spectra(out_dir / "target.bin", target[None, :])
    entries = []
    respectra = []
    for k in range(n):
        atom = codec.decode(images[k])
        fab = codec.check_fabricable(atom)
        spec = oracle.reflection_spectrum(atom, material)
        respectra.append(spec)
        # serialize the canonical encoding of the decoded design (raw
        # sampler output is generally not a valid encoding)
        image_name = f"designs/design_{k:03d}.png"
        codec.save_encoded_png(codec.encode(atom), out_dir / image_name)
        (designs_dir / f"design_{k:03d}.json").write_text(
            json.dumps(codec.meta_atom_to_json(atom), indent=2, sort_keys=True)
        )
        entries.append(
            {
                "index": k,
                "image": image_name,
                "meta_atom": f"designs/design_{k:03d}.json",
                "fabricable": fab.passed,
                "min_feature_mm": fab.min_feature_mm,
                "baa_normalized": metrics.baa(target, spec),
                "mse": float(np.mean((spec - target) ** 2)),
                "spectrum_offset": k * oracle.N_FREQ * 4,
            }
        )
    oracle.save_spectra(out_dir / "respectra.bin", np.stack(respectra))
    report = {
        "model": str(model_path),
        "material": {
            "name": material.name,
            "eps_r": material.eps_r,
            "tan_delta": material.tan_delta,
            "thickness_mm": material.thickness_mm,
        },
        "n": n,
        "seed": seed,
        "guidance_w": w,
        "candidates_per_design": candidates,
        "designs": entries,
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def cmd_generate(args) -> int:
    out = _resolve_out(args.out)
    resolved = {
        "model": args.model,
        "target": args.target,
        "material": args.material,
        "n": args.n,
        "seed": args.seed,
        "guidance_w": args.guidance_w,
        "surrogate": args.surrogate,
        "candidates": args.candidates,
    }
    resolved = _apply_config_file(resolved, args.config)
    _write_config(out, "generate", resolved)
    target = _load_target_spectrum(resolved["target"])
    material = _parse_material(resolved["material"])
    report = run_generation(
        resolved["model"],
        target,
        material,
        resolved["n"],
        resolved["seed"],
        out,
        resolved["guidance_w"],
        surrogate_path=resolved["surrogate"],
        candidates=resolved["candidates"],
    )
    n_fab = sum(1 for d in report["designs"] if d["fabricable"])
    log.info(
        "generated %d designs (%d fabricable), mean BAA %.3f -> %s",
        report["n"],
        n_fab,
        float(np.mean([d["baa_normalized"] for d in report["designs"]])),
        out,
    )
    return 0


def evaluate_run(run_dir: Path) -> dict:
    """Metric report over a generation run directory."""
    report = json.loads((run_dir / "report.json").read_text())
    gen = oracle.load_spectra(run_dir / "respectra.bin")
    target = oracle.load_spectra(run_dir / "target.bin")[0]
    targets = np.tile(target, (gen.shape[0], 1))
    masks = []
    for entry in report["designs"]:
        atom = codec.meta_atom_from_json(
            json.loads((run_dir / entry["meta_atom"]).read_text())
        )
        masks.append(atom.pattern.astype(bool))
    return metrics.evaluate_pairs(gen, targets, masks=masks)


def cmd_evaluate(args) -> int:
    run_dir = _resolve_out(args.run)
    result = evaluate_run(run_dir)
    out_path = Path(args.out) if args.out else run_dir / "eval.json"
    out_path.write_text(json.dumps(result, indent=2, sort_keys=True))
    log.info(
        "evaluate: mse %.4e aae %.4e baa %.3f valid %.2f diversity %s",
        result["mse"],
        result["aae"],
        result["baa_normalized"],
        result["valid_fraction"],
        result["diversity"],
    )
    return 0


ABLATION_ARMS = [
    {"name": "film_spec", "conditioning": "film", "spectral_loss": True},
    {"name": "film_nospec", "conditioning": "film", "spectral_loss": False},
    {"name": "concat_spec", "conditioning": "input_concat", "spectral_loss": True},
    {"name": "concat_nospec", "conditioning": "input_concat", "spectral_loss": False},
]


def pick_eval_conditions(
    samples: list[forge.Sample], n_eval: int, seed: int, split: str = "test"
) -> list[forge.Sample]:
    """Deterministic category-stratified draw of held-out conditions."""
    pool = [s for s in samples if s.split == split]
    rng = np.random.default_rng([seed, 0xE7A1])
    by_cat: dict[str, list[forge.Sample]] = {}
    for s in pool:
        by_cat.setdefault(s.category, []).append(s)
    order = [c for c in forge.CATEGORIES if c in by_cat]
    chosen: list[forge.Sample] = []
    k = 0
    while len(chosen) < n_eval and any(by_cat.values()):
        cat = order[k % len(order)]
        k += 1
        bucket = by_cat[cat]
        if bucket:
            chosen.append(bucket.pop(int(rng.integers(len(bucket)))))
    return chosen


def evaluate_model_on_conditions(
    denoiser,
    schedule,
    guidance_w,
    conditions: list[forge.Sample],
    seed: int,
    surrogate=None,
    candidates: int = 1,
) -> dict:
    """Generate one design per condition and score against the oracle.

    With candidates > 1 and a surrogate, each condition's design is the
    surrogate-ranked best of its candidate pool.
    """
    spectra = torch.from_numpy(
        np.stack([s.spectrum for s in conditions] * candidates).astype(np.float32)
    )
    materials = torch.from_numpy(
        np.stack([s.material.as_vector() for s in conditions] * candidates).astype(
            np.float32
        )
    )
    gen = torch.Generator().manual_seed(seed)
    images = sample_designs(denoiser, spectra, materials, schedule, guidance_w, gen)
    n = len(conditions)
    resim = []
    fabricable = []
    for i, cond in enumerate(conditions):
        pool = images[i::n] if candidates > 1 else images[i : i + 1]
        if candidates > 1:
            best = select_by_surrogate(
                pool, cond.spectrum, cond.material, surrogate, 1
            )[0]
            img = pool[best]
        else:
            img = pool[0]
        atom = codec.decode(img)
        fabricable.append(codec.check_fabricable(atom).passed)
        resim.append(oracle.reflection_spectrum(atom, cond.material))
    gen_arr = np.stack(resim)
    target_arr = np.stack([s.spectrum for s in conditions])
    _, mse_avg = metrics.spectral_mse(gen_arr, target_arr)
    _, aae_avg = metrics.aae(gen_arr, target_arr)
    _, baa_avg = metrics.baa_pairs(gen_arr, target_arr)
    return {
        "mse": mse_avg,
        "aae": aae_avg,
        "baa_normalized": baa_avg,
        "valid_fraction": metrics.valid_fraction(gen_arr, target_arr),
        "fabricable_fraction": float(np.mean(fabricable)),
        "n_conditions": len(conditions),
    }


def run_ablation(
    data_dir,
    out_dir: Path,
    epochs: int,
    seed: int,
    n_eval: int,
    surrogate_epochs: int = 12,
    arms: list[dict] | None = None,
    eval_guidance_w: float | None = None,
    candidates: int = 1,
    T: int | None = None,
) -> dict:
    """Train the conditioning x spectral-loss grid on identical data/seeds.

    Every arm is trained with the same dataset, seed, and epoch budget, then
    scored on the same held-out conditions with the same sampling settings.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = forge.load_dataset(data_dir)
    surrogate, _ = train_surrogate(
        samples, SurrogateTrainConfig(epochs=surrogate_epochs, seed=seed)
    )
    conditions = pick_eval_conditions(samples, n_eval, seed)
    results = {}
    for arm in arms if arms is not None else ABLATION_ARMS:
        config = DiffusionTrainConfig(
            epochs=epochs,
            seed=seed,
            conditioning=arm["conditioning"],
            spectral_loss=arm["spectral_loss"],
            **({"T": T} if T is not None else {}),
        )
        model, schedule, _ = train_diffusion(
            samples,
            surrogate if arm["spectral_loss"] else None,
            config,
            out_dir=out_dir / arm["name"],
        )
        w = config.weights.guidance_w if eval_guidance_w is None else eval_guidance_w
        results[arm["name"]] = evaluate_model_on_conditions(
            model,
            schedule,
            w,
            conditions,
            seed,
            surrogate=surrogate if candidates > 1 else None,
            candidates=candidates,
        )
        log.info("ablation arm %s: %s", arm["name"], results[arm["name"]])
    (out_dir / "ablation.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    return results


def cmd_ablate(args) -> int:
    out = _resolve_out(args.out)
    resolved = {
        "data": args.data,
        "epochs": args.epochs,
        "seed": args.seed,
        "n_eval": args.n_eval,
        "surrogate_epochs": args.surrogate_epochs,
        "eval_guidance_w": args.eval_guidance_w,
        "candidates": args.candidates,
    }
    resolved = _apply_config_file(resolved, args.config)
    _write_config(out, "ablate", resolved)
    results = run_ablation(
        resolved["data"],
        out,
        resolved["epochs"],
        resolved["seed"],
        resolved["n_eval"],
        resolved["surrogate_epochs"],
        eval_guidance_w=resolved["eval_guidance_w"],
        candidates=resolved["candidates"],
    )
    header = f"{'arm':16s} {'MSE':>10s} {'AAE':>10s} {'BAA':>8s} {'valid':>7s}"
    print(header)
    for name, r in results.items():
        print(
            f"{name:16s} {r['mse']:10.4e} {r['aae']:10.4e} "
            f"{r['baa_normalized']:8.3f} {r['valid_fraction']:7.2f}"
        )
    return 0


def cmd_plot(args) -> int:
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.run:
        run_dir = _resolve_out(args.run)
        target = oracle.load_spectra(run_dir / "target.bin")[0]
        generated = list(oracle.load_spectra(run_dir / "respectra.bin"))
    else:
        if not args.target:
            raise ValueError("plot needs --run or --target")
        target = _load_target_spectrum(args.target)
        generated = [_load_target_spectrum(p) for p in (args.generated or [])]
    plots.plot_comparison(target, generated, out)
    log.info("wrote %s", out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rasgen",
        description="Inverse design of metasurface radar absorbers with a "
        "physics-guided conditional diffusion model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="generate a labelled synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--families", default=None, help="comma-separated family names")
    p.add_argument("--materials", default=None, help="material preset JSON file")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("train-surrogate", help="fit the spectrum surrogate")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--input-noise", type=float, default=0.02)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train_surrogate)

    p = sub.add_parser("train-diffusion", help="train the guided denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--T", type=int, default=300)
    p.add_argument("--schedule", default="linear")
    p.add_argument("--conditioning", choices=["film", "input_concat"], default="film")
    p.add_argument("--spectral-loss", choices=["on", "off"], default="on")
    p.add_argument("--checkpoint-every", type=int, default=20)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("generate", help="sample designs for a target spectrum")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--material", required=True, help="preset name or inline JSON")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--guidance-w", type=float, default=None)
    p.add_argument("--surrogate", default=None,
                   help="surrogate checkpoint for candidate ranking")
    p.add_argument("--candidates", type=int, default=1,
                   help="sample this many candidates per design, keep the best")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a generation run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="conditioning x spectral-loss grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-eval", type=int, default=16)
    p.add_argument("--surrogate-epochs", type=int, default=12)
    p.add_argument("--eval-guidance-w", type=float, default=None)
    p.add_argument("--candidates", type=int, default=1)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="emit an SVG spectrum comparison")
    p.add_argument("--run", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--generated", nargs="*", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())

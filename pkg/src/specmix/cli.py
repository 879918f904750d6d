"""Command-line interface: ``specmix <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from specmix import data as D
from specmix.config import TrainConfig
from specmix.encoder import active_response_fraction
from specmix.errors import ConfigError, FormatError, ParameterError, TrainingDiverged
from specmix.evaluate import (
    RunResult,
    export_abundance_maps,
    fcls_baseline,
    pca_project,
    per_material_rmse,
    repeated_eval,
    rmse,
    write_pca_csv,
)
from specmix.train import load_model, read_history, train

log = logging.getLogger("specmix")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_DIVERGED = 0, 2, 3, 4
ACTIVE_BATCH = 256


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _load_inputs(args):
    cube = D.load_cube(args.cube)
    e = D.load_endmembers(args.endmembers)
    if args.bands != "none":
        cube = D.remove_bands(cube, args.bands)
        e = D.remove_endmember_bands(e, args.bands)
    if e.shape[1] != cube.bands:
        raise ConfigError(f"endmembers have {e.shape[1]} bands, cube has {cube.bands}")
    return cube, e


def _load_truth(path, pixels: D.PixelSet) -> np.ndarray:
    truth = D.load_cube(path).data
    if truth.shape[:2] != pixels.shape:
        raise FormatError(f"truth is {truth.shape[:2]}, cube is {pixels.shape}")
    return truth


def _config(args, k: int) -> TrainConfig:
    base = TrainConfig.load(args.config).to_dict() if args.config else {"K": k}
    if "K" not in base:
        base["K"] = k
    overrides = {
        name: getattr(args, name)
        for name in ("lambda0", "lambda1", "lambda2", "lambda_pq", "lr", "batch_size",
                     "iterations", "N", "M", "L", "seed", "checkpoint_every")
        if getattr(args, name, None) is not None
    }
    for flag, key in (("no_encoder", "use_encoder"), ("no_corrections", "use_corrections"),
                      ("no_adversarial", "use_adversarial")):
        if getattr(args, flag, False):
            overrides[key] = False
    if getattr(args, "post_normalization", False):
        overrides["post_normalization"] = True
    base.update(overrides)
    return TrainConfig.from_dict(base)


def _maps(model, pixels: D.PixelSet) -> np.ndarray:
    y = model.unmix(pixels.normalized, pixels.raw)
    return D.pixels_to_map(y, pixels)


def _active(model, pixels: D.PixelSet, seed: int = 0) -> float | None:
    if model.encoder is None or len(pixels) < 2:
        return None
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pixels), size=min(ACTIVE_BATCH, len(pixels)), replace=False)
    return active_response_fraction(pixels.normalized[np.sort(idx)], model.encoder)


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_rmse_csv(report, path) -> None:
    k = len(report.runs[0].per_material) if report.runs else 0
    lines = ["seed,overall," + ",".join(f"k{i}" for i in range(k)) + ",active_response,runtime"]
    for r in report.runs:
        act = "" if r.active_response is None else repr(r.active_response)
        lines.append(",".join([str(r.seed), repr(r.overall), *map(repr, r.per_material), act, repr(r.runtime)]))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
SCENE_FLAGS = {
    "height": "height", "width": "width", "materials": "materials", "num_bands": "bands",
    "blobs": "blob_count", "sigma": "blob_sigma", "peak": "blob_peak", "snr": "noise_snr",
}


def _scene_params(args) -> D.SceneParams:
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("scene config must be a flat JSON object")
        known = set(D.SceneParams.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
    for flag, key in SCENE_FLAGS.items():
        if getattr(args, flag) is not None:
            values[key] = getattr(args, flag)
    try:
        return D.SceneParams(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_synth_gen(args) -> int:
    params = _scene_params(args)
    lib = D.load_endmembers(args.library) if args.library else None
    cube, gt = D.synthesize_scene(args.seed, params, lib)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.save_cube(cube, out / "cube.hsc")
    D.save_cube(D.SpectralCube(gt.abundances), out / "truth.hsc")
    D.save_endmembers(gt.endmembers, out / "endmembers.csv")
    print(f"wrote {out / 'cube.hsc'} ({cube.height}x{cube.width}x{cube.bands}), truth.hsc, endmembers.csv")
    return EXIT_OK


def cmd_train(args) -> int:
    cube, e = _load_inputs(args)
    pixels = D.preprocess(cube)
    cfg = _config(args, e.shape[0])
    t0 = time.perf_counter()
    res = train(pixels, e, cfg, run_dir=args.run_dir, progress_every=args.progress)
    it, l_re, l_adv, gp = res.history[-1] if res.history else (0, 0.0, 0.0, 0.0)
    print(f"trained {it} iterations in {time.perf_counter() - t0:.1f}s: "
          f"L_re={l_re:.5f} L_adv={l_adv:.5f} penalty={gp:.5f}")
    print(f"checkpoint: {res.last_checkpoint}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cube, e = _load_inputs(args)
    pixels = D.preprocess(cube)
    truth = _load_truth(args.truth, pixels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.run_dir:
        model = load_model(args.run_dir)
        est = _maps(model, pixels)
        run = RunResult(model.cfg.seed, rmse(truth, est), per_material_rmse(truth, est).tolist(),
                        _active(model, pixels))
        report = {
            "mode": "checkpoint",
            "run_dir": str(args.run_dir),
            "overall_rmse": run.overall,
            "per_material_rmse": run.per_material,
            "active_response": run.active_response,
        }
        _write_json(report, out / "report.json")
        print(f"overall RMSE {run.overall:.5f}  per material " + " ".join(f"{v:.5f}" for v in run.per_material))
        if args.figures:
            from specmix import plotting

            plotting.plot_abundance_maps(est, out / "abundance_maps.png", truth)
            hist = Path(args.run_dir) / "history.csv"
            if hist.exists():
                plotting.plot_history(read_history(hist), out / "history.png")
        return EXIT_OK

    base = _config(args, e.shape[0])

    def run_one(seed: int) -> RunResult:
        t0 = time.perf_counter()
        run_dir = out / f"run_{seed}" if args.keep_runs else None
        res = train(pixels, e, base.updated(seed=seed), run_dir=run_dir)
        est = _maps(res.model, pixels)
        return RunResult(seed, rmse(truth, est), per_material_rmse(truth, est).tolist(),
                         _active(res.model, pixels), time.perf_counter() - t0)

    report = repeated_eval(run_one, runs=args.runs, master_seed=args.master_seed)
    payload = {"mode": "repeated", "config": base.to_dict(), "master_seed": args.master_seed, **report.to_dict()}
    _write_json(payload, out / "report.json")
    _write_rmse_csv(report, out / "rmse_runs.csv")
    print(f"RMSE over {len(report.runs)} run(s): {report.mean:.5f} +- {report.std:.5f}"
          f"  (failures: {len(report.failures)})")
    if args.figures and report.runs:
        from specmix import plotting

        plotting.plot_rmse_runs([r.overall for r in report.runs], out / "rmse_runs.png")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cube, e = _load_inputs(args)
    pixels = D.preprocess(cube)
    y = fcls_baseline(pixels.raw, e)
    est = D.pixels_to_map(y, pixels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_abundance_maps(est, out / "fcls")
    report = {"mode": "fcls", "iterations": 500}
    if args.truth:
        truth = _load_truth(args.truth, pixels)
        report["overall_rmse"] = rmse(truth, est)
        report["per_material_rmse"] = per_material_rmse(truth, est).tolist()
        print(f"FCLS overall RMSE {report['overall_rmse']:.5f}")
    _write_json(report, out / "report.json")
    if args.figures:
        from specmix import plotting

        truth = _load_truth(args.truth, pixels) if args.truth else None
        plotting.plot_abundance_maps(est, out / "fcls_maps.png", truth)
    return EXIT_OK


def cmd_export(args) -> int:
    cube, e = _load_inputs(args)
    pixels = D.preprocess(cube)
    model = load_model(args.run_dir)
    est = _maps(model, pixels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = export_abundance_maps(est, out / "abundance")
    latents = model.latents(pixels.normalized, pixels.raw)
    proj = pca_project(latents)
    labels = np.argmax(est.reshape(-1, est.shape[2])[pixels.index], axis=1)
    write_pca_csv(proj, out / "latent_pca.csv", labels.tolist())
    written.append(out / "latent_pca.csv")
    if args.figures:
        from specmix import plotting

        written.append(plotting.plot_abundance_maps(est, out / "abundance_maps.png"))
        written.append(plotting.plot_pca(proj, out / "latent_pca.png", labels))
        hist = Path(args.run_dir) / "history.csv"
        if hist.exists():
            written.append(plotting.plot_history(read_history(hist), out / "history.png"))
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def _add_inputs(p, truth=False, truth_required=False):
    p.add_argument("--cube", required=True, help="HSC cube")
    p.add_argument("--endmembers", required=True, help="endmember CSV (K rows x D)")
    p.add_argument("--bands", default="none", help="band-removal preset: urban, jasper or none")
    if truth:
        p.add_argument("--truth", required=truth_required, help="ground-truth abundances as a K-band HSC")


def _add_train_flags(p, seed_required):
    p.add_argument("--config", help="JSON config; flags override it")
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda0", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda-pq", dest="lambda_pq", type=float)
    p.add_argument("--N", type=int, help="mixture components")
    p.add_argument("--M", type=int, help="latent size")
    p.add_argument("--L", type=int, help="noise dimension (default K)")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--no-encoder", action="store_true", help="feed raw spectra to the mixture kernel")
    p.add_argument("--no-corrections", action="store_true", help="plain linear decoder")
    p.add_argument("--no-adversarial", action="store_true", help="drop the critic")
    p.add_argument("--post-normalization", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specmix", description="Hyperspectral unmixing with a mixture-kernel autoencoder")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate the synthetic scene")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--config", help="JSON of scene parameters; flags override it")
    p.add_argument("--height", type=int, help="default 60")
    p.add_argument("--width", type=int, help="default 60")
    p.add_argument("--materials", type=int, help="default 4")
    p.add_argument("--num-bands", dest="num_bands", type=int, help="default 200")
    p.add_argument("--blobs", type=int, help="blobs per material, default 5")
    p.add_argument("--sigma", type=float, help="blob width in pixels, default 6")
    p.add_argument("--peak", type=float, help="blob peak weight, default 0.9")
    p.add_argument("--snr", type=float, help="dB, default 30; inf disables noise")
    p.add_argument("--library", help="endmember CSV to use instead of procedural spectra")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train one model")
    _add_inputs(p)
    _add_train_flags(p, seed_required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--progress", type=int, default=0, help="log every N iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="RMSE of a trained run, or mean +- std over repeated runs")
    _add_inputs(p, truth=True, truth_required=True)
    _add_train_flags(p, seed_required=False)
    p.add_argument("--run-dir", help="evaluate this trained run instead of training")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--master-seed", dest="master_seed", type=int, default=0)
    p.add_argument("--keep-runs", action="store_true", help="keep each run directory")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="FCLS abundances")
    _add_inputs(p, truth=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("export", help="abundance maps and latent PCA of a trained run")
    _add_inputs(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

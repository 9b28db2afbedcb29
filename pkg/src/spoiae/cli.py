"""Command-line interface: ``spoiae {phantom,train,unmix,eval,import-csv}``.

Exit codes: 0 success, 2 input or validation error, 3 numerical failure.
``SPOI_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .baselines import nls_unmix, nmf_unmix
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import FormatError, SpoiError
from .formats import (
    RESULT_MAGIC,
    TRUTH_MAGIC,
    atomic_write_text,
    import_csv,
    read_dataset,
    read_mask,
    read_records,
    text_to_tensor,
    write_dataset,
    write_mask,
    write_records,
)
from .model import PixelBatch, TrainConfig, infer, train
from .phantom import PhantomSpec, default_paper_phantom, generate
from .spectra import SpectraMatrix, WavelengthGrid, literature_spectra, read_spectra_csv

log = logging.getLogger("spoiae")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
RESULT_FILE = "result.sprs"


class UsageError(SpoiError):
    """Bad command-line input that is not tied to a specific module."""


# ---------------------------------------------------------------- config


@dataclass
class RunConfig:
    dataset: str
    output_dir: str
    mask: str | None = None
    spectra: str | None = None
    adjust_E: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        def need(obj, key, where):
            if key not in obj:
                raise UsageError(f"config: missing field {where}{key}")
            return obj[key]

        known = {"dataset", "mask", "spectra", "variant", "train", "model", "output_dir"}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"config: unknown field(s) {sorted(unknown)}")
        variant = d.get("variant", {})
        adjust_e = variant.get("adjust_E", True)
        if not isinstance(adjust_e, bool):
            raise UsageError("config: variant.adjust_E must be true or false")
        beta = float(variant.get("beta", 5.0))
        if beta < 0:
            raise UsageError("config: variant.beta must be nonnegative")
        if beta not in (0.0, 5.0):
            warnings.warn(f"variant.beta={beta:g} is outside the reference variants {{0, 5}}")
        t = d.get("train", {})
        allowed = {"alpha", "learning_rate", "batch_size", "epochs", "seed", "eval_fraction",
                   "length_unit_mm", "init_gamma_from_data", "recalibrate_bn", "dtype"}
        bad = set(t) - allowed
        if bad:
            raise UsageError(f"config: unknown train field(s) {sorted(bad)}")
        widths = d.get("model", {}).get("hidden_widths", {})
        if isinstance(widths, list):
            widths = {"mua": widths[:2], "mus": widths}
        try:
            cfg = TrainConfig(
                beta=beta,
                adjust_E=adjust_e,
                mua_widths=tuple(widths.get("mua", TrainConfig.mua_widths)),
                mus_widths=tuple(widths.get("mus", TrainConfig.mus_widths)),
                **t,
            )
        except (TypeError, ValueError) as exc:
            raise UsageError(f"config: {exc}") from None
        return cls(
            dataset=need(d, "dataset", ""),
            output_dir=need(d, "output_dir", ""),
            mask=d.get("mask"),
            spectra=d.get("spectra"),
            adjust_E=adjust_e,
            train=cfg,
        )


def _load_json(path, what):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from None


# ---------------------------------------------------------------- data helpers


def load_batch(path):
    """Read a dataset file and rescale it to a global maximum of 1."""
    if not Path(path).exists():
        raise UsageError(f"dataset {path} does not exist")
    wavelengths, depths, pixels = read_dataset(path)
    pixels = pixels.astype(np.float64)
    peak = pixels.max() if pixels.size else 0.0
    if peak > 0:
        pixels /= peak
    return wavelengths.astype(np.float64), PixelBatch(pixels, depths.astype(np.float64))


def load_spectra(wavelengths, path=None) -> SpectraMatrix:
    if path is None:
        return literature_spectra(WavelengthGrid(wavelengths))
    grid, spectra = read_spectra_csv(path)
    if len(grid) != len(wavelengths) or not np.allclose(grid.wavelengths_nm, wavelengths):
        raise UsageError(f"spectra {path} do not match the dataset wavelengths")
    return spectra


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- commands


def cmd_phantom(args):
    if args.spec == "default":
        spec = default_paper_phantom()
    else:
        raw = _load_json(args.spec, "phantom spec")
        try:
            spec = PhantomSpec.from_dict(raw)
        except KeyError as exc:
            raise UsageError(f"{args.spec}: missing field {exc.args[0]!r}") from None
        except TypeError as exc:
            raise UsageError(f"{args.spec}: {exc}") from None
    spec.validate()
    grid = WavelengthGrid.default()
    data = generate(spec, grid, literature_spectra(grid))
    out = Path(args.out)
    write_dataset(out, grid.wavelengths_nm, data.batch.depths, data.batch.pixels)
    truth = {
        "truth_conc": data.truth_conc,
        "truth_mu_a": data.truth_fields.mu_a,
        "truth_mu_s_prime": data.truth_fields.mu_s_prime,
        "truth_so2": data.truth_so2,
        "vessel_mask": data.vessel_mask.astype(np.float32),
        "grid_shape": np.array(data.grid_shape),
        "pressure_scale": np.array([data.pressure_scale]),
        "spec": text_to_tensor(spec.to_json()),
    }
    write_records(out.with_name(out.name + ".truth"), TRUTH_MAGIC, truth)
    rows, cols = spec.grid_shape
    print(f"wrote {out}: I={rows * cols} L={len(grid)}")
    print("inclusion  center_mm      radius_mm  so2_%  total_hb")
    for k, inc in enumerate(spec.inclusions):
        x, z = inc.center_mm
        print(f"{k:9d}  ({x:5.2f},{z:5.2f})  {inc.radius_mm:9.2f}  {inc.so2_percent:5.1f}"
              f"  {inc.total_hemoglobin:8.4f}")
    return EXIT_OK


def cmd_train(args):
    run = RunConfig.from_dict(_load_json(args.config, "config"))
    wavelengths, batch = load_batch(run.dataset)
    spectra = load_spectra(wavelengths, run.spectra)
    roi = read_mask(run.mask, len(batch)) if run.mask else None
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.jsonl"
    partial = out / ".metrics.jsonl.partial"
    with open(partial, "w") as fh:
        def on_epoch(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            if args.verbose:
                print(json.dumps(record, sort_keys=True))

        result = train(batch, run.train, spectra, on_epoch=on_epoch)
    os.replace(partial, log_path)
    cfg = run.train
    meta = {"learning_rate": cfg.learning_rate, "seed": cfg.seed, "alpha": cfg.alpha,
            "beta": cfg.beta, "epochs": cfg.epochs, "batch_size": cfg.batch_size}
    save_checkpoint(out / "checkpoint.spoi", result.model, result.optimizer, meta)
    test_mask = np.zeros(len(batch), dtype=bool)
    test_mask[result.test_index] = True
    write_mask(out / "test_pixels.mask", test_mask)
    summary = {"train_pixels": int(result.train_index.size),
               "test_pixels": int(result.test_index.size),
               "epochs": cfg.epochs}
    if result.test_index.size:
        test = batch.take(result.test_index)
        recon = infer(result.model, test).pressure_hat
        summary["test_mse"] = metrics.mse(test.pixels, recon)
        summary["test_msad"] = metrics.msad(test.pixels, recon)
    if roi is not None and roi.any():
        so2 = infer(result.model, batch.take(roi)).so2
        summary["roi_mean_so2"] = float(np.nanmean(so2)) if np.isfinite(so2).any() else None
    if result.history:
        summary["final_train"] = {k: result.history[-1][k] for k in ("train_mse", "train_msad")}
    atomic_write_text(out / "train_summary.json", _dump(summary))
    print(_dump(summary), end="")
    return EXIT_OK


def cmd_unmix(args):
    wavelengths, batch = load_batch(args.dataset)
    tensors = {}
    summary = {"method": args.method, "pixels": len(batch)}
    if args.method == "spoi":
        if args.checkpoint is None or not Path(args.checkpoint).exists():
            raise UsageError("--method spoi needs an existing --checkpoint")
        model, _, _ = load_checkpoint(args.checkpoint)
        res = infer(model, batch)
        tensors = {
            "conc": res.conc, "so2": res.so2, "mu_a": res.mu_a, "mu_a_hat": res.mu_a_hat,
            "mu_s_prime": res.mu_s_prime, "pressure_hat": res.pressure_hat,
            "spectra": model.spectra.values, "gamma_phi0": model.gamma_phi0,
        }
    else:
        spectra = load_spectra(wavelengths, args.spectra)
        if args.method == "nls":
            conc = nls_unmix(spectra, batch.pixels)
            values = spectra.values
        else:
            fit = nmf_unmix(spectra, batch.pixels, sweeps=args.sweeps)
            conc, values = fit.conc, fit.spectra
            summary["sweeps_run"] = len(fit.objective_trace) - 1
            summary["objective"] = fit.objective_trace[-1]
        so2 = metrics.so2(conc) if conc.shape[1] == 2 else np.full(len(batch), np.nan)
        tensors = {"conc": conc, "so2": so2, "pressure_hat": conc @ values.T,
                   "spectra": values}
    out = Path(args.out)
    write_records(out / RESULT_FILE, RESULT_MAGIC, tensors)
    summary["mse"] = metrics.mse(batch.pixels, tensors["pressure_hat"])
    summary["msad"] = metrics.msad(batch.pixels, tensors["pressure_hat"])
    atomic_write_text(out / "summary.json", _dump(summary))
    print(_dump(summary), end="")
    return EXIT_OK


def cmd_eval(args):
    wavelengths, batch = load_batch(args.dataset)
    result_dir = Path(args.result)
    path = result_dir / RESULT_FILE if result_dir.is_dir() else result_dir
    if not path.exists():
        raise UsageError(f"no result file at {path}")
    res = read_records(path, RESULT_MAGIC)
    recon = res["pressure_hat"].astype(np.float64)
    if recon.shape != batch.pixels.shape:
        raise UsageError(f"result has shape {recon.shape}, dataset has {batch.pixels.shape}")
    select = np.ones(len(batch), dtype=bool)
    if args.subset:
        select = read_mask(args.subset, len(batch))
    so2_est = so2_truth = vessel = None
    if args.truth:
        truth = read_records(args.truth, TRUTH_MAGIC)
        so2_truth = truth["truth_so2"].astype(np.float64)
        vessel = truth["vessel_mask"] > 0.5
        if so2_truth.shape[0] != len(batch):
            raise UsageError("truth file does not match the dataset pixel count")
    if args.mask:
        vessel = read_mask(args.mask, len(batch))
    if so2_truth is not None:
        so2_est = res["so2"].astype(np.float64)[select]
        so2_truth, vessel = so2_truth[select], vessel[select]
    report = metrics.evaluate(batch.pixels[select], recon[select], so2_est, so2_truth, vessel)
    out = Path(args.out) if args.out else (result_dir if result_dir.is_dir() else path.parent)
    atomic_write_text(out / "report.json", report.to_json())
    atomic_write_text(out / "series.csv", report.series_csv(wavelengths))
    brief = {k: v for k, v in report.to_dict().items()
             if k in ("mse", "msad", "r2_mean", "r2_std", "so2_mae")}
    print(_dump(brief), end="")
    return EXIT_OK


def cmd_import_csv(args):
    try:
        wavelengths, depths, pixels = import_csv(args.csv)
    except (OSError, ValueError) as exc:
        raise UsageError(f"{args.csv}: {exc}") from None
    write_dataset(args.out, wavelengths, depths, pixels)
    print(f"wrote {args.out}: I={depths.size} L={wavelengths.size}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="spoiae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a labelled synthetic dataset")
    p.add_argument("--spec", required=True, help="phantom spec JSON, or 'default'")
    p.add_argument("--out", required=True, help="dataset path; truth goes to <out>.truth")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train an autoencoder from a run config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("unmix", help="unmix a dataset with a baseline or a trained model")
    p.add_argument("--method", choices=("nls", "nmf", "spoi"), required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--spectra", help="spectra CSV (default: literature hemoglobin)")
    p.add_argument("--sweeps", type=int, default=500, help="NMF sweep limit")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_unmix)

    p = sub.add_parser("eval", help="score a result against its dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--result", required=True, help="result directory or file")
    p.add_argument("--truth")
    p.add_argument("--mask", help="vessel mask overriding the truth file's")
    p.add_argument("--subset", help="mask of pixels to score (e.g. test_pixels.mask)")
    p.add_argument("--out", help="report directory (default: the result directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("import-csv", help="convert a CSV of pixel spectra to a dataset")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_csv)
    return parser


def _run(args):
    try:
        return args.func(args)
    except ArithmeticError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SpoiError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("SPOI_THREADS")
    if threads:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=max(1, int(threads))):
            return _run(args)
    return _run(args)


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Compare NLS, NMF and the four autoencoder variants on the synthetic phantom.

Prints one row per method with test-pixel MSE, MSAD, mean R^2 and vessel SO2
MAE, and writes the same rows to ``<out>/table.json``. All methods are scored
on the held-out pixels of the autoencoder split.

    python3 scripts/run_table_analog.py --epochs 200 --out runs/table
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from spoiae import metrics
from spoiae.baselines import nls_unmix, nmf_unmix
from spoiae.checkpoint import save_checkpoint
from spoiae.model import TrainConfig, infer, split_indices, train
from spoiae.phantom import PhantomSpec, default_paper_phantom, generate
from spoiae.spectra import WavelengthGrid, literature_spectra

VARIANTS = [("SPOI-AE adjust_E beta=5", True, 5.0),
            ("SPOI-AE adjust_E beta=0", True, 0.0),
            ("SPOI-AE fixed_E beta=5", False, 5.0),
            ("SPOI-AE fixed_E beta=0", False, 0.0)]


def score(name, test, recon, so2, truth_so2, vessel, seconds):
    rep = metrics.evaluate(test.pixels, recon, so2, truth_so2, vessel)
    return {"method": name, "mse": rep.mse, "msad": rep.msad, "r2_mean": rep.r2_mean,
            "so2_mae": rep.so2_mae, "seconds": round(seconds, 1)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spec", help="phantom spec JSON (default: built-in phantom)")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--batch-size", type=int, default=1024)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--nmf-sweeps", type=int, default=500)
    ap.add_argument("--variants", default="0,1,2,3",
                    help="comma-separated indices into the four autoencoder variants")
    ap.add_argument("--out", default="runs/table")
    args = ap.parse_args()

    spec = (PhantomSpec.from_dict(json.loads(Path(args.spec).read_text()))
            if args.spec else default_paper_phantom())
    grid = WavelengthGrid.default()
    lit = literature_spectra(grid)
    data = generate(spec, grid, lit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg0 = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    _, test_index = split_indices(len(data.batch), cfg0.eval_fraction, cfg0.seed)
    test = data.batch.take(test_index)
    truth_so2 = data.truth_so2[test_index]
    vessel = data.vessel_mask[test_index]
    rows = []

    t = time.perf_counter()
    conc = nls_unmix(lit, test.pixels)
    rows.append(score("Lit. NLS", test, conc @ lit.values.T, metrics.so2(conc),
                      truth_so2, vessel, time.perf_counter() - t))

    t = time.perf_counter()
    fit = nmf_unmix(lit, test.pixels, sweeps=args.nmf_sweeps)
    rows.append(score("NMF", test, fit.conc @ fit.spectra.T, metrics.so2(fit.conc),
                      truth_so2, vessel, time.perf_counter() - t))

    for k in (int(i) for i in args.variants.split(",")):
        name, adjust_e, beta = VARIANTS[k]
        t = time.perf_counter()
        cfg = TrainConfig(adjust_E=adjust_e, beta=beta, epochs=args.epochs,
                          batch_size=args.batch_size, seed=args.seed)
        result = train(data.batch, cfg, lit)
        assert np.array_equal(result.test_index, test_index)
        res = infer(result.model, test)
        rows.append(score(name, test, res.pressure_hat, res.so2, truth_so2, vessel,
                          time.perf_counter() - t))
        tag = f"{'adjE' if adjust_e else 'fixE'}_b{beta:g}"
        save_checkpoint(out / f"{tag}.spoi", result.model, result.optimizer)
        print(f"trained {name} in {rows[-1]['seconds']} s", flush=True)

    print(f"{'method':26s} {'MSE':>9s} {'MSAD':>9s} {'R2 mean':>8s} {'SO2 MAE':>8s}")
    for r in rows:
        print(f"{r['method']:26s} {r['mse']:9.5f} {r['msad']:9.5f} {r['r2_mean']:8.4f} "
              f"{r['so2_mae']:8.2f}")
    (out / "table.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()

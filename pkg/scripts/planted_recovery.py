"""Multi-seed planted-signal recovery table.

For each seed: generate a preset, train a head on the true losses and one on
shuffled losses, then report LA-CPA per LA kind against the ideal-uncertainty
target, the discard-test MF and the clean/noisy shift probability.

    python3 scripts/planted_recovery.py --seeds 5 --epochs 200 --width 256
    python3 scripts/planted_recovery.py --preset planted-seg --seeds 2
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import time

import numpy as np

from repunc.cpa import la_cpa
from repunc.datamodel import LossVector
from repunc.evalsuite import discard_test, noise_shift, score_uncertainties
from repunc.lametrics import dataset_la, kinds_for
from repunc.retrieval import nearest_neighbors
from repunc.synth import PRESETS, generate, noise_split, planted_targets
from repunc.unchead import HeadConfig, train_head


def run_seed(preset: str, seed: int, cfg: HeadConfig) -> list[dict]:
    spec = dataclasses.replace(PRESETS[preset], seed=seed)
    data = generate(spec)
    nb = nearest_neighbors(data.embeddings)
    targets = planted_targets(data)
    shuffled = LossVector(np.random.default_rng(1000 + seed).permutation(data.losses.values))
    cfg = dataclasses.replace(cfg, seed=seed)

    params, _ = train_head(data.embeddings, data.losses, cfg)
    ctrl, _ = train_head(data.embeddings, shuffled, cfg)
    u = score_uncertainties(params, data.embeddings)
    uc = score_uncertainties(ctrl, data.embeddings)
    mf = discard_test(u, data.losses).mf
    clean, noisy = noise_split(spec)
    shift = noise_shift(score_uncertainties(params, clean.embeddings), score_uncertainties(params, noisy.embeddings))

    rows = []
    for kind in kinds_for(data.labels):
        la = dataset_la(data.labels, nb, kind)
        rows.append({
            "seed": seed,
            "kind": kind,
            "la_mean": la.mean,
            "la_cpa": la_cpa(u, la),
            "target": targets[kind],
            "shuffled_la_cpa": la_cpa(uc, la),
            "mf": mf,
            "p_noisy_higher": shift.prob_noisy_higher,
        })
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="planted", choices=sorted(PRESETS))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--width", type=int, default=256)
    ap.add_argument("--csv", help="also write all rows to this CSV file")
    args = ap.parse_args(argv)

    cfg = HeadConfig(unc_width=args.width, epochs=args.epochs, warmup_epochs=min(50, args.epochs))
    rows = []
    for seed in range(args.seeds):
        t0 = time.perf_counter()
        rows += run_seed(args.preset, seed, cfg)
        print(f"seed {seed} done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)

    fmt = lambda v: "undef" if v is None else f"{v:.3f}"  # noqa: E731
    print(f"{'kind':>11} {'la_mean':>8} {'la_cpa':>8} {'target':>8} {'shuffled':>9} {'mf':>6} {'P(shift)':>9}")
    for kind in dict.fromkeys(r["kind"] for r in rows):
        sel = [r for r in rows if r["kind"] == kind]

        def avg(key):
            vals = [r[key] for r in sel if r[key] is not None]
            return float(np.mean(vals)) if vals else None

        print(f"{kind:>11} {fmt(avg('la_mean')):>8} {fmt(avg('la_cpa')):>8} {fmt(avg('target')):>8} "
              f"{fmt(avg('shuffled_la_cpa')):>9} {fmt(avg('mf')):>6} {fmt(avg('p_noisy_higher')):>9}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Ranking hinge versus plain L2 loss regression under a loss rescaling.

Trains both objectives on the planted preset with the losses as generated and
after an affine rescaling ``a * L + b``. The ranking run is unchanged by the
rescaling; the L2 run is not, since it regresses the raw loss values.

    python3 scripts/objective_comparison.py --scale 50 --shift 10
"""

from __future__ import annotations

import argparse
import sys

from repunc.cpa import la_cpa
from repunc.datamodel import LossVector
from repunc.evalsuite import discard_test, score_uncertainties
from repunc.lametrics import dataset_la
from repunc.retrieval import nearest_neighbors
from repunc.synth import SynthSpec, generate
from repunc.unchead import HeadConfig, train_head


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--width", type=int, default=128)
    ap.add_argument("--scale", type=float, default=50.0)
    ap.add_argument("--shift", type=float, default=10.0)
    args = ap.parse_args(argv)

    data = generate(SynthSpec(seed=args.seed))
    la = dataset_la(data.labels, nearest_neighbors(data.embeddings), "pct")
    variants = {"L": data.losses, f"{args.scale:g}L+{args.shift:g}": LossVector(args.scale * data.losses.values + args.shift)}

    print(f"{'objective':>9} {'losses':>12} {'final_loss':>11} {'pct_la_cpa':>11} {'mf':>6}")
    for objective in ("ranking", "l2"):
        cfg = HeadConfig(unc_width=args.width, epochs=args.epochs, warmup_epochs=min(50, args.epochs),
                         seed=args.seed, objective=objective)
        for name, L in variants.items():
            params, log = train_head(data.embeddings, L, cfg)
            u = score_uncertainties(params, data.embeddings)
            print(f"{objective:>9} {name:>12} {log.loss[-1]:>11.4g} {la_cpa(u, la):>11.3f} {discard_test(u, L).mf:>6.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

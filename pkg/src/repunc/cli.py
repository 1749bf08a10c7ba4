"""Command-line entry point: ``repunc <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 internal error. Every output file
gets a ``<output>.manifest.json`` sidecar recording the command, resolved
configuration, input digests, seed, version and wall time. Set
``REPUNC_LOG_LEVEL`` to change log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import datamodel as dm
from . import evalsuite as ev
from . import synth
from .errors import ValidationError, stage
from .selftest import run_all
from .unchead import HeadConfig, load_head, log_to_json, save_head, train_head

log = logging.getLogger("repunc")

HEAD_FLAGS = {
    "unc_width": int,
    "margin": float,
    "epochs": int,
    "warmup_epochs": int,
    "base_lr": float,
    "final_lr": float,
    "weight_decay": float,
    "beta1": float,
    "beta2": float,
    "batch_size": int,
    "seed": int,
    "leaky_slope": float,
    "objective": str,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message, stage="args")


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Collects run metadata and writes a sidecar next to each output."""

    def __init__(self, command: str, seed: int | None = None):
        self.command = command
        self.seed = seed
        self.config: dict = {}
        self.inputs: dict[str, str] = {}
        self.t0 = time.perf_counter()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = _digest(path)

    def write(self, output) -> None:
        doc = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "seed": self.seed,
            "tool_version": __version__,
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
        }
        with open(f"{output}.manifest.json", "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _write_text(path, text: str, manifest: Manifest) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    manifest.write(path)


def resolve_head_config(args) -> HeadConfig:
    """Defaults, overridden by ``--config`` JSON, overridden by explicit flags."""
    values = HeadConfig().to_dict()
    if args.config:
        with stage("config"):
            with open(args.config) as fh:
                try:
                    from_file = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"config {args.config} is not valid JSON: {exc}") from None
            unknown = set(from_file) - set(values)
            if unknown:
                raise ValidationError(f"unknown config keys in {args.config}: {sorted(unknown)}")
            values.update(from_file)
    for key in HEAD_FLAGS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if args.skip_tied_pairs:
        values["skip_tied_pairs"] = True
    with stage("config"):
        return HeadConfig.from_dict(values)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_head(args) -> None:
    cfg = resolve_head_config(args)
    m = Manifest("train-head", cfg.seed)
    with stage("load-embeddings"):
        E = dm.load_embeddings(args.embeddings)
    with stage("load-losses"):
        L = dm.load_losses(args.losses, expected_count=E.count)
    m.add_input(args.embeddings)
    m.add_input(args.losses)
    with stage("train"):
        params, tlog = train_head(E, L, cfg)
    cfg = dataclasses.replace(cfg, input_dim=E.dim)
    m.config = cfg.to_dict()
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    save_head(args.output, params, cfg)
    m.write(args.output)
    log_path = args.log or f"{args.output}.log.json"
    _write_text(log_path, log_to_json(tlog) + "\n", m)
    log.info("trained head: final loss %.6g, pair agreement %.3f", tlog.loss[-1], tlog.pair_agreement[-1])


def cmd_score(args) -> None:
    m = Manifest("score")
    with stage("load-head"):
        params, cfg = load_head(args.head)
    with stage("load-embeddings"):
        E = dm.load_embeddings(args.embeddings)
    m.add_input(args.head)
    m.add_input(args.embeddings)
    m.config = {"leaky_slope": cfg.leaky_slope}
    with stage("score"):
        u = ev.score_uncertainties(params, E, cfg.leaky_slope, source=Path(args.head).name)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    dm.save_uncertainties(args.output, u)
    m.write(args.output)


def cmd_eval(args) -> None:
    with stage("run-spec"):
        spec = ev.RunSpec.load(args.spec)
    m = Manifest("eval", spec.seed)
    m.config = spec.to_dict()
    m.add_input(args.spec)
    for key in ("embeddings", "labels", "losses", "head", "uncertainties", "clean_embeddings", "noisy_embeddings"):
        rel = getattr(spec, key)
        if rel:
            path = spec.resolve(rel)
            if not path.exists():
                raise ValidationError(f"file not found: {path}", stage=f"load-{key.replace('_', '-')}")
            m.add_input(path)
    report = ev.evaluate(spec, threads=args.threads)
    out = Path(args.output)
    _write_text(out, report.to_json(), m)
    _write_text(out.with_suffix(".csv"), report.to_csv(), m)
    if report.discard is not None:
        _write_text(out.with_name(out.stem + "_discard.csv"), report.discard.to_csv(), m)
    print(report.to_csv(), end="")


def cmd_discard(args) -> None:
    m = Manifest("discard")
    with stage("load-uncertainties"):
        u = dm.load_uncertainties(args.uncertainties)
    with stage("load-losses"):
        L = dm.load_losses(args.losses, expected_count=u.count)
    m.add_input(args.uncertainties)
    m.add_input(args.losses)
    m.config = {"fractions": args.fractions}
    with stage("discard"):
        curve = ev.discard_test(u, L, args.fractions)
    _write_text(args.output, curve.to_csv(), m)
    print(json.dumps({"mf": curve.mf, "n_fractions": args.fractions}))


def cmd_localize(args) -> None:
    m = Manifest("localize")
    with stage("load-head"):
        params, cfg = load_head(args.head)
    with stage("load-tokens"):
        grids = dm.load_token_grids(args.tokens)
    m.add_input(args.head)
    m.add_input(args.tokens)
    with stage("localize"):
        maps = [ev.localized_uncertainty(params, g, cfg.leaky_slope) for g in grids]
    _write_text(args.output, ev.maps_to_csv(maps), m)


def cmd_noise_shift(args) -> None:
    m = Manifest("noise-shift")
    with stage("load-uncertainties"):
        uc = dm.load_uncertainties(args.clean)
        un = dm.load_uncertainties(args.noisy)
    m.add_input(args.clean)
    m.add_input(args.noisy)
    summary = ev.noise_shift(uc, un)
    _write_text(args.output, json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", m)
    if args.hist:
        _write_text(args.hist, ev.histograms_csv(uc, un, args.bins), m)
    print(json.dumps(summary.to_dict(), sort_keys=True))


def _synth_tokens(data: synth.SynthData, rows: int = 4, cols: int = 4, count: int = 8) -> list[dm.TokenGrid]:
    # each grid tiles embeddings of one cluster, mixing clean and noisy tokens
    X = data.embeddings.data
    grids = []
    for k in range(count):
        members = np.flatnonzero(data.truth.cluster == k % data.truth.centroids.shape[0])
        pick = members[np.arange(rows * cols) % members.size]
        grids.append(dm.TokenGrid(X[pick], rows, cols, 16))
    return grids


def cmd_synth(args) -> None:
    if args.preset not in synth.PRESETS:
        raise ValidationError(f"unknown preset {args.preset!r}; choose from {sorted(synth.PRESETS)}", stage="synth")
    overrides = {"seed": args.seed}
    if args.n is not None:
        overrides["n"] = args.n
    with stage("synth"):
        spec = dataclasses.replace(synth.PRESETS[args.preset], **overrides)
        data = synth.generate(spec)
        clean, noisy = synth.noise_split(spec)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    m = Manifest("synth", spec.seed)
    m.config = dataclasses.asdict(spec)
    files = {
        "embeddings.bin": lambda p: dm.save_embeddings(p, data.embeddings),
        "labels.bin": lambda p: dm.save_labels(p, data.labels),
        "losses.bin": lambda p: dm.save_losses(p, data.losses),
        "clean_embeddings.bin": lambda p: dm.save_embeddings(p, clean.embeddings),
        "noisy_embeddings.bin": lambda p: dm.save_embeddings(p, noisy.embeddings),
        "tokens.bin": lambda p: dm.save_token_grids(p, _synth_tokens(data)),
    }
    for name, save in files.items():
        save(out / name)
        m.write(out / name)
    truth = data.truth.to_dict()
    truth["la_cpa_target"] = synth.planted_targets(data)
    _write_text(out / "truth.json", json.dumps(truth, sort_keys=True) + "\n", m)
    run = {
        "embeddings": "embeddings.bin",
        "labels": "labels.bin",
        "label_kind": spec.kind,
        "losses": "losses.bin",
        "head": "head.bin",
        "clean_embeddings": "clean_embeddings.bin",
        "noisy_embeddings": "noisy_embeddings.bin",
        "seed": spec.seed,
    }
    _write_text(out / "run.json", json.dumps(run, indent=2, sort_keys=True) + "\n", m)


def cmd_selftest(args) -> int:
    results = run_all(seed=args.seed, quick=not args.full)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.cases} cases, {r.detail})")
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="repunc", description="Representation-uncertainty heads and LA@1 evaluation.")
    p.add_argument("--threads", type=int, default=1, help="worker threads for retrieval (speed only)")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train-head", help="fit an uncertainty head on cached embeddings and losses")
    t.add_argument("--embeddings", required=True)
    t.add_argument("--losses", required=True)
    t.add_argument("-o", "--output", required=True, help="head file to write")
    t.add_argument("--log", help="training log JSON (default: <output>.log.json)")
    t.add_argument("--config", help="JSON file of head config fields")
    for key, typ in HEAD_FLAGS.items():
        t.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)
    t.add_argument("--skip-tied-pairs", action="store_true")
    t.set_defaults(func=cmd_train_head)

    s = sub.add_parser("score", help="uncertainties of embeddings under a trained head")
    s.add_argument("--head", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="full evaluation from a JSON run spec")
    e.add_argument("spec")
    e.add_argument("-o", "--output", default="report.json")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("discard", help="discard-test curve and monotonicity fraction")
    d.add_argument("--uncertainties", required=True)
    d.add_argument("--losses", required=True)
    d.add_argument("--fractions", type=int, default=ev.DEFAULT_FRACTIONS)
    d.add_argument("-o", "--output", default="discard.csv")
    d.set_defaults(func=cmd_discard)

    lo = sub.add_parser("localize", help="per-token uncertainty maps")
    lo.add_argument("--head", required=True)
    lo.add_argument("--tokens", required=True)
    lo.add_argument("-o", "--output", default="map.csv")
    lo.set_defaults(func=cmd_localize)

    n = sub.add_parser("noise-shift", help="compare clean and noisy uncertainty distributions")
    n.add_argument("--clean", required=True)
    n.add_argument("--noisy", required=True)
    n.add_argument("-o", "--output", default="shift.json")
    n.add_argument("--hist", help="also write shared-bin histograms as CSV")
    n.add_argument("--bins", type=int, default=50)
    n.set_defaults(func=cmd_noise_shift)

    y = sub.add_parser("synth", help="write a planted-signal dataset")
    y.add_argument("--preset", default="planted")
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--n", type=int)
    y.add_argument("-o", "--output", required=True, help="output directory")
    y.set_defaults(func=cmd_synth)

    st = sub.add_parser("selftest", help="run the oracle-equivalence suites")
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--full", action="store_true")
    st.set_defaults(func=cmd_selftest)
    return p


def run(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("REPUNC_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
        rc = args.func(args)
        return int(rc or 0)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())

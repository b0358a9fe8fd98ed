"""Command-line entry point: ``d2monitor <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error. Every command that
writes an artifact also writes ``<artifact>.manifest.json`` (or
``manifest-<command>.json`` inside a bundle directory).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .cascade import (
    load_bundle,
    retune_tau_lambda,
    save_bundle,
    select_lambda,
    lambda_sweep,
    train_cascade,
)
from .errors import D2Error
from .hesitation import (
    crossing_probability,
    default_crossing_edges,
    oof_margins,
    OofMargins,
    persistence_curve,
    select_tau,
)
from .metrics import evaluate
from .probes import Arch, ProbeSpec, Readout, baseline_table, expert_flops, load_probe, save_probe
from .probes.model import Probe
from .synth import SynthConfig, generate
from .train import DEFAULT_GRIDS, TrainConfig, grid_search, train_probe
from .trajectory import read_dataset, write_dataset

log = logging.getLogger("d2monitor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


# ---------------------------------------------------------------- manifest

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _artifact_hashes(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.iterdir()):
                if f.is_file() and not f.name.startswith("manifest"):
                    out[str(f)] = _sha256(f)
        elif p.is_file():
            out[str(p)] = _sha256(p)
    return out


def write_manifest(args, outputs: list, timings: dict[str, float], inputs: list) -> Path:
    first = Path(outputs[0])
    if first.is_dir():
        dest = first / f"manifest-{args.command}.json"
    else:
        dest = first.with_name(first.name + ".manifest.json")
    config = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": args.command,
        "version": __version__,
        "config": config,
        "seeds": {k: v for k, v in config.items() if "seed" in k},
        "inputs": [str(p) for p in inputs if p],
        "outputs": [str(p) for p in outputs],
        "artifacts": _artifact_hashes(outputs),
        "timings_s": {k: max(0.0, v) for k, v in timings.items()},
    }
    dest.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return dest


class _Timer:
    def __init__(self):
        self.t = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                timer.t[name] = timer.t.get(name, 0.0) + time.perf_counter() - self.start

        return _Ctx()


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    tm = _Timer()
    cfg = SynthConfig(args.samples, args.steps, args.dim, args.hard_fraction, args.seed, args.start)
    with tm("generate"):
        ds = generate(cfg, threads=args.threads)
    with tm("write"):
        write_dataset(ds, args.out)
    write_manifest(args, [args.out], tm.t, [])
    print(f"wrote {len(ds)} trajectories (S={ds.steps}, D={ds.dim}) to {args.out}")
    return 0


def _probe_spec(args, dim: int) -> ProbeSpec:
    arch = Arch(args.probe)
    readout = args.readout or ("seq" if arch in (Arch.TIMEATTN, Arch.LSTM) else "mean")
    return ProbeSpec(arch, dim, args.hidden, args.attn_dim, args.proj_dim, args.lstm_hidden,
                     args.dropout, Readout(readout))


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, weight_decay=args.weight_decay, dropout=args.dropout,
                       epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)


def cmd_train(args) -> int:
    tm = _Timer()
    with tm("read"):
        ds = read_dataset(args.data)
    spec = _probe_spec(args, ds.dim)
    with tm("train"):
        if args.grid:
            out = grid_search(ds, spec, DEFAULT_GRIDS[spec.arch], 0.8, args.seed, _train_config(args), args.threads)
            probe = out.probe
            best = out.best
            print(f"grid winner: lr={best.lr:g} weight_decay={best.weight_decay:g} dropout={best.dropout:g}")
        else:
            probe, history = train_probe(ds, spec, _train_config(args))
            print(f"final epoch loss {history[-1]:.6f}")
    save_probe(probe, args.out)
    write_manifest(args, [args.out], tm.t, [args.data])
    return 0


def cmd_oof(args) -> int:
    tm = _Timer()
    ds = read_dataset(args.data)
    with tm("oof"):
        oof = oof_margins(ds, args.k, args.seed, threads=args.threads)
    oof.to_csv(args.out)
    tau = select_tau(oof, args.target_ratio)
    print(f"tau at hesitant ratio {args.target_ratio:g}: {tau!r}")
    write_manifest(args, [args.out], tm.t, [args.data])
    return 0


def cmd_cascade_train(args) -> int:
    tm = _Timer()
    ds = read_dataset(args.data)
    grid = DEFAULT_GRIDS[Arch(args.expert)] if args.grid else None
    cfg = None
    if args.lr is not None:
        cfg = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, dropout=args.dropout,
                          epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    with tm("train"):
        res = train_cascade(ds, args.expert, args.k, args.target_ratio, cfg, grid, args.seed, args.threads)
    save_bundle(res.bundle, args.out)
    write_manifest(args, [args.out], tm.t, [args.data])
    print(f"tau={res.bundle.tau!r} hesitant={res.hesitant.size}/{len(ds)}; run select-lambda next")
    return 0


def cmd_select_lambda(args) -> int:
    tm = _Timer()
    bundle = load_bundle(args.bundle)
    val = read_dataset(args.data)
    with tm("select"):
        if args.retune_tau:
            bundle.tau, bundle.lam, f1 = retune_tau_lambda(bundle, val)
            print(f"re-tuned tau={bundle.tau!r}")
        else:
            bundle.lam = select_lambda(bundle, val)
            f1 = float(lambda_sweep(bundle, val)[bundle.lam])
    save_bundle(bundle, args.bundle)
    write_manifest(args, [args.bundle], tm.t, [args.data])
    print(f"lambda={bundle.lam} validation macro-F1={f1:.4f}")
    return 0


def _load_model(path):
    p = Path(path)
    return load_bundle(p) if p.is_dir() else load_probe(p)


def cmd_eval(args) -> int:
    tm = _Timer()
    model = _load_model(args.model)
    ds = read_dataset(args.data)
    with tm("eval"):
        report = evaluate(model, ds)
    Path(args.out).write_text(report.to_json())
    outputs = [args.out]
    if args.routes:
        if report.routes is None:
            raise UsageError("--routes needs a cascade bundle")
        report.routes.to_csv(args.routes)
        outputs.append(args.routes)
    write_manifest(args, outputs, tm.t, [args.model, args.data])
    print(report.to_json(), end="")
    return 0


def cmd_analyze(args) -> int:
    tm = _Timer()
    if args.oof:
        margins = OofMargins.from_csv(args.oof).margins
    else:
        if not (args.data and args.probe):
            raise UsageError("analyze needs --oof, or --data with --probe")
        probe = _load_model(args.probe)
        probe = probe.base if not isinstance(probe, Probe) else probe
        margins = probe.step_logits(read_dataset(args.data).states)
    tau = args.tau if args.tau is not None else select_tau(margins, args.target_ratio)
    with tm("analyze"):
        cross = crossing_probability(margins, default_crossing_edges(margins, args.bins))
        pers = persistence_curve(margins, tau, args.max_lag)
    out = Path(args.out_prefix)
    cross.to_csv(f"{out}_crossing.csv")
    pers.to_csv(f"{out}_persistence.csv")
    write_manifest(args, [f"{out}_crossing.csv", f"{out}_persistence.csv"], tm.t, [args.oof, args.data, args.probe])
    print(f"tau={tau!r}; wrote {out}_crossing.csv and {out}_persistence.csv")
    return 0


def cmd_flops(args) -> int:
    rows = baseline_table(args.steps, args.dim, dominant_only=not args.exact)
    if args.p_esc is not None:
        spec = ProbeSpec(Arch(args.expert), args.dim, readout=Readout.WINDOW)
        mf = (2 * args.steps * args.dim + args.p_esc * expert_flops(spec, args.s_win)) / 1e6
        rows.append({"method": f"cascade ({args.expert})", "params": None, "mflops": mf})
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        print(f"{'method':<22}{'params':>12}{'MFLOPs':>12}")
        for r in rows:
            params = "" if r["params"] is None else f"{r['params'] / 1e6:.3f}M"
            print(f"{r['method']:<22}{params:>12}{r['mflops']:>12.3f}")
    return 0


def _time_ms(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best * 1e3


def cmd_bench(args) -> int:
    """Post-generation inference time over the whole dataset.

    Last-step and MV probes are timed on the final step only (earlier steps
    are assumed to be scored online during generation); Mean probes include
    pooling; sequence probes see the full trajectory; a cascade pays for
    the last-step base margin plus the expert on routed windows.
    """
    ds = read_dataset(args.data)
    states = ds.states
    rows = []
    for path in args.probe or []:
        probe = load_probe(path)
        r = probe.spec.readout
        if r in (Readout.LAST, Readout.MV):
            fn = lambda p=probe: p.step_logits(states[:, -1:])
        else:
            fn = lambda p=probe: p.predict_states(states)
        rows.append({"model": str(path), "readout": r.value, "ms": _time_ms(fn, args.repeats)})
    for path in args.bundle or []:
        bundle = load_bundle(path)
        from .cascade import classify_states

        rt = classify_states(bundle, states)
        wins = [states[i, rt.window_lo[i]:rt.window_hi[i] + 1] for i in np.flatnonzero(rt.routed)]

        def run(b=bundle, w=wins):
            b.base.step_logits(states[:, -1:])
            if w:
                b.expert.window_logits(w)

        rows.append({"model": str(path), "readout": "cascade", "ms": _time_ms(run, args.repeats)})
    if not rows:
        raise UsageError("bench needs at least one --probe or --bundle")
    text = json.dumps({"n_samples": len(ds), "results": rows}, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        write_manifest(args, [args.out], {}, [args.data])
    print(text, end="")
    return 0


# ---------------------------------------------------------------- parser

def _add_probe_dims(p):
    p.add_argument("--hidden", type=int, default=256, help="MLP hidden width K (default 256)")
    p.add_argument("--attn-dim", type=int, default=128, help="attention dim d_a (default 128)")
    p.add_argument("--proj-dim", type=int, default=512, help="LSTM projection dim d_p (default 512)")
    p.add_argument("--lstm-hidden", type=int, default=128, help="LSTM hidden size d_h (default 128)")


def _add_train_flags(p, lr_default: Optional[float] = 1e-3):
    p.add_argument("--lr", type=float, default=lr_default)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    env_threads = int(os.environ.get("D2M_THREADS", "1") or 1)
    parser = _Parser(prog="d2monitor", description="Hesitation-aware cascade probes for denoising trajectories.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=env_threads,
                        help="sample/fold-level parallelism (env D2M_THREADS); results do not depend on it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--hard-fraction", type=float, default=0.4)
    p.add_argument("--start", type=int, default=0, help="index of the first sample (shares the basis)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a single probe")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="probe.d2p")
    p.add_argument("--probe", required=True, choices=[a.value for a in Arch])
    p.add_argument("--readout", choices=["last", "mean", "mv", "seq"])
    p.add_argument("--grid", action="store_true", help="grid-search lr/weight decay/dropout first")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    _add_probe_dims(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("oof", help="out-of-fold base-probe margins as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="oof.csv")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--target-ratio", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oof)

    p = sub.add_parser("cascade-train", help="train base + expert and write a bundle directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="bundle")
    p.add_argument("--expert", choices=["mlp", "timeattn"], default="mlp")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--target-ratio", type=float, default=0.5)
    p.add_argument("--grid", action="store_true", help="grid-search the expert on hesitant samples")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p, lr_default=None)
    p.set_defaults(func=cmd_cascade_train)

    p = sub.add_parser("select-lambda", help="pick the routing threshold on a validation set")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--retune-tau", action="store_true", help="also re-pick tau (cross-dataset transfer)")
    p.set_defaults(func=cmd_select_lambda)

    p = sub.add_parser("eval", help="score a probe file or bundle directory")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="report.json")
    p.add_argument("--routes", help="RouteRecords CSV (cascades only)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="crossing-probability and persistence CSVs")
    p.add_argument("--oof", help="margins CSV from the oof command")
    p.add_argument("--data")
    p.add_argument("--probe", help="base probe file or bundle directory")
    p.add_argument("--tau", type=float)
    p.add_argument("--target-ratio", type=float, default=0.5)
    p.add_argument("--max-lag", type=int, default=8)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out-prefix", default="dynamics")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("flops", help="analytic parameter/FLOPs table")
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--dim", type=int, default=4096)
    p.add_argument("--exact", action="store_true", help="keep the 2SD attention term")
    p.add_argument("--expert", choices=["mlp", "timeattn"], default="mlp")
    p.add_argument("--p-esc", type=float)
    p.add_argument("--s-win", type=float, default=1.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("bench", help="post-generation inference timing")
    p.add_argument("--data", required=True)
    p.add_argument("--probe", action="append")
    p.add_argument("--bundle", action="append")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (D2Error, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``scheddev <command> ...``.

Exit status is 0 on success, 2 for usage and configuration errors and 1 for
runtime failures. Errors go to standard error as one JSON object per line.
The default worker count comes from ``SCHEDDEV_THREADS`` (else 1) and
``--threads`` overrides it.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, load_config
from .datasets import MazeSpec, ToySpec, sample_maze_trajectory, sample_toy
from .experiments import (
    build_family,
    family_sd,
    point_seed,
    run_correlation_sweep,
    run_fig6_analogue,
    schedule_of,
    sd_config_for,
)
from .flows import EmpiricalIMCF, SampleSet
from .samplers import SamplerConfig, reverse_sample
from .sd_metric import total_schedule_deviation
from .tables import git_blob_hash, read_points, read_table, write_table
from .tinyflow import Architecture, TinyFlowNet, TrainConfig, save_model, train
from .transport import emd_exact, wasserstein1_1d

log = logging.getLogger("scheddev")

THREADS_ENV = "SCHEDDEV_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting, and suggests close matches for bad choices.

    Prefix matching of long options is off so a misspelt flag is an error.
    """

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        hint = ""
        if "invalid choice" in message:
            bad = message.split("invalid choice: ")[1].split(" ")[0].strip("'\"")
            choices = [c for a in self._actions if a.choices for c in a.choices]
            close = difflib.get_close_matches(bad, choices, n=2)
            if close:
                hint = f" (did you mean {' or '.join(close)}?)"
        elif "unrecognized arguments" in message:
            # extra arguments surface at the top level, so search the subcommands too
            parsers = [self] + [sp for a in self._actions if isinstance(a, argparse._SubParsersAction)
                                for sp in a.choices.values()]
            known = sorted({o for ps in parsers for a in ps._actions for o in a.option_strings})
            for tok in message.split(":", 1)[1].split():
                close = difflib.get_close_matches(tok, known, n=1)
                if close:
                    hint = f" (did you mean {close[0]}?)"
                    break
        raise UsageError(f"{self.prog}: {message}{hint}")


def _default_threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _positive_int(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scheddev", description="Schedule deviation toolkit.")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help=f"worker count (default: ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", default=None, help="TOML configuration file")
        sp.add_argument("--seed", type=int, required=True, help="random seed (mandatory)")
        sp.add_argument("--out", required=True, help=out_help)

    g = sub.add_parser("gen-dataset", help="draw a toy or maze dataset")
    common(g, "output CSV")
    g.add_argument("--kind", choices=["toy-discrete", "toy-continuous", "maze"], default="toy-discrete")
    g.add_argument("--count", type=_positive_int, default=None, help="rows (toy) or trajectories (maze)")

    t = sub.add_parser("train", help="train the small flow network")
    common(t, "output model file")
    t.add_argument("--dataset", required=True, help="CSV with columns z, x")

    s = sub.add_parser("sample", help="draw samples from a conditional flow")
    common(s, "output CSV")
    s.add_argument("--z", type=float, required=True)
    s.add_argument("--family", choices=["linear", "kernel", "imcf", "nn"], default=None)
    s.add_argument("--model", default=None, help="model file for --family nn")
    s.add_argument("--algo", "--algorithm", dest="algorithm", type=str.upper,
                   choices=["DDPM", "DDIM", "GE"], default=None)
    s.add_argument("--steps", type=_positive_int, default=None)
    s.add_argument("--count", type=_positive_int, default=None)

    d = sub.add_parser("sd", help="schedule deviation of a conditional flow")
    common(d, "output CSV")
    zsel = d.add_mutually_exclusive_group(required=True)
    zsel.add_argument("--z", type=float)
    zsel.add_argument("--z-grid", help="CSV with a column z")
    d.add_argument("--family", choices=["linear", "kernel", "imcf", "nn"], default=None)
    d.add_argument("--model", default=None)
    d.add_argument("--samples", default=None,
                   help="sample CSV defining the ideal path (default: draw with the oracle sampler)")
    d.add_argument("--s-points", type=_positive_int, default=None)
    d.add_argument("--n", type=_positive_int, default=None, help="outer Monte-Carlo points")
    d.add_argument("--N", type=_positive_int, default=None, help="samples in the empirical oracle")
    d.add_argument("--div", choices=["analytic", "random", "fd"], default=None)

    o = sub.add_parser("ot", help="empirical 1-Wasserstein distance between two sample files")
    o.add_argument("--a", required=True)
    o.add_argument("--b", required=True)
    o.add_argument("--out", required=True, help="output JSON")
    o.add_argument("--method", choices=["auto", "exact", "sorted"], default="auto")

    e = sub.add_parser("experiment", help="scripted experiments")
    e.add_argument("name", choices=["fig6", "correlate"])
    common(e, "output directory")
    e.add_argument("--model", default=None)
    return p


def _meta(cfg: RunConfig, seed, **extra):
    return {"config": cfg.echo(), "seed": seed, **extra}


def cmd_gen_dataset(args, cfg, threads):
    rng = np.random.default_rng(args.seed)
    if args.kind.startswith("toy"):
        ds = cfg.dataset
        support = "Continuous" if args.kind == "toy-continuous" else "Discrete"
        spec = ToySpec(support, [tuple(a) for a in ds.anchors], ds.noise_sigma, ds.count)
        data = sample_toy(spec, rng, args.count)
        write_table(args.out, _meta(cfg, args.seed, kind=args.kind), ["z", "x"], data.tolist())
    else:
        spec = MazeSpec(seed=args.seed)
        n = args.count or 1000
        rows = []
        for i in range(n):
            z, x = sample_maze_trajectory(spec, rng)
            rows.extend([i, z[0], z[1], t, px, py] for t, (px, py) in enumerate(x))
        write_table(args.out, _meta(cfg, args.seed, kind="maze"), ["traj", "z0", "z1", "t", "x0", "x1"], rows)


def cmd_train(args, cfg, threads):
    data = read_points(args.dataset, ["z", "x"])
    tr = cfg.train
    arch = Architecture(tr.width, tr.n_layers, tr.n_freq)
    net = TinyFlowNet.initialize(arch, schedule_of(cfg), np.random.default_rng(args.seed))
    tc = TrainConfig(iterations=tr.iterations, batch=tr.batch, lr=tr.lr, weight_decay=tr.weight_decay,
                     train_steps=tr.train_steps, dataset_size=data.shape[0], seed=args.seed)
    net, curve = train(net, data, tc)
    meta = _meta(cfg, args.seed, dataset=git_blob_hash(Path(args.dataset).read_bytes()), loss_log=curve)
    save_model(net, args.out, meta)


def cmd_sample(args, cfg, threads):
    fam = build_family(cfg, args.family, args.model)
    sc = SamplerConfig(args.algorithm or cfg.sampler.algorithm, args.steps or cfg.sampler.steps,
                       cfg.sampler.ge_mu, rng_seed=args.seed, discretization=cfg.sampler.discretization)
    n = args.count or cfg.sampler.count
    out = reverse_sample(fam.flow, args.z, sc, fam.flow.schedule, n)
    meta = _meta(cfg, args.seed, family=fam.kind, z=args.z, algorithm=sc.algorithm, steps=sc.steps)
    write_table(args.out, meta, [f"x_{i + 1}" for i in range(out.dim)], out.points.tolist())


def cmd_sd(args, cfg, threads):
    for key, attr in (("s_points", "s_points"), ("n", "n_outer"), ("N", "n_imcf"), ("div", "divergence")):
        if getattr(args, key) is not None:
            setattr(cfg.sd, attr, getattr(args, key))
    fam = build_family(cfg, args.family, args.model)
    zs = [args.z] if args.z is not None else read_points(args.z_grid, ["z"])[:, 0].tolist()
    oracle = None
    if args.samples:
        oracle = EmpiricalIMCF(SampleSet(read_points(args.samples)), fam.flow.schedule)
    rows, totals = [], {}
    for i, z in enumerate(zs):
        seed = args.seed if len(zs) == 1 else point_seed(args.seed, i)
        if oracle is not None:
            report = total_schedule_deviation(fam.flow, oracle, z, sd_config_for(cfg, fam.learned),
                                              fam.flow.schedule, seed)
        else:
            report = family_sd(fam, z, cfg, seed)
        rows.extend(report.rows())
        totals[repr(z)] = [report.total_sd, report.total_stderr, report.unreliable]
    meta = _meta(cfg, args.seed, family=fam.kind, totals=totals)
    write_table(args.out, meta, ["z", "s", "sd", "stderr", "total_sd", "divergence"], rows)


def cmd_ot(args, cfg, threads):
    a, b = read_points(args.a), read_points(args.b)
    method = args.method
    if method == "auto":
        method = "sorted" if a.shape[1] == 1 else "exact"
    dist = wasserstein1_1d(a, b) if method == "sorted" else emd_exact(a, b)
    result = {
        "w1": dist,
        "method": method,
        "n": int(a.shape[0]),
        "a": {"path": args.a, "hash": git_blob_hash(Path(args.a).read_bytes()), "meta": read_table(args.a)[0]},
        "b": {"path": args.b, "hash": git_blob_hash(Path(args.b).read_bytes()), "meta": read_table(args.b)[0]},
    }
    Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")


def cmd_experiment(args, cfg, threads):
    if args.name == "fig6":
        run_fig6_analogue(cfg, args.seed, args.out, model_path=args.model, threads=threads)
    else:
        run_correlation_sweep(cfg, args.seed, args.out, model_path=args.model, threads=threads)


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "sample": cmd_sample,
    "sd": cmd_sd,
    "ot": cmd_ot,
    "experiment": cmd_experiment,
}


def _report(kind, message, code, **extra):
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = args.threads or _default_threads()
    except UsageError as exc:
        return _report("usage", str(exc), 2)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None))
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](args, cfg, threads)
    except ConfigError as exc:
        return _report("config", str(exc), 2, key=exc.key)
    except Exception as exc:  # runtime failures map to exit status 1
        log.debug("failure", exc_info=True)
        return _report(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Scripted experiments over a grid of conditions.

``run_fig6_analogue`` compares guided flows across the grid and
``run_correlation_sweep`` sets total deviation against sampler disagreement.
The zero-deviation sanity suite and the variance-mismatch testbed live here too.

Each run is determined by a ``RunConfig`` plus an integer seed and writes
CSV tables (commented metadata header, then a column row) and a
``manifest.json`` with content hashes of inputs and outputs.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import quad
from scipy.stats import spearmanr

from .config import RunConfig
from .flows import AnalyticIMCF, CallableFlow, GaussianMixtureModel, MixtureFlow, imcf_flow, mixture_divergence
from .interpolants import GuidanceKernel, KernelGuidedFlow, SplineGuidedFlow, variance_blend_score
from .samplers import SamplerConfig, reverse_sample
from .schedules import LogLinearVE, schedule_from_config, time_grid
from .sd_metric import SDConfig, sampler_oracle, sd_integrand, total_schedule_deviation
from .tables import git_blob_hash, write_table
from .transport import emd_exact

__all__ = [
    "MissingArtifactError",
    "schedule_of",
    "anchor_mixtures",
    "build_family",
    "point_seed",
    "z_grid",
    "family_sd",
    "velocity_form_flow",
    "zero_sd_suite",
    "VarianceMismatch",
    "variance_mismatch_testbed",
    "run_fig6_analogue",
    "run_correlation_sweep",
    "write_table",
    "git_blob_hash",
]


class MissingArtifactError(FileNotFoundError):
    pass


def schedule_of(cfg: RunConfig) -> LogLinearVE:
    return schedule_from_config(vars(cfg.schedule))


def point_seed(seed: int, index: int) -> int:
    """Independent per-point seed, stable under any execution order."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def z_grid(cfg: RunConfig) -> np.ndarray:
    g = cfg.grid
    return np.linspace(g.z_min, g.z_max, g.z_points)


def anchor_mixtures(cfg: RunConfig) -> dict:
    """Group the dataset anchors by condition: ``{z: GaussianMixtureModel}``."""
    groups = {}
    for z, x in cfg.dataset.anchors:
        groups.setdefault(float(z), []).append(float(x))
    var = cfg.dataset.noise_sigma**2
    if var <= 0:
        raise ValueError("dataset.noise_sigma must be positive for the closed-form flows")
    return {z: GaussianMixtureModel(np.full(len(xs), 1.0 / len(xs)), np.array(xs)[:, None], np.full(len(xs), var))
            for z, xs in sorted(groups.items())}


def _two_anchors(mixtures):
    if len(mixtures) != 2:
        raise ValueError(f"this family needs exactly two anchor conditions, found {len(mixtures)}")
    (z0, g0), (z1, g1) = mixtures.items()
    if (z0, z1) != (0.0, 1.0):
        raise ValueError("this family needs anchors at z = 0 and z = 1")
    return g0, g1


def _blend(g0: GaussianMixtureModel, g1: GaussianMixtureModel, z: float) -> GaussianMixtureModel:
    """The mixture ``(1 - z) p0 + z p1`` (clipped to ``[0, 1]``)."""
    t = min(max(float(z), 0.0), 1.0)
    w = np.concatenate([(1.0 - t) * g0.weights, t * g1.weights])
    keep = w > 0
    return GaussianMixtureModel(w[keep] / w[keep].sum(),
                                np.concatenate([g0.means, g1.means])[keep],
                                np.concatenate([g0.variances, g1.variances])[keep])


@dataclass
class Family:
    """A conditional flow plus, when known, the exact ``p0`` at each ``z``."""

    kind: str
    flow: object
    exact_p0: object = None
    learned: bool = False


def build_family(cfg: RunConfig, kind: str | None = None, model_path=None) -> Family:
    from .tinyflow import NetFlow, load_model

    kind = kind or cfg.family.kind
    sched = schedule_of(cfg)
    mixtures = anchor_mixtures(cfg)
    if kind == "linear":
        knots = list(mixtures)
        if len(knots) < 2:
            raise ValueError("the spline guide needs at least two anchor conditions")
        flows = [MixtureFlow(g, sched) for g in mixtures.values()]
        return Family(kind, SplineGuidedFlow(knots, flows, sched))
    if kind == "kernel":
        g0, g1 = _two_anchors(mixtures)
        kern = GuidanceKernel(cfg.kernel.c1, cfg.kernel.c2)
        return Family(kind, KernelGuidedFlow(MixtureFlow(g0, sched), MixtureFlow(g1, sched), kern, sched))
    if kind == "imcf":
        g0, g1 = _two_anchors(mixtures)
        p0 = lambda z: _blend(g0, g1, z)  # noqa: E731
        return Family(kind, MixtureFlow(p0, sched), exact_p0=p0)
    if kind == "nn":
        path = Path(model_path or cfg.family.model or "")
        if not str(model_path or cfg.family.model) or not path.is_file():
            raise MissingArtifactError(
                f"model file {str(path)!r} not found; create it with "
                "`scheddev train --dataset DATA.csv --out MODEL.bin --seed N` "
                "and set family.model (or pass --model)")
        return Family(kind, NetFlow(load_model(path)), learned=True)
    raise ValueError(f"family.kind: unknown family {kind!r}")


def sd_config_for(cfg: RunConfig, learned: bool) -> SDConfig:
    strategy = "fd" if learned else cfg.sd.divergence
    return SDConfig(cfg.sd.n_outer, cfg.sd.n_imcf, strategy, cfg.sd.fd_step,
                    time_grid(cfg.sd.s_points), cfg.sd.report_c2_one)


def family_sd(family: Family, z: float, cfg: RunConfig, seed: int):
    """Deviation report at ``z``; exact ``p0`` when known, else the flow's own samples."""
    sched = family.flow.schedule
    sdc = sd_config_for(cfg, family.learned)
    if family.exact_p0 is not None:
        return total_schedule_deviation(family.flow, AnalyticIMCF(family.exact_p0(z), sched), z, sdc, sched, seed)
    sc = SamplerConfig(cfg.sd.oracle_sampler, cfg.sd.oracle_steps, rng_seed=seed,
                       discretization=cfg.sampler.discretization)
    oracle, probe = sampler_oracle(family.flow, z, sc, sched, sdc.n_imcf, sdc.n_outer)
    return total_schedule_deviation(family.flow, oracle, z, sdc, sched, seed, probe)


def _samples(family: Family, z, cfg: RunConfig, algorithm: str, seed: int) -> np.ndarray:
    sc = SamplerConfig(algorithm, cfg.sampler.steps, cfg.sampler.ge_mu, rng_seed=seed,
                       discretization=cfg.sampler.discretization)
    return reverse_sample(family.flow, z, sc, family.flow.schedule, cfg.sampler.count).points[:, 0]


# ---------------------------------------------------------------------------
# zero-deviation sanity


DEFAULT_SANITY_MIXTURES = (
    GaussianMixtureModel.single(0.0, 1.0),
    GaussianMixtureModel(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([0.01, 0.01])),
    GaussianMixtureModel(np.array([0.2, 0.3, 0.5]), np.array([[-2.0], [0.0], [1.5]]), np.array([0.1, 0.3, 0.05])),
    GaussianMixtureModel(np.array([0.6, 0.4]), np.array([[0.0, 1.0], [1.0, -1.0]]), np.array([0.2, 0.5])),
)


def velocity_form_flow(gmm: GaussianMixtureModel, schedule) -> CallableFlow:
    """The ideal flow assembled from ``gamma1 * score + gamma2 * x``, then divided by ``sigma_dot``.

    This route shares no code with the oracle's ``-sigma * score`` shortcut.
    """
    return CallableFlow(
        schedule,
        lambda x, z, s: imcf_flow(x, z, s, gmm, schedule) / schedule.sigma_dot(s),
        lambda x, z, s: mixture_divergence(x, z, s, gmm, schedule) / schedule.sigma_dot(s),
    )


def zero_sd_suite(schedule, mixtures=DEFAULT_SANITY_MIXTURES, n_outer=256, s_points=16, seed=0,
                  route="score"):
    """Each mixture's ideal flow against its own analytic oracle.

    ``route="score"`` uses ``MixtureFlow``; ``route="velocity"`` uses
    ``velocity_form_flow``, whose integrand sits at the rounding floor
    instead of exactly zero.

    Returns one dict per mixture with the largest integrand value seen and
    the total deviation with its standard error.
    """
    cfg = SDConfig(n_outer=n_outer, s_grid=time_grid(s_points))
    out = []
    for i, gmm in enumerate(mixtures):
        flow = velocity_form_flow(gmm, schedule) if route == "velocity" else MixtureFlow(gmm, schedule)
        oracle = AnalyticIMCF(gmm, schedule)
        rng = np.random.default_rng(point_seed(seed, i))
        worst = 0.0
        for s in cfg.s_grid:
            x = gmm.sample(n_outer, rng) + schedule.sigma(s) * rng.standard_normal((n_outer, gmm.dim))
            worst = max(worst, float(np.max(sd_integrand(flow, oracle, None, float(s), x, cfg, schedule, rng))))
        rep = total_schedule_deviation(flow, oracle, None, cfg, schedule, point_seed(seed, i))
        out.append({"mixture": i, "max_integrand": worst, "total_sd": rep.total_sd, "total_stderr": rep.total_stderr})
    return out


# ---------------------------------------------------------------------------
# variance-mismatch testbed


@dataclass
class VarianceMismatch:
    """Spline guide between the ideal flows of ``N(0, sb^2)`` (z = 0) and ``N(0, k^2 sb^2)`` (z = 1)."""

    flow: SplineGuidedFlow
    terminal: GaussianMixtureModel
    z: float
    sigma_bar: float
    k: float

    def score(self, x, s):
        return variance_blend_score(x, s, 1.0 - self.z, self.sigma_bar, self.k, self.flow.schedule)


def variance_mismatch_testbed(schedule, sigma_bar=0.5, k=2.0, z=0.5) -> VarianceMismatch:
    """Build the guided flow and the Gaussian its probability-flow ODE ends in.

    The blended field is linear, ``eps = a(s) x`` with ``a = sigma / D(s)``,
    so started from ``N(0, sigma(1)^2)`` the ODE keeps a centred Gaussian with
    ``d log Var / ds = 2 sigma_dot a``; integrating from 1 to 0 gives ``p0``.
    """
    narrow = GaussianMixtureModel.single(0.0, sigma_bar**2)
    wide = GaussianMixtureModel.single(0.0, (k * sigma_bar) ** 2)
    flow = SplineGuidedFlow([0.0, 1.0], [MixtureFlow(narrow, schedule), MixtureFlow(wide, schedule)], schedule)
    tb = VarianceMismatch(flow, None, z, sigma_bar, k)

    def rate(s):
        sig = schedule.sigma(s)
        inv_d = -float(tb.score(1.0, s))  # score = -x / D
        return 2.0 * schedule.sigma_dot(s) * sig * inv_d

    integral, _ = quad(rate, 0.0, 1.0, limit=200, epsabs=1e-13, epsrel=1e-12)
    var0 = schedule.sigma(1.0) ** 2 * math.exp(-integral)
    tb.terminal = GaussianMixtureModel.single(0.0, var0)
    return tb


# ---------------------------------------------------------------------------
# output helpers


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _finish(out: Path, command: str, cfg: RunConfig, seed: int, inputs: dict, files) -> dict:
    manifest = {
        "command": command,
        "seed": seed,
        "config": cfg.echo(),
        "inputs": {"config": git_blob_hash(_canonical(cfg.echo())), **inputs},
        "outputs": {f: git_blob_hash((out / f).read_bytes()) for f in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _pool_map(fn, items, threads):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# experiments


def run_fig6_analogue(cfg: RunConfig, seed: int, out_dir, model_path=None, threads: int = 1) -> dict:
    """Samples and deviation profiles of the guided families over the z-grid.

    Writes ``samples.csv`` (method, z, x), ``sd_profile.csv`` (method, z, s,
    sd, stderr; the long-form heatmap), ``sd_total.csv`` and ``manifest.json``.
    The learned model is included when ``model_path`` or ``family.model`` is set.
    """
    out = Path(out_dir)
    families = [build_family(cfg, "linear"), build_family(cfg, "kernel")]
    inputs = {}
    path = model_path or cfg.family.model
    if path:
        families.append(build_family(cfg, "nn", path))
        inputs["model"] = git_blob_hash(Path(path).read_bytes())
    out.mkdir(parents=True, exist_ok=True)
    zs = z_grid(cfg)
    tasks = [(fam, i, float(z)) for fam in families for i, z in enumerate(zs)]

    def run(task):
        fam, i, z = task
        x = _samples(fam, z, cfg, cfg.sampler.algorithm, point_seed(seed, 2 * i))
        rep = family_sd(fam, z, cfg, point_seed(seed, 2 * i + 1))
        return fam.kind, z, x, rep

    results = _pool_map(run, tasks, threads)
    meta = {"config": cfg.echo(), "seed": seed}
    write_table(out / "samples.csv", meta, ["method", "z", "x"],
                ([m, z, v] for m, z, x, _ in results for v in x))
    write_table(out / "sd_profile.csv", meta, ["method", "z", "s", "sd", "stderr"],
                ([m, z, s, v, e] for m, z, _, rep in results for s, v, e in rep.per_s))
    write_table(out / "sd_total.csv", meta, ["method", "z", "total_sd", "total_stderr"],
                ([m, z, rep.total_sd, rep.total_stderr] for m, z, _, rep in results))
    files = ["samples.csv", "sd_profile.csv", "sd_total.csv"]
    _finish(out, "experiment fig6", cfg, seed, inputs, files)
    return {f: out / f for f in files + ["manifest.json"]}


def _spearman(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(spearmanr(a, b).statistic)


def run_correlation_sweep(cfg: RunConfig, seed: int, out_dir, model_path=None, threads: int = 1):
    """Total deviation versus sampler disagreement over the z-grid.

    Per ``z``: total deviation, W1(DDPM, DDIM) and W1(DDPM, GE) between
    equally seeded sampler runs. Returns ``(rows, summary)`` and writes
    ``correlation.csv``, ``summary.json`` and ``manifest.json``. A rank
    correlation with a constant input is reported as ``null``.
    """
    out = Path(out_dir)
    fam = build_family(cfg, None, model_path)
    inputs = {}
    if fam.learned:
        inputs["model"] = git_blob_hash(Path(model_path or cfg.family.model).read_bytes())
    out.mkdir(parents=True, exist_ok=True)
    zs = z_grid(cfg)

    def run(task):
        i, z = task
        shared = point_seed(seed, 2 * i)
        draws = {a: _samples(fam, z, cfg, a, shared) for a in ("DDPM", "DDIM", "GE")}
        rep = family_sd(fam, z, cfg, point_seed(seed, 2 * i + 1))
        return (z, rep.total_sd, rep.total_stderr,
                emd_exact(draws["DDPM"], draws["DDIM"]), emd_exact(draws["DDPM"], draws["GE"]))

    rows = _pool_map(run, [(i, float(z)) for i, z in enumerate(zs)], threads)
    arr = np.array(rows, dtype=float)
    rho_ddim = _spearman(arr[:, 1], arr[:, 3])
    rho_ge = _spearman(arr[:, 1], arr[:, 4])
    summary = {
        "family": fam.kind,
        "seed": seed,
        "z_points": len(zs),
        "spearman_sd_w1_ddpm_ddim": rho_ddim,
        "spearman_sd_w1_ddpm_ge": rho_ge,
        "note": None if rho_ddim is not None and rho_ge is not None
        else "rank correlation undefined: constant input",
        "config": cfg.echo(),
    }
    meta = {"config": cfg.echo(), "seed": seed}
    write_table(out / "correlation.csv", meta,
                ["z", "total_sd", "total_stderr", "w1_ddpm_ddim", "w1_ddpm_ge"], rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _finish(out, "experiment correlate", cfg, seed, inputs, ["correlation.csv", "summary.json"])
    return rows, summary

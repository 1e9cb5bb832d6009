"""Desk-scale experiment runners: cost/accuracy studies of ADF, EP, and
importance sampling against exact oracles, emitted as deterministic CSV.

Every run writes one CSV of result rows plus a JSON sidecar echoing the
full configuration and library version.  Rows are keyed by (experiment,
seed, method, checkpoint); the cost axis is the deterministic elementary-
operation tally.  Wall-clock timings are optional (off by default) so that
identical configurations yield byte-identical files.
"""
from __future__ import annotations

import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bpm import BpmBinding, dataset_from_csv, make_dataset
from .clutter import ClutterBinding, ClutterDataSpec, generate_clutter_data
from .engine import EPOptions, Schedule, run_adf, run_ep
from .factorgraph import DiscreteFactorGraph, Factor, bk_adf, load_network, loopy_ep
from .oracles import enumerate_discrete, exact_clutter, importance_sampler

CSV_HEADER = ("experiment", "seed", "method", "checkpoint", "operations",
              "log_evidence_error", "mean_error", "converged", "sweeps")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str  # clutter | bpm | loopy
    seeds: tuple[int, ...] = tuple(range(1, 21))
    methods: tuple[str, ...] = ("adf", "ep", "importance", "oracle")
    ep_options: EPOptions = field(default_factory=EPOptions)
    # clutter parameters
    x_true: tuple[float, ...] = (2.0,)
    n: int = 12
    w: float = 0.5
    # bpm parameters
    dataset_path: str | None = None
    slack: float = 0.0
    add_bias: bool = True
    importance_samples: tuple[int, ...] = (1000, 10000, 100000)
    # loopy parameters
    network: str = "tree"  # tree | cycle3 | <path to json document>
    n_vars: int = 8
    max_cardinality: int = 4
    timings: bool = False

    def __post_init__(self):
        if self.kind not in ("clutter", "bpm", "loopy"):
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.methods:
            raise ConfigError("at least one method is required")
        known = {"adf", "ep", "importance", "oracle"}
        bad = set(self.methods) - known
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}")
        if self.kind == "clutter" and "oracle" in self.methods and self.n > 20:
            raise ConfigError("n must be <= 20 when the exact oracle is requested")


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    seed: int
    method: str
    checkpoint: str
    operations: int
    log_evidence_error: float
    mean_error: float
    converged: bool
    sweeps: int
    wall_time_ms: float = 0.0

    def csv_values(self, timings: bool) -> list[str]:
        vals = [self.experiment, str(self.seed), self.method, self.checkpoint,
                str(self.operations), _fmt(self.log_evidence_error),
                _fmt(self.mean_error), str(self.converged).lower(),
                str(self.sweeps)]
        if timings:
            vals.append(_fmt(self.wall_time_ms))
        return vals


def _fmt(x: float) -> str:
    if x != x:
        return "nan"
    return repr(float(x))


def rows_to_csv(rows: list[ResultRow], timings: bool = False) -> str:
    buf = io.StringIO()
    header = CSV_HEADER + (("wall_time_ms",) if timings else ())
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(row.csv_values(timings)) + "\n")
    return buf.getvalue()


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    ep_doc = dict(doc.pop("ep_options", {}))
    sched_doc = ep_doc.pop("schedule", None)
    if sched_doc is not None:
        ep_doc["schedule"] = Schedule(**sched_doc)
    try:
        opts = EPOptions(**ep_doc)
        for key in ("seeds", "methods", "x_true", "importance_samples"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return ExperimentConfig(ep_options=opts, **doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(config: ExperimentConfig) -> dict:
    opts = config.ep_options
    return {
        "kind": config.kind,
        "seeds": list(config.seeds),
        "methods": list(config.methods),
        "ep_options": {
            "tolerance": opts.tolerance,
            "max_sweeps": opts.max_sweeps,
            "damping": opts.damping,
            "schedule": {"kind": opts.schedule.kind, "seed": opts.schedule.seed},
        },
        "x_true": list(config.x_true),
        "n": config.n,
        "w": config.w,
        "dataset_path": config.dataset_path,
        "slack": config.slack,
        "add_bias": config.add_bias,
        "importance_samples": list(config.importance_samples),
        "network": config.network,
        "n_vars": config.n_vars,
        "max_cardinality": config.max_cardinality,
        "timings": config.timings,
    }


# ---------------------------------------------------------------------------
# clutter experiment
# ---------------------------------------------------------------------------

def run_clutter_experiment(config: ExperimentConfig) -> list[ResultRow]:
    """Per seed: generate data, compute the exact 2^n posterior, then run
    ADF, per-sweep-checkpointed EP, and prior importance sampling; rows carry
    absolute log-evidence and posterior-mean errors versus cumulative cost."""
    rows: list[ResultRow] = []
    for seed in config.seeds:
        spec = ClutterDataSpec(x_true=np.asarray(config.x_true), n=config.n,
                               w=config.w, seed=seed)
        model = generate_clutter_data(spec)
        exact = exact_clutter(model.data, model.w, model.prior_variance,
                              model.clutter_variance)

        def errs(mean, log_ev):
            return (abs(log_ev - exact.log_evidence),
                    float(np.linalg.norm(np.atleast_1d(mean) - exact.mean)))

        if "oracle" in config.methods:
            rows.append(ResultRow("clutter", seed, "oracle", "exact",
                                  0, 0.0, 0.0, True, 0))
        if "adf" in config.methods:
            t0 = time.perf_counter()
            res = run_adf(ClutterBinding(model))
            dt = (time.perf_counter() - t0) * 1e3
            e_ev, e_m = errs(res.posterior.mean, res.log_evidence)
            rows.append(ResultRow("clutter", seed, "adf", "final",
                                  res.diagnostics.operations, e_ev, e_m,
                                  res.converged, res.sweeps, dt))
        if "ep" in config.methods:
            t0 = time.perf_counter()
            res = run_ep(ClutterBinding(model), config.ep_options,
                         record_history=True)
            dt = (time.perf_counter() - t0) * 1e3
            for snap in res.history:
                e_ev, e_m = errs(snap.posterior.mean, snap.log_evidence)
                rows.append(ResultRow("clutter", seed, "ep", f"sweep{snap.sweep}",
                                      snap.operations, e_ev, e_m,
                                      res.converged, res.sweeps, dt))
            if not res.history:
                e_ev, e_m = errs(res.posterior.mean, res.log_evidence)
                rows.append(ResultRow("clutter", seed, "ep", "final",
                                      res.diagnostics.operations, e_ev, e_m,
                                      res.converged, res.sweeps, dt))
        if "importance" in config.methods:
            for s_count in config.importance_samples:
                t0 = time.perf_counter()
                est = _clutter_importance(model, s_count, seed)
                dt = (time.perf_counter() - t0) * 1e3
                e_ev = abs(math.log(est.evidence.value) - exact.log_evidence) \
                    if est.evidence.value > 0 else math.inf
                e_m = float(np.linalg.norm(est.posterior_mean.value - exact.mean))
                rows.append(ResultRow("clutter", seed, "importance",
                                      f"samples{s_count}",
                                      s_count * (model.d + 2), e_ev, e_m,
                                      True, 0, dt))
    return rows


def _clutter_importance(model, samples: int, seed: int):
    data, w, cv = model.data, model.w, model.clutter_variance
    d = model.d
    log_cl = np.array([
        math.log(w) + (-0.5 * d * math.log(2 * math.pi * cv)
                       - 0.5 * float(y @ y) / cv) if w > 0 else -math.inf
        for y in data])

    def loglik(xs):
        out = np.zeros(xs.shape[0])
        for i, y in enumerate(data):
            r = xs - y[None, :]
            log_in = (math.log1p(-w) if w < 1.0 else -math.inf) \
                - 0.5 * d * math.log(2 * math.pi) - 0.5 * np.sum(r * r, axis=1)
            out += np.logaddexp(log_in, log_cl[i])
        return out

    return importance_sampler(loglik, np.zeros(d),
                              model.prior_variance * np.eye(d), samples, seed)


# ---------------------------------------------------------------------------
# bpm experiment
# ---------------------------------------------------------------------------

def builtin_bpm_dataset(slack: float = 0.0, add_bias: bool = True):
    """The built-in 3-point linearly separable set (plus bias column)."""
    return make_dataset([[0.0, 2.0], [2.0, 0.0], [-1.0, -1.0]],
                        [1.0, -1.0, -1.0], slack=slack, add_bias=add_bias)


def _train_error_row(seed, method, dataset, result, wall_ms):
    from .bpm import _model_from_result, bpm_training_error
    err = bpm_training_error(_model_from_result(dataset, result))
    return ResultRow("bpm", seed, method, "train_error",
                     result.diagnostics.operations, math.nan, err,
                     result.converged, result.sweeps, wall_ms)


def run_bpm_experiment(config: ExperimentConfig) -> list[ResultRow]:
    """Ground truth is the importance-sampling Bayes point at the largest
    configured sample count; ADF/EP rows carry the Euclidean distance of the
    posterior mean to it versus cost.  Each trained method also emits a
    `train_error` checkpoint row whose mean_error column is the training-set
    error rate (log_evidence_error is marked nan there)."""
    if config.dataset_path is not None:
        try:
            text = Path(config.dataset_path).read_text()
        except OSError as exc:
            raise ConfigError(f"unreadable dataset: {exc}") from exc
        raw = dataset_from_csv(text, slack=config.slack)
        dataset = make_dataset(raw.points, raw.labels, slack=config.slack,
                               add_bias=config.add_bias)
    else:
        dataset = builtin_bpm_dataset(config.slack, config.add_bias)

    d = dataset.d
    directions = dataset.labels[:, None] * dataset.points
    if dataset.slack > 0.0:
        directions = directions / dataset.slack
        noise_sd = 1.0
    else:
        noise_sd = 0.0

    from scipy.special import log_ndtr

    def loglik(ws):
        margins = ws @ directions.T
        if noise_sd > 0.0:
            return np.sum(log_ndtr(margins / noise_sd), axis=1)
        ok = np.all(margins > 0, axis=1)
        return np.where(ok, 0.0, -math.inf)

    rows: list[ResultRow] = []
    s_truth = max(config.importance_samples)
    for seed in config.seeds:
        truth = importance_sampler(loglik, np.zeros(d), np.eye(d), s_truth, seed)
        truth_mean = truth.posterior_mean.value
        log_ev_truth = math.log(truth.evidence.value)

        if "oracle" in config.methods:
            rows.append(ResultRow("bpm", seed, "oracle", f"samples{s_truth}",
                                  s_truth * (d + 2), 0.0, 0.0, True, 0))
        if "adf" in config.methods:
            t0 = time.perf_counter()
            res = run_adf(BpmBinding(dataset))
            dt = (time.perf_counter() - t0) * 1e3
            rows.append(ResultRow(
                "bpm", seed, "adf", "final", res.diagnostics.operations,
                abs(res.log_evidence - log_ev_truth),
                float(np.linalg.norm(res.posterior.mean - truth_mean)),
                res.converged, res.sweeps, dt))
            rows.append(_train_error_row(seed, "adf", dataset, res, dt))
        if "ep" in config.methods:
            t0 = time.perf_counter()
            res = run_ep(BpmBinding(dataset), config.ep_options,
                         record_history=True)
            dt = (time.perf_counter() - t0) * 1e3
            for snap in res.history:
                rows.append(ResultRow(
                    "bpm", seed, "ep", f"sweep{snap.sweep}", snap.operations,
                    abs(snap.log_evidence - log_ev_truth),
                    float(np.linalg.norm(snap.posterior.mean - truth_mean)),
                    res.converged, res.sweeps, dt))
            if not res.history:
                rows.append(ResultRow(
                    "bpm", seed, "ep", "final", res.diagnostics.operations,
                    abs(res.log_evidence - log_ev_truth),
                    float(np.linalg.norm(res.posterior.mean - truth_mean)),
                    res.converged, res.sweeps, dt))
            rows.append(_train_error_row(seed, "ep", dataset, res, dt))
        if "importance" in config.methods:
            for s_count in config.importance_samples:
                if s_count == s_truth:
                    continue
                t0 = time.perf_counter()
                est = importance_sampler(loglik, np.zeros(d), np.eye(d),
                                         s_count, seed + 10_000)
                dt = (time.perf_counter() - t0) * 1e3
                e_ev = abs(math.log(est.evidence.value) - log_ev_truth) \
                    if est.evidence.value > 0 else math.inf
                rows.append(ResultRow(
                    "bpm", seed, "importance", f"samples{s_count}",
                    s_count * (d + 2), e_ev,
                    float(np.linalg.norm(est.posterior_mean.value - truth_mean)),
                    True, 0, dt))
    return rows


# ---------------------------------------------------------------------------
# loopy experiment
# ---------------------------------------------------------------------------

def random_tree_network(n_vars: int, max_cardinality: int,
                        seed: int) -> DiscreteFactorGraph:
    """Random tree: each non-root variable attaches to an earlier one through
    a random positive pairwise table; the root carries a unary factor."""
    rng = np.random.default_rng(seed)
    cards = rng.integers(2, max_cardinality + 1, size=n_vars)
    variables = tuple((f"v{i}", int(cards[i])) for i in range(n_vars))
    factors = [Factor("root", ("v0",),
                      rng.uniform(0.5, 1.5, size=int(cards[0])))]
    for i in range(1, n_vars):
        parent = int(rng.integers(0, i))
        table = rng.uniform(0.1, 2.0, size=int(cards[parent] * cards[i]))
        factors.append(Factor(f"e{parent}_{i}", (f"v{parent}", f"v{i}"), table))
    return DiscreteFactorGraph(variables=variables, factors=tuple(factors))


def frustrated_cycle_network(coupling: float = 100.0) -> DiscreteFactorGraph:
    """Three binary variables in an odd antiferromagnetic loop with weak
    symmetry-breaking fields; undamped propagation orbits instead of
    settling at the default coupling strength."""
    table = [1.0, coupling, coupling, 1.0]
    return DiscreteFactorGraph(
        variables=(("a", 2), ("b", 2), ("c", 2)),
        factors=(Factor("fa", ("a",), [1.1, 1.0]),
                 Factor("fb", ("b",), [1.0, 1.2]),
                 Factor("fc", ("c",), [0.9, 1.0]),
                 Factor("ab", ("a", "b"), table),
                 Factor("bc", ("b", "c"), table),
                 Factor("ca", ("c", "a"), table)))


def run_loopy_experiment(config: ExperimentConfig) -> list[ResultRow]:
    """Per seed: build or load a network, run BK-ADF and loopy EP, and emit
    one row per (method, variable) with the L1 belief distance against
    exhaustive enumeration, plus the evidence error and convergence flag."""
    rows: list[ResultRow] = []
    for seed in config.seeds:
        if config.network == "tree":
            net = random_tree_network(config.n_vars, config.max_cardinality, seed)
        elif config.network == "cycle3":
            net = frustrated_cycle_network()
        else:
            net = load_network(Path(config.network))

        try:
            marginals, log_partition = enumerate_discrete(net)
            have_oracle = True
        except ValueError:
            marginals, log_partition = {}, math.nan
            have_oracle = False

        def l1(beliefs, vid):
            if not have_oracle:
                return math.nan
            return float(np.sum(np.abs(beliefs[vid] - marginals[vid])))

        if "adf" in config.methods:
            t0 = time.perf_counter()
            beliefs, log_ev = bk_adf(net)
            dt = (time.perf_counter() - t0) * 1e3
            for vid, _ in net.variables:
                rows.append(ResultRow(
                    "loopy", seed, "adf", vid, len(net.factors),
                    abs(log_ev - log_partition), l1(beliefs, vid), True, 1, dt))
        if "ep" in config.methods:
            t0 = time.perf_counter()
            res = loopy_ep(net, config.ep_options)
            dt = (time.perf_counter() - t0) * 1e3
            for vid, _ in net.variables:
                rows.append(ResultRow(
                    "loopy", seed, "ep", vid, res.operations,
                    abs(res.log_evidence - log_partition),
                    l1(res.beliefs, vid), res.converged, res.sweeps, dt))
    return rows


# ---------------------------------------------------------------------------
# run driver
# ---------------------------------------------------------------------------

_RUNNERS = {
    "clutter": run_clutter_experiment,
    "bpm": run_bpm_experiment,
    "loopy": run_loopy_experiment,
}


def run_experiment(config: ExperimentConfig) -> list[ResultRow]:
    return _RUNNERS[config.kind](config)


def write_results(config: ExperimentConfig, rows: list[ResultRow],
                  out_path: str | Path) -> None:
    """CSV of rows plus a JSON sidecar echoing config and version.  Wall
    times appear only when config.timings is set, keeping default output
    byte-identical across repeated runs."""
    out_path = Path(out_path)
    out_path.write_text(rows_to_csv(rows, timings=config.timings))
    sidecar = {
        "config": config_to_dict(config),
        "version": __version__,
        "rows": len(rows),
    }
    if config.timings:
        sidecar["total_wall_time_ms"] = sum(r.wall_time_ms for r in rows)
    out_path.with_suffix(out_path.suffix + ".meta.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# analytic-vs-oracle batteries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BatteryResult:
    name: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def oracle_check_battery(cases: int = 200, seed: int = 1234) -> list[BatteryResult]:
    """Cross-check every analytic fast path against its brute-force oracle;
    the oracle-check CLI subcommand prints these as a pass/fail table."""
    from .bpm import bpm_moment_match
    from .clutter import clutter_moment_match
    from .gaussians import FullGaussian, SphericalGaussian, probit, probit_ratio
    from .oracles import (clutter_tilted_moments, directional_tilted_moments,
                          probit_margin_term, tilted_moments_quadrature)

    results = []
    rng = np.random.default_rng(seed)

    worst = 0.0
    for _ in range(cases):
        d = int(rng.integers(1, 4))
        cav = SphericalGaussian(mean=rng.normal(size=d) * 2.0,
                                variance=float(rng.uniform(0.3, 20.0)))
        y = rng.normal(size=d) * 3.0
        w = float(rng.uniform(0.0, 1.0))
        a = clutter_moment_match(cav, y, w)
        zo, mo, vo = clutter_tilted_moments(cav, y, w)
        worst = max(worst,
                    abs(a.z - zo) / max(abs(zo), 1e-12),
                    float(np.max(np.abs(a.posterior.mean - mo)))
                    / max(1.0, float(np.max(np.abs(mo)))),
                    abs(a.posterior.variance - vo) / max(abs(vo), 1e-12))
    results.append(BatteryResult("clutter-moment-match-vs-quadrature", worst, 1e-8))

    worst = 0.0
    for k in range(cases):
        d = int(rng.integers(1, 6))
        A = rng.normal(size=(d, d))
        cav = FullGaussian(mean=rng.normal(size=d),
                           covariance=A @ A.T + 0.3 * np.eye(d))
        u = rng.normal(size=d)
        while float(u @ u) < 1e-6:
            u = rng.normal(size=d)
        noise = 1.0 if k % 2 == 0 else 0.0
        a = bpm_moment_match(cav, u, noise)
        zo, mo, co = directional_tilted_moments(
            cav.mean, cav.covariance, u, probit_margin_term(noise),
            breakpoints=(0.0,) if noise == 0.0 else ())
        worst = max(worst,
                    abs(math.exp(a.log_z) - zo) / max(abs(zo), 1e-12),
                    float(np.max(np.abs(a.posterior.mean - mo)))
                    / max(1.0, float(np.max(np.abs(mo)))),
                    float(np.max(np.abs(a.posterior.covariance - co)))
                    / max(1.0, float(np.max(np.abs(co)))))
    results.append(BatteryResult("bpm-moment-match-vs-quadrature", worst, 1e-8))

    worst = 0.0
    for k in range(24):
        mu = float(rng.normal() * 2.0)
        v = float(rng.uniform(0.3, 5.0))
        if k % 2 == 0:
            term = probit_margin_term(1.0)
            brk: tuple[float, ...] = ()
        else:
            term = probit_margin_term(0.0)
            brk = (0.0,)
        base = tilted_moments_quadrature(mu, v, term, features=((0.0, 1.0),),
                                         breakpoints=brk, resolution=8)
        fine = tilted_moments_quadrature(mu, v, term, features=((0.0, 1.0),),
                                         breakpoints=brk, resolution=16)
        worst = max(worst, *(abs(b - f) / max(abs(f), 1e-12)
                             for b, f in zip(base, fine)))
    results.append(BatteryResult("quadrature-self-consistency", worst, 1e-10))

    worst = 0.0
    for z in np.linspace(-8.0, 8.0, 2001):
        naive = math.exp(-0.5 * z * z - 0.5 * math.log(2 * math.pi)) / probit(z)
        worst = max(worst, abs(probit_ratio(float(z)) - naive) / naive)
    results.append(BatteryResult("probit-ratio-vs-naive-quotient", worst, 1e-10))

    return results

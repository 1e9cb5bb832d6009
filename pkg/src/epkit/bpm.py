"""Linear Bayes Point Machine trained by expectation propagation.

The posterior over classifier weights is a full-covariance Gaussian with
prior N(0, I); every training point contributes a probit factor over the
margin, approximated by a rank-one Gaussian site.  Each site update costs
O(d^2): only matrix-vector products and rank-one covariance corrections,
never a matrix-matrix product.

Slack handling: for slack eps > 0 the training points are pre-scaled once
to y_i x_i / eps and the margin noise variance is 1; eps = 0 keeps the
label-scaled points and sets the noise variance to 0, which is the exact
eps -> 0 limit (the probit becomes a step function).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import Diagnostics, EPOptions, EPResult, ModelBinding, OpTally, run_ep
from .gaussians import (
    LOG_2PI,
    FullGaussian,
    ImproperProductError,
    RankOneSite,
    divide_out,
    log_probit,
    probit_ratio,
    symmetrize,
)


@dataclass(frozen=True)
class BpmDataset:
    """Labeled points for linear classification; points already include the
    constant bias coordinate when bias_augmented is set."""
    points: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) of +-1
    slack: float = 0.0
    bias_augmented: bool = False

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        labels = np.atleast_1d(np.asarray(self.labels, dtype=float))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)
        if pts.shape[0] != labels.shape[0]:
            raise ValueError("points and labels must have equal length")
        if labels.size and not np.all(np.isin(labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if self.slack < 0.0:
            raise ValueError("slack must be nonnegative")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


def make_dataset(points, labels, slack: float = 0.0,
                 add_bias: bool = False) -> BpmDataset:
    """Assemble a dataset, optionally appending the constant-1 bias column."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if add_bias:
        pts = np.hstack([pts, np.ones((pts.shape[0], 1))])
    return BpmDataset(points=pts, labels=np.asarray(labels, dtype=float),
                      slack=slack, bias_augmented=add_bias)


@dataclass(frozen=True)
class BpmMatch:
    posterior: FullGaussian
    log_z: float
    z_score: float
    alpha: float


def bpm_cavity(posterior: FullGaussian, site: RankOneSite):
    """Rank-one natural-parameter removal of one site; None when improper."""
    return divide_out(posterior, site)


def bpm_moment_match(cavity: FullGaussian, u: np.ndarray,
                     noise_var: float = 1.0) -> BpmMatch:
    """Moment match a probit margin factor against a full-Gaussian cavity.

    The factor depends on w only through s = u.w, so the tilted moments come
    from the 1-D tilt of s ~ N(u.m, u.V u) with tilt cdf((s)/sqrt(noise_var));
    off-direction moments follow by Gaussian conditioning:

        m' = m + alpha V u
        V' = V - kappa (V u)(V u)^T,   kappa = rho (z + rho) / (q + noise_var)

    with q = u.V u, z = u.m / sqrt(q + noise_var) and rho the stable ratio
    pdf(z)/cdf(z).  kappa q < 1 always, so the posterior stays proper.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if float(u @ u) == 0.0:
        raise ValueError("moment match requires a non-zero direction")
    V, m = cavity.covariance, cavity.mean
    Vu = V @ u
    q = float(u @ Vu)
    den = q + noise_var
    if not den > 0.0:
        raise ValueError("degenerate margin variance")
    sden = math.sqrt(den)
    z = float(u @ m) / sden
    rho = probit_ratio(z)
    alpha = rho / sden
    # kappa q < 1 holds in exact arithmetic with gap ~ 2/z^2, but a
    # zero-mass posterior (conflicting step likelihoods) drives z -> -inf
    # and the gap below float resolution.  Cap the per-visit variance
    # shrink at 1e-3 and keep the margin variance above the dense
    # representation's noise floor; both caps bind only in that collapse,
    # far outside any z a proper fixed point produces.
    noise_floor = 1e-14 * float(np.trace(V)) / V.shape[0]
    target_gap = min(1.0, max(1e-3, noise_floor / q))
    kappa = min(rho * (z + rho) / den, (1.0 - target_gap) / q)
    mean = m + alpha * Vu
    cov = symmetrize(V - kappa * np.outer(Vu, Vu))
    return BpmMatch(posterior=FullGaussian(mean=mean, covariance=cov),
                    log_z=log_probit(z), z_score=z, alpha=alpha)


def rank_one_site_from(posterior: FullGaussian, cavity: FullGaussian,
                       log_z: float, u: np.ndarray) -> RankOneSite:
    """Site = Z * posterior / cavity for a rank-one update along u.

    Because the factor touches only s = u.w, the density ratio reduces to the
    ratio of the 1-D marginals of s, whose natural parameters subtract.  The
    scale is fixed by evaluating the ratio at the cavity's own margin mean.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    q1 = float(u @ (posterior.covariance @ u))
    q0 = float(u @ (cavity.covariance @ u))
    mu1 = float(u @ posterior.mean)
    mu0 = float(u @ cavity.mean)
    tau = 1.0 / q1 - 1.0 / q0
    shift = mu1 / q1 - mu0 / q0

    def log_n1(x, mu, v):
        return -0.5 * (LOG_2PI + math.log(v)) - 0.5 * (x - mu) ** 2 / v

    log_ratio_at_mu0 = log_n1(mu0, mu1, q1) - log_n1(mu0, mu0, q0)
    if tau == 0.0:
        return RankOneSite(direction=u, precision=0.0, mean=0.0,
                           log_scale=log_z + log_ratio_at_mu0)
    m_site = shift / tau
    log_scale = log_z + log_ratio_at_mu0 + 0.5 * tau * (mu0 - m_site) ** 2
    return RankOneSite(direction=u, precision=tau, mean=m_site,
                       log_scale=log_scale)


class BpmBinding(ModelBinding):
    """Engine binding for BPM training (full-Gaussian family, rank-one sites).

    Operation charges per site visit: cavity 2d^2+2d, moment match 2d^2+2d,
    site extraction d^2+3d; evidence evaluation charges d^3 once per call for
    its single dense solve.
    """

    def __init__(self, dataset: BpmDataset):
        self.dataset = dataset
        self.tally = OpTally()
        d = dataset.d
        if dataset.slack > 0.0:
            self.directions = (dataset.labels[:, None] * dataset.points) / dataset.slack
            self.noise_var = 1.0
        else:
            self.directions = dataset.labels[:, None] * dataset.points
            self.noise_var = 0.0
            norms = np.linalg.norm(self.directions, axis=1) if dataset.n else np.array([])
            if dataset.n and float(np.min(norms)) == 0.0:
                raise ValueError(
                    "zero training point with zero slack has an undefined "
                    "step likelihood")
        self._prior = FullGaussian(mean=np.zeros(d), covariance=np.eye(d))

    @property
    def site_count(self) -> int:
        return self.dataset.n

    def prior(self) -> FullGaussian:
        return self._prior

    def vacuous_site(self, i: int) -> RankOneSite:
        return RankOneSite(direction=self.directions[i], precision=0.0,
                           mean=0.0, log_scale=0.0)

    def cavity(self, posterior, site):
        d = self.dataset.d
        self.tally.add(2 * d * d + 2 * d)
        return bpm_cavity(posterior, site)

    def moment_match(self, cavity, i: int):
        d = self.dataset.d
        self.tally.add(2 * d * d + 2 * d)
        match = bpm_moment_match(cavity, self.directions[i], self.noise_var)
        return match.posterior, match.log_z

    def make_site(self, posterior, cavity, log_z: float, i: int) -> RankOneSite:
        d = self.dataset.d
        self.tally.add(d * d + 3 * d)
        return rank_one_site_from(posterior, cavity, log_z, self.directions[i])

    def recombine(self, cavity, site):
        d = self.dataset.d
        self.tally.add(2 * d * d + 2 * d)
        u = site.direction
        Vu = cavity.covariance @ u
        q = float(u @ Vu)
        denom = 1.0 + site.precision * q
        if denom <= 0.0:
            raise ImproperProductError("improper product")
        V = symmetrize(cavity.covariance - np.outer(Vu, Vu) * (site.precision / denom))
        m = cavity.mean + Vu * ((site.precision * (site.mean - float(u @ cavity.mean)))
                                / denom)
        return FullGaussian(mean=m, covariance=V)

    def log_evidence(self, posterior, sites) -> float:
        d = self.dataset.d
        self.tally.add(d * d * d)
        return bpm_log_evidence_parts(posterior, sites)

    def is_degenerate(self, posterior) -> bool:
        # conflicting step likelihoods have zero total mass; refinement then
        # shrinks the posterior geometrically toward a point, either overall
        # or along single directions (condition blow-up), far beyond any
        # scale or anisotropy a real fixed point reaches
        eig = np.linalg.eigvalsh(posterior.covariance)
        low = float(np.min(eig))
        return low < 1e-40 or low < 1e-12 * float(np.mean(np.diag(
            posterior.covariance)))

    # --- family hooks for energy diagnostics -------------------------------

    def natural_coords(self, dist: FullGaussian) -> np.ndarray:
        P = np.linalg.inv(dist.covariance)
        b = P @ dist.mean
        return np.concatenate((b, (-0.5 * symmetrize(P)).ravel()))

    def site_natural_coords(self, site: RankOneSite) -> np.ndarray:
        u = site.direction
        return np.concatenate((site.precision * site.mean * u,
                               (-0.5 * site.precision * np.outer(u, u)).ravel()))

    def family_moments(self, dist: FullGaussian) -> np.ndarray:
        m = dist.mean
        return np.concatenate((m, (dist.covariance + np.outer(m, m)).ravel()))

    def log_partition(self, coords: np.ndarray) -> float:
        d = self.dataset.d
        b, A = coords[:d], coords[d:].reshape(d, d)
        P = symmetrize(-2.0 * A)
        try:
            L = np.linalg.cholesky(P)
        except np.linalg.LinAlgError as exc:
            raise ImproperProductError("improper product") from exc
        z = np.linalg.solve(L, b)
        return 0.5 * d * LOG_2PI - float(np.sum(np.log(np.diag(L)))) + 0.5 * float(z @ z)


def bpm_log_evidence_parts(posterior: FullGaussian, sites) -> float:
    """log p(D) = 1/2 log|V_w| + B/2 + sum_i log s_i with
    B = m_w' V_w^-1 m_w - sum_i m_i^2/v_i; vacuous sites contribute nothing."""
    L = posterior.cholesky()
    half_logdet = float(np.sum(np.log(np.diag(L))))
    y = np.linalg.solve(L, posterior.mean)
    b = float(y @ y)
    log_scales = 0.0
    for s in sites:
        b -= s.precision * s.mean * s.mean
        log_scales += s.log_scale
    return half_logdet + 0.5 * b + log_scales


@dataclass(frozen=True)
class BpmModel:
    posterior: FullGaussian
    sites: list
    log_evidence: float
    dataset: BpmDataset
    sweeps: int
    converged: bool
    diagnostics: Diagnostics

    @property
    def dim(self) -> int:
        return self.posterior.dim


def bpm_train(dataset: BpmDataset, opts: EPOptions = EPOptions()) -> BpmModel:
    """EP training: prior N(0, I), sites initialized vacuous, engine loop
    until site parameters stop changing.  Non-convergence is reported in the
    model diagnostics, not raised."""
    binding = BpmBinding(dataset)
    result = run_ep(binding, opts)
    return _model_from_result(dataset, result)


def _model_from_result(dataset: BpmDataset, result: EPResult) -> BpmModel:
    return BpmModel(posterior=result.posterior, sites=result.sites,
                    log_evidence=result.log_evidence, dataset=dataset,
                    sweeps=result.sweeps, converged=result.converged,
                    diagnostics=result.diagnostics)


def bpm_predict(model: BpmModel, x) -> int:
    """Label of the average classifier, sign(E[w] . x); an exact zero margin
    returns +1 (see bpm_predict_batch for tie counting)."""
    label, _ = _predict_one(model, x)
    return label


def bpm_predict_batch(model: BpmModel, xs) -> tuple[np.ndarray, int]:
    """Vector of predictions plus the number of zero-margin ties broken
    toward +1."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    out = np.empty(xs.shape[0], dtype=int)
    ties = 0
    for k, x in enumerate(xs):
        out[k], tie = _predict_one(model, x)
        ties += tie
    return out, ties


def _predict_one(model: BpmModel, x) -> tuple[int, int]:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = model.dim
    if model.dataset.bias_augmented and x.shape[0] == d - 1:
        x = np.append(x, 1.0)
    if x.shape[0] != d:
        raise ValueError(f"expected {d} features (or {d - 1} before bias), "
                         f"got {x.shape[0]}")
    score = float(model.posterior.mean @ x)
    if score == 0.0:
        return 1, 1
    return (1, 0) if score > 0.0 else (-1, 0)


def bpm_evidence(model: BpmModel) -> float:
    """log p(D) of the trained model (log-domain step-4 evidence display)."""
    return bpm_log_evidence_parts(model.posterior, model.sites)


def bpm_training_error(model: BpmModel) -> float:
    """Fraction of training points the posterior-mean classifier mislabels."""
    if model.dataset.n == 0:
        return 0.0
    preds, _ = bpm_predict_batch(model, model.dataset.points)
    return float(np.mean(preds != model.dataset.labels))


# ---------------------------------------------------------------------------
# dataset / model interchange
# ---------------------------------------------------------------------------

def dataset_to_csv(dataset: BpmDataset) -> str:
    """Feature columns x1..xd then a label column of -1/+1."""
    lines = [",".join([f"x{j + 1}" for j in range(dataset.d)] + ["label"])]
    for row, label in zip(dataset.points, dataset.labels):
        lines.append(",".join([repr(float(v)) for v in row] + [str(int(label))]))
    return "\n".join(lines) + "\n"


def dataset_from_csv(text: str, slack: float = 0.0,
                     bias_augmented: bool = False) -> BpmDataset:
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split(",")
    if header[-1] != "label":
        raise ValueError("last column must be 'label'")
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    arr = np.asarray(rows, dtype=float).reshape(len(rows), len(header))
    return BpmDataset(points=arr[:, :-1], labels=arr[:, -1], slack=slack,
                      bias_augmented=bias_augmented)


def training_config_doc(dataset: BpmDataset, opts: EPOptions,
                        seed: int | None = None) -> dict:
    doc = {
        "slack": dataset.slack,
        "bias_augmented": dataset.bias_augmented,
        "tolerance": opts.tolerance,
        "max_sweeps": opts.max_sweeps,
        "damping": opts.damping,
        "schedule": {"kind": opts.schedule.kind, "seed": opts.schedule.seed},
    }
    if seed is not None:
        doc["seed"] = seed
    return doc


def export_model(model: BpmModel) -> dict:
    """JSON-ready document: posterior mean, covariance (row-major), per-site
    (mean, variance, log scale), and training diagnostics."""
    return {
        "mean": [float(v) for v in model.posterior.mean],
        "covariance_row_major": [float(v) for v in model.posterior.covariance.ravel()],
        "sites": [
            {"mean": float(s.mean), "variance": (None if s.precision == 0.0
                                                 else 1.0 / s.precision),
             "log_scale": float(s.log_scale)}
            for s in model.sites
        ],
        "log_evidence": float(model.log_evidence),
        "diagnostics": {
            "sweeps": model.sweeps,
            "converged": model.converged,
            "skipped_sites": model.diagnostics.skipped_sites,
            "improper_cavities": model.diagnostics.improper_cavities,
            "operations": model.diagnostics.operations,
        },
    }


def write_model(model: BpmModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(export_model(model), indent=2,
                                     sort_keys=True) + "\n")

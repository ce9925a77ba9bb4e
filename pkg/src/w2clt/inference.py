"""Asymptotic variances, Efron-Stein constants, linearization residuals and
CLT-based confidence intervals for empirical transportation costs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from .exact_ot import w2_exact
from .measures import (DiscreteMeasure, SamplableMeasure, SeedSpec, as_seed, moment,
                       pairwise_moment_estimates)
from .semidiscrete import (MonteCarloBatch, PotentialVector, SolverConfig, solve_semidiscrete,
                           w2_at_solution,
                           w2_semidiscrete)

Potential = Callable[[np.ndarray], np.ndarray]

DEGENERATE_RTOL = 1e-4


class NonConvergenceError(RuntimeError):
    """Inference refused because the supplied potential did not converge."""


@dataclass(frozen=True)
class VarianceEstimate:
    sigma2: float
    method: str = "potential-plugin"
    se: float = 0.0

    def to_dict(self) -> dict:
        return {"sigma2": self.sigma2, "method": self.method, "se": self.se}


@dataclass(frozen=True)
class EfronSteinConstant:
    c_pq: float
    m22: float
    m4: float
    q4: float

    @classmethod
    def from_components(cls, m22: float, m4: float, q4: float) -> "EfronSteinConstant":
        return cls(8.0 * (m22 + math.sqrt(m4) * math.sqrt(q4)), m22, m4, q4)

    def bound(self, n: int) -> float:
        """Variance bound C(P, Q) / n."""
        return self.c_pq / n

    def to_dict(self) -> dict:
        return {"c_pq": self.c_pq, "components": {"m22": self.m22, "m4": self.m4, "q4": self.q4}}


@dataclass
class CltReport:
    estimate: float
    centering: str
    sigma2: VarianceEstimate
    ci: tuple[float, float]
    alpha: float
    n: int
    m: int | None = None
    lam: float | None = None
    es_bound: float | None = None
    degenerate: bool = False
    center_value: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def half_width(self) -> float:
        return (self.ci[1] - self.ci[0]) / 2

    def covers(self, value: float) -> bool:
        return self.ci[0] <= value <= self.ci[1]

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "centering": self.centering,
            "center_value": self.center_value,
            "sigma2": self.sigma2.to_dict(),
            "ci": list(self.ci),
            "alpha": self.alpha,
            "n": self.n,
            "m": self.m,
            "lambda": self.lam,
            "es_bound": self.es_bound,
            "degenerate": self.degenerate,
            **self.extra,
        }


def normal_quantile(prob: float) -> float:
    return float(norm.ppf(prob))


def _n_obs(m: DiscreteMeasure) -> int:
    return m.n_obs if m.n_obs is not None else m.k


# ---------------------------------------------------------------------------
# variance
# ---------------------------------------------------------------------------


def sigma2_plugin(P: DiscreteMeasure, phi0_at_points) -> VarianceEstimate:
    """P-variance of ||x||^2 - 2 phi0(x) over P's atoms."""
    phi = np.asarray(phi0_at_points, dtype=float).reshape(-1)
    if phi.size != P.k:
        raise ValueError(f"{phi.size} potential values for {P.k} support points")
    w = P.weights
    use = w > 0
    g = P.sq_norms[use] - 2.0 * phi[use]
    wu = w[use] / w[use].sum()
    c = g - wu @ g
    s2 = max(float(wu @ (c * c)), 0.0)
    se = 0.0
    if P.n_obs is not None and P.n_obs > 1:
        fourth = float(wu @ c**4)
        se = math.sqrt(max(fourth - s2 * s2, 0.0) / P.n_obs)
    return VarianceEstimate(s2, "potential-plugin", se)


def is_degenerate(sigma2: float, P: DiscreteMeasure, rtol: float = DEGENERATE_RTOL) -> bool:
    scale = 1.0 + float(P.weights @ P.sq_norms**2)
    return sigma2 <= rtol * scale


# ---------------------------------------------------------------------------
# Efron-Stein
# ---------------------------------------------------------------------------


def efron_stein_constant(P_sample: DiscreteMeasure, Q: SamplableMeasure | DiscreteMeasure,
                         mc: int = 1_000_000, seed: SeedSpec | int | None = None,
                         pair_budget: int = 1_000_000) -> EfronSteinConstant:
    """C(P, Q) = 8 (E||X1-X2||^2 ||X1||^2 + sqrt(E||X1-X2||^4) sqrt(E||Y||^4)),
    with the X-moments estimated from ``P_sample``."""
    seed = as_seed(seed)
    pm = pairwise_moment_estimates(P_sample, pair_budget=pair_budget, seed=seed)
    q4 = moment(Q, 4, mc_samples=mc, seed=seed.generator(7).integers(2**63)).value
    return EfronSteinConstant.from_components(pm.m22, pm.m4, q4)


# ---------------------------------------------------------------------------
# potentials as callables
# ---------------------------------------------------------------------------


def table_potential(P: DiscreteMeasure, values) -> Potential:
    """phi0 on P's support by exact lookup; other points raise KeyError."""
    values = np.asarray(values, dtype=float)
    index = {tuple(x): i for i, x in enumerate(P.points)}

    def phi0(points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty(pts.shape[0])
        for r, x in enumerate(pts):
            i = index.get(tuple(x))
            if i is None or math.isnan(values[i]):
                raise KeyError(f"potential undefined at {x.tolist()}")
            out[r] = values[i]
        return out

    return phi0


def conjugate_potential(P: DiscreteMeasure, z) -> Potential:
    """psi0(y) = max_j (x_j . y - z_j) for a finitely supported P."""
    z = np.asarray(z, dtype=float)
    use = ~np.isnan(z)
    X, zz = P.points[use], z[use]

    def psi0(points):
        return (np.atleast_2d(np.asarray(points, dtype=float)) @ X.T - zz).max(axis=1)

    return psi0


def grid_conjugate(grid, psi_grid) -> Potential:
    """Approximate phi0(x) = sup_y (x . y - psi0(y)) by a max over grid points."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    psi_grid = np.asarray(psi_grid, dtype=float)

    def phi0(points):
        return (np.atleast_2d(np.asarray(points, dtype=float)) @ grid.T - psi_grid).max(axis=1)

    phi0.grid_size = grid.shape[0]
    return phi0


# ---------------------------------------------------------------------------
# linearization residuals
# ---------------------------------------------------------------------------


def _linear_term(M: DiscreteMeasure, pot: Potential) -> float:
    vals = np.asarray(pot(M.points), dtype=float)
    if vals.shape != (M.k,) or not np.all(np.isfinite(vals)):
        raise ValueError("potential is not finite at every sample point")
    return float(M.weights @ (M.sq_norms - 2.0 * vals))


def residual_one_sample(w2sq_pn_q: float, P_n: DiscreteMeasure, phi0: Potential) -> float:
    """R_n = W2^2(P_n, Q) - int (||x||^2 - 2 phi0(x)) dP_n."""
    return float(w2sq_pn_q - _linear_term(P_n, phi0))


def residual_two_sample(w2sq: float, P_n: DiscreteMeasure, Q_m: DiscreteMeasure,
                        phi0: Potential, psi0: Potential) -> float:
    """R_{n,m} = W2^2(P_n, Q_m) - int (||x||^2 - 2 phi0) dP_n - int (||y||^2 - 2 psi0) dQ_m."""
    return float(w2sq - _linear_term(P_n, phi0) - _linear_term(Q_m, psi0))


# ---------------------------------------------------------------------------
# confidence intervals
# ---------------------------------------------------------------------------


def align_to_support(P: DiscreteMeasure, sample: DiscreteMeasure) -> DiscreteMeasure:
    """Empirical frequencies of ``sample`` on P's support (zero where unseen)."""
    if sample.dim != P.dim:
        raise ValueError(f"dimension mismatch: P has dimension {P.dim}, sample has {sample.dim}")
    index = {tuple(x): i for i, x in enumerate(P.points)}
    w = np.zeros(P.k)
    for x, wx in zip(sample.points, sample.weights):
        i = index.get(tuple(x))
        if i is None:
            raise ValueError(f"sample point {x.tolist()} is not in P's support")
        w[i] += wx
    return DiscreteMeasure(P.points, w, n_obs=_n_obs(sample))


def one_sample_ci(estimate: float, sigma2: VarianceEstimate, n: int, alpha: float,
                  degenerate: bool) -> tuple[float, float]:
    if degenerate:
        return (estimate, estimate)
    h = normal_quantile(1 - alpha / 2) * math.sqrt(sigma2.sigma2 / n)
    return (estimate - h, estimate + h)


def clt_one_sample(P: DiscreteMeasure, Q: SamplableMeasure, sample: DiscreteMeasure,
                   pot: PotentialVector, alpha: float = 0.05, *, cfg: SolverConfig | None = None,
                   seed: SeedSpec | int = 0, true_w2sq: float | None = None,
                   pool: MonteCarloBatch | None = None, eval_batch: MonteCarloBatch | None = None,
                   m2q: tuple[float, float] | None = None) -> CltReport:
    """CI for W2^2(P, Q) from n draws of a finitely supported P.

    The estimate W2^2(P_n, Q) comes from re-solving against the empirical
    frequencies (warm-started at ``pot``); sigma^2 is the plug-in variance at
    the empirical frequencies and potential.
    """
    if not pot.converged:
        raise NonConvergenceError("population potential did not converge; refusing inference")
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    cfg = cfg or SolverConfig()
    P_n = align_to_support(P, sample)
    n = _n_obs(P_n)
    warm = np.where(P_n.weights > 0, np.nan_to_num(pot.z, nan=0.0), np.nan)
    pot_n = solve_semidiscrete(P_n, Q, cfg, seed, warm_start=warm, pool=pool,
                               eval_batch=eval_batch, m2q=m2q)
    if not pot_n.converged:
        raise NonConvergenceError("empirical re-solve did not converge")
    if eval_batch is not None and m2q is not None:
        est = w2_at_solution(P_n, pot_n, m2q)
    else:
        est = w2_semidiscrete(P_n, Q, pot_n, cfg.eval_mc, seed, batch=eval_batch, m2q=m2q)
    s2 = sigma2_plugin(P_n, pot_n.z)
    degenerate = is_degenerate(s2.sigma2, P_n)
    ci = one_sample_ci(est.w2sq, s2, n, alpha, degenerate)
    return CltReport(est.w2sq, "true-w2sq", s2, ci, alpha, n, degenerate=degenerate,
                     center_value=true_w2sq,
                     extra={"se_mc": est.se, "z": pot_n.to_dict()["z"]})


def clt_two_sample(P_n: DiscreteMeasure, Q_m: DiscreteMeasure, sigma2_pq: VarianceEstimate,
                   sigma2_qp: VarianceEstimate, alpha: float = 0.05,
                   w2sq: float | None = None) -> CltReport:
    """Two-sample CLT interval with effective variance
    (1 - lambda) sigma^2(P, Q) + lambda sigma^2(Q, P), lambda = n / (n + m)."""
    n, m = _n_obs(P_n), _n_obs(Q_m)
    if n < 2 or m < 2:
        raise ValueError("two-sample CLT needs n, m >= 2")
    lam = n / (n + m)
    eff = (1 - lam) * sigma2_pq.sigma2 + lam * sigma2_qp.sigma2
    if w2sq is None:
        w2sq = w2_exact(P_n, Q_m).cost
    scale = n * m / (n + m)
    ref = (1 - lam) * float(P_n.weights @ P_n.sq_norms**2) + lam * float(Q_m.weights @ Q_m.sq_norms**2)
    degenerate = eff <= DEGENERATE_RTOL * (1.0 + ref)
    if degenerate:
        ci = (w2sq, w2sq)
    else:
        h = normal_quantile(1 - alpha / 2) * math.sqrt(eff / scale)
        ci = (w2sq - h, w2sq + h)
    se = math.hypot((1 - lam) * sigma2_pq.se, lam * sigma2_qp.se)
    return CltReport(w2sq, "empirical-mean", VarianceEstimate(eff, "potential-plugin", se), ci,
                     alpha, n, m=m, lam=lam, degenerate=degenerate,
                     extra={"sigma2_pq": sigma2_pq.sigma2, "sigma2_qp": sigma2_qp.sigma2,
                            "scale": scale})

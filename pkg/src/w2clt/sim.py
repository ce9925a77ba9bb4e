"""Monte Carlo replication engine.

Each replication ``r`` draws its data from stream ``r`` of the root seed
(substream = schedule position).  Solver randomness (phase-1 draws, the
sample-average pool, the evaluation batch) comes from one shared stream, so
all replications of an experiment see common random numbers and the Monte
Carlo error of the solver is nearly identical across them.  Results are
reduced in (schedule position, replication index) order, so the worker count
never changes the output.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import multiprocessing as mp
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import kolmogorov
from scipy.stats import norm

from .exact_ot import w2_exact
from .inference import (NonConvergenceError, clt_one_sample, conjugate_potential,
                        efron_stein_constant, is_degenerate, residual_one_sample,
                        residual_two_sample, sigma2_plugin, table_potential)
from .measures import (DiscreteMeasure, SamplableMeasure, SeedSpec, measure_from_spec,
                       measure_to_spec, moment)
from .semidiscrete import (MonteCarloBatch, SolverConfig, center_potentials, second_moment,
                           solve_semidiscrete, w2_at_solution,
                           w2_semidiscrete)

KINDS = ("clt-one-sample", "clt-two-sample", "es-bound", "linearization", "potential-stability")

SHARED_STREAM = 2**32          # solver randomness shared by all replications
AUX_STREAM = 2**32 + 1         # experiment-level auxiliary samples
EXCLUSION_LIMIT = 0.05

DEFAULT_OPTIONS = {
    "w2_mc": 1_000_000,        # common evaluation batch for W2^2 estimates
    "es_sample": 2_000,        # sample size behind the Efron-Stein constants
    "ref_size": 2_000,         # reference samples for two-sample plug-in variances
    "grid_size": 10_000,       # Q-grid for the L2(Q) potential deviation
    "limit_n": 100_000,        # large-n surrogate in potential-stability (0 disables)
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    kind: str
    p: dict
    q: dict
    n: list[int]
    replications: int
    seed: int
    m: list[int] | None = None
    alpha: float = 0.05
    solver: SolverConfig = field(default_factory=SolverConfig)
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        self.n = [int(v) for v in self.n]
        if not self.n or any(v < 1 for v in self.n):
            raise ConfigError("n schedule must be a nonempty list of positive counts")
        if any(b <= a for a, b in zip(self.n, self.n[1:])):
            raise ConfigError("n schedule must be strictly increasing")
        if self.m is not None:
            self.m = [int(v) for v in self.m]
            if len(self.m) != len(self.n) or any(v < 1 for v in self.m):
                raise ConfigError("m schedule must match the n schedule in length")
            if any(b <= a for a, b in zip(self.m, self.m[1:])):
                raise ConfigError("m schedule must be strictly increasing")
        if int(self.replications) < 2:
            raise ConfigError("replications must be at least 2")
        self.replications = int(self.replications)
        if not 0 < float(self.alpha) < 1:
            raise ConfigError("alpha must be in (0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        self.seed = int(self.seed)
        unknown = set(self.options) - set(DEFAULT_OPTIONS)
        if unknown:
            raise ConfigError(f"unknown options: {sorted(unknown)}")
        self.options = {**DEFAULT_OPTIONS, **self.options}
        try:
            self.P = measure_from_spec(self.p)
            self.Q = measure_from_spec(self.q)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.P.dim != self.Q.dim:
            raise ConfigError(f"dimension mismatch: P has dimension {self.P.dim}, "
                              f"Q has dimension {self.Q.dim}")
        self._check_kind()

    def _check_kind(self):
        finite_p = isinstance(self.P, DiscreteMeasure)
        smooth_q = isinstance(self.Q, SamplableMeasure)
        two = self.m is not None
        if self.kind == "clt-one-sample" or self.kind == "potential-stability":
            if two or not finite_p or not smooth_q:
                raise ConfigError(f"{self.kind} needs a finitely supported P, a samplable Q and no m")
        elif self.kind == "clt-two-sample":
            if not two:
                raise ConfigError("clt-two-sample needs an m schedule")
        elif self.kind == "es-bound":
            if not two and not (finite_p and smooth_q):
                raise ConfigError("one-sample es-bound needs a finitely supported P and a samplable Q")
        elif self.kind == "linearization":
            if not finite_p or not smooth_q:
                raise ConfigError("linearization needs a finitely supported P and a samplable Q")

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        required = ("kind", "p", "q", "n", "replications", "seed")
        missing = [k for k in required if k not in obj]
        if missing:
            raise ConfigError(f"experiment config missing {missing}")
        known = set(required) | {"m", "alpha", "solver", "options"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            solver = SolverConfig.from_dict(obj.pop("solver", None))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(solver=solver, **obj)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "p": measure_to_spec(self.P) if isinstance(self.P, DiscreteMeasure) else self.p,
            "q": measure_to_spec(self.Q) if isinstance(self.Q, DiscreteMeasure) else self.q,
            "n": list(self.n),
            "m": None if self.m is None else list(self.m),
            "replications": self.replications,
            "seed": self.seed,
            "alpha": self.alpha,
            "solver": self.solver.to_dict(),
            "options": dict(self.options),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def data_rng(self, r: int, i: int, which: int = 0) -> np.random.Generator:
        return SeedSpec(self.seed, r).generator(i, which)

    @property
    def shared_seed(self) -> SeedSpec:
        return SeedSpec(self.seed, SHARED_STREAM)

    @property
    def aux_seed(self) -> SeedSpec:
        return SeedSpec(self.seed, AUX_STREAM)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def ks_normal(x) -> tuple[float, float]:
    """KS statistic of the studentized sample against N(0, 1) and its
    asymptotic p-value P(K > sqrt(R) D)."""
    x = np.asarray(x, dtype=float)
    R = x.size
    if R < 2:
        return float("nan"), float("nan")
    sd = x.std(ddof=1)
    if sd == 0:
        return 1.0, 0.0
    u = np.sort(norm.cdf((x - x.mean()) / sd))
    i = np.arange(1, R + 1)
    D = float(max(np.max(i / R - u), np.max(u - (i - 1) / R)))
    return D, float(kolmogorov(math.sqrt(R) * D))


def normality_summary(x) -> dict:
    x = np.asarray(x, dtype=float)
    R = x.size
    c = x - x.mean()
    m2 = float(np.mean(c**2))
    if R < 3 or m2 == 0:
        skew = kurt = float("nan")
    else:
        skew = float(np.mean(c**3) / m2**1.5)
        kurt = float(np.mean(c**4) / m2**2 - 3.0)
    D, p = ks_normal(x)
    return {
        "skewness": skew,
        "skewness_z": skew / math.sqrt(6.0 / R) if R > 0 else float("nan"),
        "excess_kurtosis": kurt,
        "kurtosis_z": kurt / math.sqrt(24.0 / R) if R > 0 else float("nan"),
        "ks_statistic": D,
        "ks_pvalue": p,
    }


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

BASE_COLUMNS = ("index", "n", "m", "statistic", "w2sq", "converged")


@dataclass
class ExperimentReport:
    kind: str
    rows: list[dict]
    summary: dict
    wall_clock: float
    provenance: dict

    def raw_csv(self) -> str:
        extras = sorted({k for row in self.rows for k in row} - set(BASE_COLUMNS))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(BASE_COLUMNS) + extras)
        for row in self.rows:
            w.writerow([_fmt(row.get(c)) for c in list(BASE_COLUMNS) + extras])
        return buf.getvalue()

    def summary_json(self) -> str:
        body = {"kind": self.kind, "provenance": self.provenance, **self.summary}
        return json.dumps(_clean(body), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "raw.csv").write_text(self.raw_csv())
        (out / "summary.json").write_text(self.summary_json())
        (out / "timing.json").write_text(json.dumps({"wall_clock_s": self.wall_clock}) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# experiment kinds
# ---------------------------------------------------------------------------


class _SemiDiscreteContext:
    """Population solve and shared Monte Carlo batches for a finite P."""

    def __init__(self, cfg: ExperimentConfig):
        P, Q, s = cfg.P, cfg.Q, cfg.solver
        self.cfg = cfg
        seed = cfg.shared_seed
        self.m2q = second_moment(Q, s, seed)
        self.pool = MonteCarloBatch.draw(P.points, Q, s.saa_mc, seed.generator(2), s.antithetic)
        self.eval_batch = MonteCarloBatch.draw(P.points, Q, int(cfg.options["w2_mc"]),
                                               seed.generator(3), s.antithetic)
        self.pot = solve_semidiscrete(P, Q, s, seed, pool=self.pool, eval_batch=self.eval_batch,
                                      m2q=self.m2q)
        self.w2_true = w2_semidiscrete(P, Q, self.pot, 0, seed, batch=self.eval_batch,
                                       m2q=self.m2q).w2sq
        self.sigma2 = sigma2_plugin(P, self.pot.z).sigma2

    def empirical(self, n: int, rng: np.random.Generator) -> DiscreteMeasure:
        P = self.cfg.P
        counts = np.bincount(rng.choice(P.k, size=n, p=P.weights), minlength=P.k)
        return DiscreteMeasure(P.points, counts / n, n_obs=n)

    def resolve(self, P_n: DiscreteMeasure):
        warm = np.where(P_n.weights > 0, np.nan_to_num(self.pot.z, nan=0.0), np.nan)
        pot = solve_semidiscrete(P_n, self.cfg.Q, self.cfg.solver, self.cfg.shared_seed,
                                 warm_start=warm, pool=self.pool, eval_batch=self.eval_batch,
                                 m2q=self.m2q)
        return pot, w2_at_solution(P_n, pot, self.m2q).w2sq

    def population_summary(self) -> dict:
        return {"w2sq_population": self.w2_true, "sigma2_population": self.sigma2,
                "z_population": self.pot.to_dict()["z"],
                "population_converged": self.pot.converged}


def _draw_empirical(M, n: int, rng: np.random.Generator) -> DiscreteMeasure:
    if isinstance(M, DiscreteMeasure):
        counts = np.bincount(rng.choice(M.k, size=n, p=M.weights), minlength=M.k)
        keep = counts > 0
        return DiscreteMeasure(M.points[keep], counts[keep] / n, n_obs=n)
    return DiscreteMeasure(M.draw(n, rng), None, n_obs=n)


# --- one-sample CLT ---------------------------------------------------------


class CltOneSample:
    def __init__(self, cfg):
        self.cfg = cfg
        self.ctx = _SemiDiscreteContext(cfg)
        if not self.ctx.pot.converged:
            raise NonConvergenceError("population potential did not converge")

    def replicate(self, r, i):
        cfg, ctx = self.cfg, self.ctx
        n = cfg.n[i]
        P_n = ctx.empirical(n, cfg.data_rng(r, i))
        try:
            rep = clt_one_sample(cfg.P, cfg.Q, P_n, ctx.pot, cfg.alpha, cfg=cfg.solver,
                                 seed=cfg.shared_seed, true_w2sq=ctx.w2_true, pool=ctx.pool,
                                 eval_batch=ctx.eval_batch, m2q=ctx.m2q)
        except NonConvergenceError:
            return {"converged": False}
        return {"converged": True, "w2sq": rep.estimate,
                "statistic": math.sqrt(n) * (rep.estimate - ctx.w2_true),
                "covered": rep.covers(ctx.w2_true), "sigma2_hat": rep.sigma2.sigma2,
                "degenerate": rep.degenerate}

    def summarize(self, i, rows):
        ctx = self.ctx
        T = np.array([r["statistic"] for r in rows])
        s2 = ctx.sigma2
        degenerate = is_degenerate(s2, self.cfg.P)
        out = {"var_statistic": float(T.var(ddof=1)), "mean_statistic": float(T.mean()),
               "sigma2_population": s2,
               "var_ratio": float(T.var(ddof=1) / s2) if s2 > 0 else None,
               "coverage": float(np.mean([r["covered"] for r in rows])),
               "degenerate": degenerate, "max_abs_statistic": float(np.max(np.abs(T)))}
        if not degenerate:
            out.update(normality_summary(T))
        return out

    def extra_summary(self):
        return self.ctx.population_summary()


# --- two-sample CLT ---------------------------------------------------------


def reference_plugin(P, Q, size: int, seed: SeedSpec):
    """sigma^2(P, Q), sigma^2(Q, P) from the dual of an exact solve between
    reference samples of P and Q."""
    P_ref = _draw_empirical(P, size, seed.generator(11))
    Q_ref = _draw_empirical(Q, size, seed.generator(12))
    res = w2_exact(P_ref, Q_ref)
    return sigma2_plugin(P_ref, res.dual.phi).sigma2, sigma2_plugin(Q_ref, res.dual.psi).sigma2


class CltTwoSample:
    def __init__(self, cfg):
        self.cfg = cfg
        self.s2_pq, self.s2_qp = reference_plugin(cfg.P, cfg.Q, int(cfg.options["ref_size"]),
                                                  cfg.aux_seed)

    def replicate(self, r, i):
        cfg = self.cfg
        n, m = cfg.n[i], cfg.m[i]
        P_n = _draw_empirical(cfg.P, n, cfg.data_rng(r, i, 0))
        Q_m = _draw_empirical(cfg.Q, m, cfg.data_rng(r, i, 1))
        w2 = w2_exact(P_n, Q_m).cost
        return {"converged": True, "w2sq": w2, "statistic": math.sqrt(n * m / (n + m)) * w2}

    def summarize(self, i, rows):
        cfg = self.cfg
        n, m = cfg.n[i], cfg.m[i]
        lam = n / (n + m)
        eff = (1 - lam) * self.s2_pq + lam * self.s2_qp
        W = np.array([r["w2sq"] for r in rows])
        scale = n * m / (n + m)
        scaled_var = float(scale * W.var(ddof=1))
        ref = (1 - lam) * _fourth(cfg.P) + lam * _fourth(cfg.Q)
        degenerate = eff <= 1e-4 * (1.0 + ref)
        half = float(norm.ppf(1 - cfg.alpha / 2) * math.sqrt(eff / scale))
        center = float(W.mean())
        out = {"lambda": lam, "sigma2_pq": self.s2_pq, "sigma2_qp": self.s2_qp,
               "effective_variance": eff, "scaled_variance": scaled_var,
               "var_ratio": scaled_var / eff if eff > 0 else None,
               "mean_w2sq": center, "degenerate": degenerate,
               "coverage": float(np.mean(np.abs(W - center) <= half))}
        if not degenerate:
            out.update(normality_summary(W))
        return out

    def extra_summary(self):
        return {}


def _fourth(M) -> float:
    return moment(M, 4, mc_samples=200_000, seed=0).value


# --- Efron-Stein bound ------------------------------------------------------


class EsBound:
    def __init__(self, cfg):
        self.cfg = cfg
        size = int(cfg.options["es_sample"])
        P_s = _draw_empirical(cfg.P, size, cfg.aux_seed.generator(21))
        self.c_pq = efron_stein_constant(P_s, cfg.Q, seed=cfg.aux_seed.with_stream(AUX_STREAM + 1))
        self.c_qp = None
        if cfg.m is not None:
            Q_s = _draw_empirical(cfg.Q, size, cfg.aux_seed.generator(22))
            self.c_qp = efron_stein_constant(Q_s, cfg.P, seed=cfg.aux_seed.with_stream(AUX_STREAM + 2))
            self.ctx = None
        else:
            self.ctx = _SemiDiscreteContext(cfg)

    def replicate(self, r, i):
        cfg = self.cfg
        n = cfg.n[i]
        if cfg.m is None:
            P_n = self.ctx.empirical(n, cfg.data_rng(r, i))
            pot, w2 = self.ctx.resolve(P_n)
            return {"converged": pot.converged, "w2sq": w2, "statistic": w2}
        m = cfg.m[i]
        P_n = _draw_empirical(cfg.P, n, cfg.data_rng(r, i, 0))
        Q_m = _draw_empirical(cfg.Q, m, cfg.data_rng(r, i, 1))
        w2 = w2_exact(P_n, Q_m).cost
        return {"converged": True, "w2sq": w2, "statistic": w2}

    def summarize(self, i, rows):
        cfg = self.cfg
        n = cfg.n[i]
        W = np.array([r["w2sq"] for r in rows])
        var = float(W.var(ddof=1))
        if cfg.m is None:
            return {"variance": var, "n_variance": n * var, "c_pq": self.c_pq.c_pq,
                    "bound": self.c_pq.bound(n), "holds": bool(var <= self.c_pq.bound(n))}
        m = cfg.m[i]
        bound = self.c_pq.bound(n) + self.c_qp.bound(m)
        return {"variance": var, "c_pq": self.c_pq.c_pq, "c_qp": self.c_qp.c_pq,
                "bound": bound, "holds": bool(var <= bound)}

    def extra_summary(self):
        out = {"c_pq": self.c_pq.to_dict()}
        if self.c_qp is not None:
            out["c_qp"] = self.c_qp.to_dict()
        return out


# --- linearization residuals -------------------------------------------------


class Linearization:
    def __init__(self, cfg):
        self.cfg = cfg
        self.ctx = _SemiDiscreteContext(cfg)
        if not self.ctx.pot.converged:
            raise NonConvergenceError("population potential did not converge")
        self.phi0 = table_potential(cfg.P, self.ctx.pot.z)
        self.psi0 = conjugate_potential(cfg.P, self.ctx.pot.z)

    def replicate(self, r, i):
        cfg, ctx = self.cfg, self.ctx
        n = cfg.n[i]
        if cfg.m is None:
            P_n = ctx.empirical(n, cfg.data_rng(r, i))
            pot, w2 = ctx.resolve(P_n)
            if not pot.converged:
                return {"converged": False}
            P_seen = _drop_zero(P_n)
            return {"converged": True, "w2sq": w2,
                    "statistic": residual_one_sample(w2, P_seen, self.phi0)}
        m = cfg.m[i]
        P_n = _drop_zero(ctx.empirical(n, cfg.data_rng(r, i, 0)))
        Q_m = _draw_empirical(cfg.Q, m, cfg.data_rng(r, i, 1))
        w2 = w2_exact(P_n, Q_m).cost
        return {"converged": True, "w2sq": w2,
                "statistic": residual_two_sample(w2, P_n, Q_m, self.phi0, self.psi0)}

    def summarize(self, i, rows):
        cfg = self.cfg
        n = cfg.n[i]
        R = np.array([r["statistic"] for r in rows])
        scale = n if cfg.m is None else n * cfg.m[i] / (n + cfg.m[i])
        return {"scale": scale, "var_residual": float(R.var(ddof=1)),
                "scaled_var_residual": float(scale * R.var(ddof=1)),
                "mean_residual": float(R.mean())}

    def extra_summary(self):
        return self.ctx.population_summary()


def _drop_zero(P_n: DiscreteMeasure) -> DiscreteMeasure:
    keep = P_n.weights > 0
    if keep.all():
        return P_n
    return DiscreteMeasure(P_n.points[keep], P_n.weights[keep], n_obs=P_n.n_obs)


# --- potential stability -----------------------------------------------------


class PotentialStability:
    def __init__(self, cfg):
        self.cfg = cfg
        self.ctx = _SemiDiscreteContext(cfg)
        if not self.ctx.pot.converged:
            raise NonConvergenceError("population potential did not converge")
        grid_n = int(cfg.options["grid_size"])
        self.grid = cfg.Q.draw(grid_n, cfg.aux_seed.generator(31))
        self.zstar = self.ctx.pot.z
        self.psi_star = self.grid @ cfg.P.points.T - self.zstar

    def deviation(self, P_n: DiscreteMeasure) -> dict:
        pot, _ = self.ctx.resolve(P_n)
        act = ~np.isnan(pot.z)
        zc = center_potentials(pot.z, P_n, "match-reference", z_ref=self.zstar)
        p = P_n.weights[act] / P_n.weights[act].sum()
        d = zc[act] - self.zstar[act]
        u = pot.z[act] - self.zstar[act]
        psi_n = (self.grid @ self.cfg.P.points[act].T - zc[act]).max(axis=1)
        psi_s = self.psi_star[:, act].max(axis=1) if act.all() else self.psi_star.max(axis=1)
        return {"converged": pot.converged,
                "deviation_inf": float(np.max(np.abs(d))),
                "deviation_l2p": float(p @ d**2),
                "uncentered_l2p": float(p @ u**2),
                "deviation_l2q": float(np.mean((psi_n - psi_s) ** 2))}

    def replicate(self, r, i):
        cfg = self.cfg
        P_n = self.ctx.empirical(cfg.n[i], cfg.data_rng(r, i))
        dev = self.deviation(P_n)
        return {**dev, "statistic": dev["deviation_inf"]}

    def summarize(self, i, rows):
        return {"median_deviation_inf": float(np.median([r["deviation_inf"] for r in rows])),
                "median_deviation_l2q": float(np.median([r["deviation_l2q"] for r in rows])),
                "median_deviation_l2p": float(np.median([r["deviation_l2p"] for r in rows]))}

    def extra_summary(self):
        out = self.ctx.population_summary()
        limit_n = int(self.cfg.options["limit_n"])
        if limit_n > 0:
            P_n = self.ctx.empirical(limit_n, SeedSpec(self.cfg.seed, AUX_STREAM).generator(41))
            dev = self.deviation(P_n)
            thr = 3.0 * self.cfg.solver.tol_grad
            out["limit"] = {"n": limit_n, **dev, "threshold": thr,
                            "holds": bool(dev["deviation_inf"] <= thr)}
        return out


RUNNERS = {
    "clt-one-sample": CltOneSample,
    "clt-two-sample": CltTwoSample,
    "es-bound": EsBound,
    "linearization": Linearization,
    "potential-stability": PotentialStability,
}


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

_ACTIVE = None  # runner inherited by forked workers


def _task(args):
    r, i = args
    return _ACTIVE.replicate(r, i)


def _summary_for(runner, cfg, i, rows):
    attempted = len(rows)
    ok = [r for r in rows if r.get("converged")]
    excluded = attempted - len(ok)
    head = {"n": cfg.n[i], "m": None if cfg.m is None else cfg.m[i], "attempted": attempted,
            "recorded": len(ok), "excluded": excluded,
            "failed": excluded > EXCLUSION_LIMIT * attempted}
    if len(ok) >= 2:
        head.update(runner.summarize(i, ok))
    return head


def run_experiment(cfg: ExperimentConfig | dict, threads: int = 1) -> ExperimentReport:
    """Run every (schedule entry, replication) pair and summarize."""
    global _ACTIVE
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    t0 = time.perf_counter()
    runner = RUNNERS[cfg.kind](cfg)
    tasks = [(r, i) for i in range(len(cfg.n)) for r in range(cfg.replications)]
    threads = max(1, int(threads))
    if threads == 1 or len(tasks) < 2:
        results = [runner.replicate(r, i) for r, i in tasks]
    else:
        _ACTIVE = runner
        try:
            ctx = mp.get_context("fork")
            with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as ex:
                results = list(ex.map(_task, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
        finally:
            _ACTIVE = None

    rows = []
    for (r, i), res in zip(tasks, results):
        row = {"index": r, "n": cfg.n[i], "m": None if cfg.m is None else cfg.m[i],
               "statistic": None, "w2sq": None}
        row.update(res)
        rows.append(row)

    per_n = []
    for i in range(len(cfg.n)):
        per_n.append(_summary_for(runner, cfg, i, [row for row in rows if row["n"] == cfg.n[i]]))
    summary = {"schedule": per_n, **runner.extra_summary()}
    summary["attempted"] = len(rows)
    summary["excluded"] = sum(1 for r in rows if not r.get("converged"))
    summary["failed"] = any(s["failed"] for s in per_n)
    provenance = {"root_seed": cfg.seed, "shared_stream": SHARED_STREAM,
                  "replication_streams": f"0..{cfg.replications - 1}",
                  "config_hash": cfg.config_hash(), "config": cfg.to_dict()}
    return ExperimentReport(cfg.kind, rows, summary, time.perf_counter() - t0, provenance)


def default_threads() -> int:
    return os.cpu_count() or 1

"""Semi-discrete quadratic transport between a finitely supported P and a
samplable Q, through the convex dual

    V(z) = sum_i p_i z_i + E max_j (x_j . Y - z_j),   Y ~ Q,

whose gradient is p - (Q(A_1(z)), ..., Q(A_k(z))) with Laguerre cells
A_j(z) = {y : x_j . y - z_j beats every other index}.  The minimizer is
unique up to an additive constant when Q has a positive density on the
interior of its convex support; the normalized representative satisfies
sum_i p_i (z_i + ||x_i||^2 / 2) = M with M = max_i ||x_i||^2 + E||Y||^2.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np

from .measures import DiscreteMeasure, SamplableMeasure, SeedSpec, as_seed, draw_antithetic, moment

# substream ids under a solver seed
_PHASE1, _POOL, _EVAL, _MOMENT = 1, 2, 3, 4

_SCORE_CACHE_LIMIT = 40_000_000  # floats kept in memory for a cached score matrix


class NonConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SolverConfig:
    tol_grad: float = 5e-4
    eval_mc: int = 100_000
    max_iters: int = 100_000          # phase-1 SGD steps for a cold start
    warm_iters: int = 1_000           # phase-1 SGD steps when warm-started
    refine_iters: int = 500           # phase-2 iterations
    saa_mc: int = 200_000             # phase-2 sample pool
    step_c: float = 1.0
    step_t0: float = 100.0
    moment_mc: int = 1_000_000        # only for families without a closed-form second moment
    antithetic: bool = True

    def __post_init__(self):
        if self.tol_grad <= 0:
            raise ValueError("tol_grad must be positive")
        for name in ("eval_mc", "saa_mc", "moment_mc"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be at least 2")
        for name in ("max_iters", "warm_iters", "refine_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.step_c <= 0 or self.step_t0 < 0:
            raise ValueError("step_c must be positive and step_t0 nonnegative")

    @classmethod
    def from_dict(cls, obj: dict | None) -> "SolverConfig":
        obj = dict(obj or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown solver options: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Monte Carlo batches
# ---------------------------------------------------------------------------


class Evaluation(NamedTuple):
    value: float         # V-hat(z)
    se: float            # Monte Carlo standard error of value
    grad: np.ndarray     # p - hit fractions
    grad_se: np.ndarray  # standard error of each hit fraction
    hits: np.ndarray     # hit fractions per cell


class MonteCarloBatch:
    """Fixed sample of Q with precomputed scores ``Y @ X.T``.

    Reflected (antithetic) pairs, when present, are averaged pairwise before
    standard errors are computed.
    """

    def __init__(self, X: np.ndarray, Y: np.ndarray, paired: bool):
        self.X = np.asarray(X, dtype=float)
        self.Y = Y
        self.paired = paired
        self.n = Y.shape[0]
        self.half = self.n // 2 if paired else 0
        size = self.n * self.X.shape[0]
        self._scores = Y @ self.X.T if size <= _SCORE_CACHE_LIMIT else None

    @classmethod
    def draw(cls, X, Q: SamplableMeasure, n: int, rng: np.random.Generator, antithetic: bool = True):
        Y, paired = draw_antithetic(Q, n, rng, antithetic)
        return cls(X, Y, paired)

    def _chunks(self, cols):
        if self._scores is not None:
            S = self._scores if cols is None else self._scores[:, cols]
            yield 0, S
            return
        X = self.X if cols is None else self.X[cols]
        step = max(1, _SCORE_CACHE_LIMIT // (4 * X.shape[0]))
        for s in range(0, self.n, step):
            yield s, self.Y[s:s + step] @ X.T

    def psi(self, z: np.ndarray, cols=None) -> tuple[np.ndarray, np.ndarray]:
        """max_j (x_j . y - z_j) and its argmax (lowest index on ties) per sample."""
        vals = np.empty(self.n)
        idx = np.empty(self.n, dtype=np.int64)
        for s, S in self._chunks(cols):
            T = S - z
            j = np.argmax(T, axis=1)
            idx[s:s + T.shape[0]] = j
            vals[s:s + T.shape[0]] = T[np.arange(T.shape[0]), j]
        return vals, idx

    def _pair_mean(self, v: np.ndarray) -> np.ndarray:
        if not self.paired:
            return v
        h = self.half
        pm = (v[:h] + v[h:2 * h]) / 2
        return pm if self.n == 2 * h else np.concatenate([pm, v[2 * h:]])

    def _se(self, v: np.ndarray) -> float:
        u = self._pair_mean(v)
        return float(u.std(ddof=1) / math.sqrt(u.size)) if u.size > 1 else float("inf")

    def evaluate(self, p: np.ndarray, z: np.ndarray, cols=None) -> Evaluation:
        """Estimate V and its gradient at z.

        Computed at z - z[0]: V is invariant under z -> z + c, and this makes
        the estimate bit-identical for any shift applied without rounding.
        """
        k = p.size
        zs = z - z[0]
        vals, idx = self.psi(zs, cols)
        counts = np.bincount(idx, minlength=k)
        hits = counts / self.n
        grad = p - hits
        value = float(p @ zs) + float(vals.mean())
        if self.paired:
            onehot_se = np.array([self._se((idx == j).astype(float)) for j in range(k)]) if k > 1 else np.zeros(1)
        else:
            onehot_se = np.sqrt(hits * (1 - hits) / max(self.n - 1, 1))
        return Evaluation(value, self._se(vals), grad, onehot_se, hits)


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PotentialVector:
    """Dual weights z aligned with P's support (NaN at zero-weight atoms)."""

    z: np.ndarray
    normalized: bool
    M: float
    M_se: float
    v_value: float
    v_se: float
    grad_norm: float
    grad_noise: float
    mc_samples: int
    converged: bool
    diagnostics: dict = field(default_factory=dict)

    @property
    def active(self) -> np.ndarray:
        return ~np.isnan(self.z)

    def to_dict(self) -> dict:
        return {
            "z": [None if math.isnan(v) else float(v) for v in self.z],
            "normalized": self.normalized,
            "M": self.M,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
        }


class LaguerreCell(NamedTuple):
    index: int
    margin: float


class PsiValue(NamedTuple):
    value: float
    cell: LaguerreCell


def second_moment(Q: SamplableMeasure, cfg: SolverConfig, seed: SeedSpec | int | None = None):
    m = moment(Q, 2, mc_samples=cfg.moment_mc, seed=as_seed(seed).generator(_MOMENT).integers(2**63))
    return m.value, m.se


def normalization_constant(P: DiscreteMeasure, m2q: float) -> float:
    active = P.weights > 0
    return float(np.max(P.sq_norms[active]) + m2q)


def center_potentials(z, P: DiscreteMeasure, mode: str = "prop-normalization", *,
                      M: float | None = None, Q: SamplableMeasure | None = None,
                      z_ref=None) -> np.ndarray:
    """Shift z by a constant.

    ``prop-normalization``: the unique shift with
    sum p_i (z_i + ||x_i||^2 / 2) = M (M given, or computed from Q).
    ``match-reference``: the shift minimizing sum p_i (z_i + a - z_ref_i)^2.
    Atoms with zero weight or NaN entries do not take part.
    """
    z = np.asarray(z, dtype=float)
    p = P.weights
    use = (p > 0) & ~np.isnan(z)
    pw = p[use] / p[use].sum()
    if mode == "prop-normalization":
        if M is None:
            if Q is None:
                raise ValueError("prop-normalization needs M or Q")
            M = normalization_constant(P, second_moment(Q, SolverConfig())[0])
        a = M - float(pw @ (z[use] + P.sq_norms[use] / 2))
    elif mode == "match-reference":
        if z_ref is None:
            raise ValueError("match-reference needs z_ref")
        z_ref = np.asarray(z_ref, dtype=float)
        a = float(pw @ (z_ref[use] - z[use]))
    else:
        raise ValueError(f"unknown centering mode {mode!r}")
    return z + a


def psi_eval(P: DiscreteMeasure, z, y) -> PsiValue:
    """psi(y) = max_j (x_j . y - z_j) and the maximizing cell (lowest index
    on ties) with its margin over the runner-up."""
    z = np.asarray(z, dtype=float)
    if z.shape != (P.k,):
        raise ValueError(f"z has shape {z.shape}, expected ({P.k},)")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    s = P.points @ y - z
    s = np.where(np.isnan(s), -np.inf, s)
    j = int(np.argmax(s))
    if P.k > 1:
        rest = np.delete(s, j)
        margin = float(s[j] - rest.max())
    else:
        margin = math.inf
    return PsiValue(float(s[j]), LaguerreCell(j, margin))


def psi_values(P: DiscreteMeasure, z, Y) -> np.ndarray:
    """Vectorized psi over the rows of Y."""
    z = np.asarray(z, dtype=float)
    S = np.atleast_2d(Y) @ P.points.T - np.where(np.isnan(z), np.inf, z)
    return S.max(axis=1)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


class DualObjective(NamedTuple):
    value: float
    grad: np.ndarray
    se: float
    grad_se: np.ndarray


def dual_objective(P: DiscreteMeasure, z, Q: SamplableMeasure, mc: int,
                   seed: SeedSpec | int, antithetic: bool = False) -> DualObjective:
    """Monte Carlo estimate of V(z) and its gradient from ``mc`` draws of Q."""
    z = np.asarray(z, dtype=float)
    if z.shape != (P.k,):
        raise ValueError(f"z has shape {z.shape}, expected ({P.k},)")
    if mc < 1:
        raise ValueError("mc must be positive")
    batch = MonteCarloBatch.draw(P.points, Q, mc, as_seed(seed).generator(_EVAL), antithetic)
    ev = batch.evaluate(P.weights, z)
    return DualObjective(ev.value, ev.grad, ev.se, ev.grad_se)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


def _phase1(Xa: np.ndarray, Q: SamplableMeasure, rng: np.random.Generator, p: np.ndarray,
            z0: np.ndarray, steps: int, t_offset: float, c: float, antithetic: bool,
            chunk: int = 16_384) -> np.ndarray:
    """Averaged SGD: z <- z - c/sqrt(t + t_offset) * (p - e_j(Y_t)), one
    reflected pair of draws per step when Q is symmetric.  Returns the average
    of the iterates over the second half of the run."""
    k = p.size
    z = z0.astype(float).copy()
    if k == 1 or steps == 0:
        return z
    avg = np.zeros(k)
    start_avg = steps // 2
    use_lists = k <= 8
    t = 0
    while t < steps:
        m = min(chunk, steps - t)
        Y, paired = draw_antithetic(Q, 2 * m, rng, antithetic)
        if not paired:
            Y = Y[:m]
        S = Y @ Xa.T
        if use_lists:
            zl, pl, rk = z.tolist(), p.tolist(), range(k)
            al = avg.tolist()
            rows = S.tolist()
            for s in range(m):
                g = c / math.sqrt(t + s + t_offset)
                r1 = rows[s]
                j1 = max(rk, key=lambda j: r1[j] - zl[j])
                if paired:
                    r2 = rows[s + m]
                    j2 = max(rk, key=lambda j: r2[j] - zl[j])
                for j in rk:
                    zl[j] -= g * pl[j]
                if paired:
                    zl[j1] += g / 2
                    zl[j2] += g / 2
                else:
                    zl[j1] += g
                if t + s >= start_avg:
                    for j in rk:
                        al[j] += zl[j]
            z, avg = np.array(zl), np.array(al)
        else:
            for s in range(m):
                g = c / math.sqrt(t + s + t_offset)
                j1 = int(np.argmax(S[s] - z))
                if paired:
                    j2 = int(np.argmax(S[s + m] - z))
                z -= g * p
                if paired:
                    z[j1] += g / 2
                    z[j2] += g / 2
                else:
                    z[j1] += g
                if t + s >= start_avg:
                    avg += z
        t += m
    return avg / (steps - start_avg)


def _phase2(pool: MonteCarloBatch, p, z, cols, iters, target):
    """Gradient descent with backtracking on the sample-average objective."""
    ev = pool.evaluate(p, z, cols)
    step = 1.0
    it = 0
    stalled = False
    for it in range(1, iters + 1):
        g = ev.grad
        gmax = float(np.max(np.abs(g)))
        if gmax <= target:
            it -= 1
            break
        gg = float(g @ g)
        while True:
            z_new = z - step * g
            ev_new = pool.evaluate(p, z_new, cols)
            if ev_new.value <= ev.value - 0.5 * step * gg:
                break
            step *= 0.5
            if step < 1e-10:
                stalled = True
                break
        if stalled:
            break
        z, ev = z_new, ev_new
        step = min(step * 2.0, 1e6)
    return z, ev, it, stalled


def solve_semidiscrete(P: DiscreteMeasure, Q: SamplableMeasure, cfg: SolverConfig | None = None,
                       seed: SeedSpec | int = 0, *, warm_start=None,
                       pool: MonteCarloBatch | None = None,
                       eval_batch: MonteCarloBatch | None = None,
                       m2q: tuple[float, float] | None = None) -> PotentialVector:
    """Minimize V and return the normalized potential vector.

    Phase 1 runs averaged SGD (step c / sqrt(t + t0)) from the power-diagram
    initialization or from ``warm_start``; phase 2 descends the sample-average
    objective on a fixed pool of ``cfg.saa_mc`` draws.  Convergence requires
    the pool gradient below ``tol_grad`` and the gradient on a fresh
    evaluation batch below ``tol_grad`` plus three Monte Carlo standard
    errors.  ``pool`` and ``eval_batch`` may be shared between solves over
    the same support (common random numbers).
    """
    cfg = cfg or SolverConfig()
    seed = as_seed(seed)
    if P.dim != Q.dim:
        raise ValueError(f"dimension mismatch: P has dimension {P.dim}, Q has dimension {Q.dim}")
    X = P.points
    active = P.weights > 0
    cols = None if active.all() else np.flatnonzero(active)
    Xa = X[active]
    p = P.weights[active] / P.weights[active].sum()
    sq = P.sq_norms[active]
    k = p.size

    if m2q is None:
        m2q = second_moment(Q, cfg, seed)
    M = float(sq.max() + m2q[0])

    if warm_start is not None:
        z = np.asarray(warm_start, dtype=float)[active].copy()
        if np.any(np.isnan(z)):
            raise ValueError("warm start has NaN on an active atom")
        steps = cfg.warm_iters
        # a warm start stands in for a completed cold phase 1
        t_offset = cfg.step_t0 + cfg.max_iters
    else:
        z = sq / 2 - float(p @ sq) / 2
        steps = cfg.max_iters
        t_offset = cfg.step_t0

    if k > 1 and steps > 0:
        z = _phase1(Xa, Q, seed.generator(_PHASE1), p, z, steps, t_offset, cfg.step_c,
                    cfg.antithetic)

    if pool is None:
        pool = MonteCarloBatch.draw(X, Q, cfg.saa_mc, seed.generator(_POOL), cfg.antithetic)
    if k > 1:
        z, pool_ev, n2, stalled = _phase2(pool, p, z, cols, cfg.refine_iters, cfg.tol_grad / 4)
        pool_grad = float(np.max(np.abs(pool_ev.grad)))
        pool_se = pool_ev.grad_se
    else:
        n2, stalled, pool_grad, pool_se = 0, False, 0.0, np.zeros(1)

    # normalization: sum p_i (z_i + ||x_i||^2/2) = M
    z = z + (M - float(p @ (z + sq / 2)))
    slack = float(np.min(z + sq / 2))

    if eval_batch is None:
        eval_batch = MonteCarloBatch.draw(X, Q, cfg.eval_mc, seed.generator(_EVAL), cfg.antithetic)
    ev = eval_batch.evaluate(p, z, cols)
    grad_norm = float(np.max(np.abs(ev.grad)))
    # the fresh-batch gradient at the pool optimum carries the sampling error
    # of both batches
    noise = 3.0 * float(np.max(np.hypot(ev.grad_se, pool_se)))
    converged = bool(pool_grad <= cfg.tol_grad and grad_norm <= cfg.tol_grad + noise)

    z_full = np.full(P.k, np.nan)
    z_full[active] = z
    diag = {
        "phase1_steps": int(steps if k > 1 else 0),
        "phase2_iters": int(n2),
        "phase2_stalled": bool(stalled),
        "pool_grad_norm": pool_grad,
        "pool_size": int(pool.n),
        "eval_size": int(eval_batch.n),
        "antithetic": bool(pool.paired),
        "min_slack": slack,
        "slack_ok": bool(slack >= -1e-6),
        "dropped": [int(i) for i in np.flatnonzero(~active)],
    }
    if not diag["slack_ok"]:
        warnings.warn(f"normalized potential violates z_i + |x_i|^2/2 >= 0 (min {slack:.3g})",
                      NonConvergenceWarning, stacklevel=2)
    return PotentialVector(z_full, True, M, float(m2q[1]), ev.value, ev.se, grad_norm,
                           noise, int(eval_batch.n), converged, diag)


class W2Estimate(NamedTuple):
    w2sq: float
    se: float
    warning: str | None


def w2_from_value(P: DiscreteMeasure, m2q: float, m2q_se: float, v_value: float, v_se: float) -> tuple[float, float]:
    m2p = float(P.weights @ P.sq_norms)
    return m2p + m2q - 2.0 * v_value, math.sqrt(4.0 * v_se**2 + m2q_se**2)


def w2_semidiscrete(P: DiscreteMeasure, Q: SamplableMeasure, pot: PotentialVector, mc: int,
                    seed: SeedSpec | int, *, antithetic: bool = True,
                    batch: MonteCarloBatch | None = None,
                    m2q: tuple[float, float] | None = None) -> W2Estimate:
    """W2^2(P, Q) = int ||x||^2 dP + int ||y||^2 dQ - 2 V(z) at the solved z."""
    seed = as_seed(seed)
    z = np.asarray(pot.z, dtype=float)
    active = ~np.isnan(z)
    if np.any(active & (P.weights == 0)) or np.any(~active & (P.weights > 0)):
        raise ValueError("potential does not match P's support")
    cols = None if active.all() else np.flatnonzero(active)
    p = P.weights[active] / P.weights[active].sum()
    if batch is None:
        batch = MonteCarloBatch.draw(P.points, Q, mc, seed.generator(_EVAL), antithetic)
    ev = batch.evaluate(p, z[active], cols)
    if m2q is None:
        m2q = second_moment(Q, SolverConfig(), seed)
    w2, se = w2_from_value(P, m2q[0], m2q[1], ev.value, ev.se)
    warning = None if pot.converged else "potential flagged non-converged"
    if warning:
        warnings.warn(warning, NonConvergenceWarning, stacklevel=2)
    return W2Estimate(w2, se, warning)


def w2_at_solution(P: DiscreteMeasure, pot: PotentialVector, m2q: tuple[float, float]) -> W2Estimate:
    """W2^2 from the dual value the solver already computed on its evaluation
    batch (saves a second pass when that batch is the one wanted)."""
    w2, se = w2_from_value(P, m2q[0], m2q[1], pot.v_value, pot.v_se)
    return W2Estimate(w2, se, None if pot.converged else "potential flagged non-converged")

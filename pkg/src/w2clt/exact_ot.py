"""Exact discrete-discrete quadratic optimal transport.

Primal: minimize sum pi_ij ||x_i - y_j||^2 over couplings.  Duals are
reported in the inner-product form: phi_i + psi_j >= x_i . y_j, with value
J = sum a_i phi_i + sum b_j psi_j equal to the maximal sum pi_ij x_i . y_j.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .measures import DiscreteMeasure, MeasureError

# POT probes every array backend on import; only numpy is used here.
for _key in ("POT_BACKEND_DISABLE_PYTORCH", "POT_BACKEND_DISABLE_JAX",
             "POT_BACKEND_DISABLE_TENSORFLOW", "POT_BACKEND_DISABLE_CUPY"):
    os.environ.setdefault(_key, "1")

import ot  # noqa: E402

BRUTEFORCE_MAX_N = 9
NETWORK_SIMPLEX_MAX_ITER = 100_000_000


class SolverError(RuntimeError):
    """Exact solver failed to reach optimality."""


@dataclass(frozen=True, eq=False)
class TransportPlan:
    source: DiscreteMeasure
    target: DiscreteMeasure
    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray
    cost: float

    def dense(self) -> np.ndarray:
        out = np.zeros((self.source.k, self.target.k))
        np.add.at(out, (self.rows, self.cols), self.mass)
        return out

    @property
    def nnz(self) -> int:
        return int(self.mass.size)

    def recomputed_cost(self) -> float:
        diff = self.source.points[self.rows] - self.target.points[self.cols]
        return float(np.sum(self.mass * np.einsum("ij,ij->i", diff, diff)))


@dataclass(frozen=True, eq=False)
class DualPair:
    phi: np.ndarray
    psi: np.ndarray
    value: float

    def max_violation(self, P: DiscreteMeasure, Q: DiscreteMeasure) -> float:
        """Largest x_i . y_j - phi_i - psi_j (<= 0 when feasible)."""
        return float(np.max(P.points @ Q.points.T - self.phi[:, None] - self.psi[None, :]))

    def to_dict(self) -> dict:
        return {"phi": self.phi.tolist(), "psi": self.psi.tolist(), "value": self.value}


@dataclass(frozen=True, eq=False)
class ExactResult:
    cost: float
    plan: TransportPlan
    dual: DualPair

    def duality_gap(self) -> float:
        """|cost - (int ||x||^2 dP + int ||y||^2 dQ - 2 J)|."""
        P, Q = self.plan.source, self.plan.target
        m2 = float(P.weights @ P.sq_norms + Q.weights @ Q.sq_norms)
        return abs(self.cost - (m2 - 2.0 * self.dual.value))


def _check_dims(P: DiscreteMeasure, Q: DiscreteMeasure) -> None:
    if P.dim != Q.dim:
        raise MeasureError(f"dimension mismatch: P has dimension {P.dim}, Q has dimension {Q.dim}")


def cost_matrix(P: DiscreteMeasure, Q: DiscreteMeasure) -> np.ndarray:
    return cdist(P.points, Q.points, "sqeuclidean")


def w2_exact(P: DiscreteMeasure, Q: DiscreteMeasure) -> ExactResult:
    """W2^2(P, Q) with an optimal vertex plan and an optimal dual pair."""
    _check_dims(P, Q)
    a, b = P.weights, Q.weights
    C = cost_matrix(P, Q)

    if P.k == 1 or Q.k == 1:
        rows, cols = np.nonzero(np.ones((P.k, Q.k), dtype=bool))
        mass = np.outer(a, b).ravel()
        cost = float(np.sum(mass * C.ravel()))
        # the single-point side carries potential 0; the other side is tight everywhere
        inner = P.points @ Q.points.T
        if P.k == 1:
            phi, psi = np.zeros(1), inner[0].copy()
        else:
            phi, psi = inner[:, 0].copy(), np.zeros(1)
    else:
        G, log = ot.emd(a, b, C, numItermax=NETWORK_SIMPLEX_MAX_ITER, log=True)
        if log.get("result_code", 1) != 1:
            raise SolverError(f"network simplex did not reach optimality: {log.get('warning')}")
        rows, cols = np.nonzero(G > 0)
        mass = G[rows, cols]
        cost = float(np.sum(mass * C[rows, cols]))
        # u_i + v_j <= ||x_i - y_j||^2  <=>  phi_i + psi_j >= x_i . y_j
        # with phi_i = (||x_i||^2 - u_i) / 2 and psi_j = (||y_j||^2 - v_j) / 2
        phi = (P.sq_norms - np.asarray(log["u"])) / 2
        psi = (Q.sq_norms - np.asarray(log["v"])) / 2

    value = float(a @ phi + b @ psi)
    plan = TransportPlan(P, Q, rows.astype(np.int64), cols.astype(np.int64), mass, cost)
    return ExactResult(cost, plan, DualPair(phi, psi, value))


def w2_assignment(P: DiscreteMeasure, Q: DiscreteMeasure) -> float:
    """Optimal matching cost for uniform equal-size measures via the
    shortest-augmenting-path assignment solver (cost only)."""
    from scipy.optimize import linear_sum_assignment

    _check_dims(P, Q)
    if P.k != Q.k or not (P.is_uniform and Q.is_uniform):
        raise MeasureError("assignment needs uniform weights and equal counts")
    C = cost_matrix(P, Q)
    r, c = linear_sum_assignment(C)
    return float(C[r, c].mean())


def w2_bruteforce(P: DiscreteMeasure, Q: DiscreteMeasure) -> float:
    """Minimum over all permutations of (1/n) sum ||x_i - y_sigma(i)||^2."""
    _check_dims(P, Q)
    n = P.k
    if Q.k != n:
        raise MeasureError(f"brute force needs equal counts, got {P.k} and {Q.k}")
    if n > BRUTEFORCE_MAX_N:
        raise MeasureError(f"brute force refused for n = {n} > {BRUTEFORCE_MAX_N}")
    if not (P.is_uniform and Q.is_uniform):
        raise MeasureError("brute force needs uniform weights")
    C = cost_matrix(P, Q)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    return float(C[np.arange(n), perms].sum(axis=1).min() / n)


def w2_1d(P: DiscreteMeasure, Q: DiscreteMeasure) -> float:
    """W2^2 in one dimension by integrating the squared difference of the
    quantile functions over the merged weight breakpoints."""
    _check_dims(P, Q)
    if P.dim != 1:
        raise MeasureError(f"w2_1d needs dimension 1, got {P.dim}")
    ip, iq = np.argsort(P.points[:, 0], kind="stable"), np.argsort(Q.points[:, 0], kind="stable")
    xp, wp = P.points[ip, 0], P.weights[ip]
    xq, wq = Q.points[iq, 0], Q.weights[iq]
    cp, cq = np.cumsum(wp), np.cumsum(wq)
    cp[-1] = cq[-1] = 1.0
    t = np.union1d(cp, cq)
    dt = np.diff(np.concatenate(([0.0], t)))
    # quantile on (t_{l-1}, t_l]: first atom whose cumulative weight reaches t_l
    qp = xp[np.minimum(np.searchsorted(cp, t, side="left"), xp.size - 1)]
    qq = xq[np.minimum(np.searchsorted(cq, t, side="left"), xq.size - 1)]
    return float(math.fsum(dt * (qp - qq) ** 2))

"""Probability measures: finitely supported measures, built-in samplable
families, seeded sampling and moment estimates."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np

FAMILIES = (
    "uniform-box",
    "gaussian",
    "gaussian-mixture",
    "uniform-ball",
    "piecewise-uniform-1d",
)

DEFAULT_PAIR_BUDGET = 1_000_000


class MeasureError(ValueError):
    """Invalid measure construction or parameters."""


# ---------------------------------------------------------------------------
# seeds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeedSpec:
    """Root seed plus stream id.

    Every generator is a Philox (counter-based) stream keyed by
    ``(root, stream, *substream)``, so distinct stream ids never overlap and
    the draw at a given index is fixed by the triple.
    """

    root: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= int(self.root) < 2**64):
            raise MeasureError(f"root seed must be a 64-bit unsigned integer, got {self.root}")
        if int(self.stream) < 0:
            raise MeasureError(f"stream id must be nonnegative, got {self.stream}")

    def generator(self, *substream: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.root), spawn_key=(int(self.stream), *map(int, substream)))
        return np.random.Generator(np.random.Philox(ss))

    def with_stream(self, stream: int) -> "SeedSpec":
        return SeedSpec(self.root, stream)


def as_seed(seed: SeedSpec | int | None) -> SeedSpec:
    if seed is None:
        return SeedSpec(0)
    if isinstance(seed, SeedSpec):
        return seed
    return SeedSpec(int(seed))


# ---------------------------------------------------------------------------
# discrete measures
# ---------------------------------------------------------------------------


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finitely supported probability measure.

    ``points`` is (k, d), ``weights`` is (k,).  Duplicate points are merged
    (weights added) keeping first-occurrence order.  ``n_obs`` records the
    number of underlying observations for empirical measures, so that
    ``weights * n_obs`` are integer counts.
    """

    points: np.ndarray
    weights: np.ndarray
    n_obs: int | None = None

    def __init__(self, points, weights=None, n_obs: int | None = None, normalize: bool = False):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise MeasureError(f"points must be a nonempty (k, d) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise MeasureError("points must be finite")
        k = pts.shape[0]
        if weights is None:
            w = np.full(k, 1.0 / k)
        else:
            w = np.asarray(weights, dtype=float).reshape(-1)
            if w.shape[0] != k:
                raise MeasureError(f"{k} points but {w.shape[0]} weights")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise MeasureError("weights must be finite and nonnegative")
        total = math.fsum(w)
        if normalize:
            if total <= 0:
                raise MeasureError("weights sum to zero")
        elif abs(total - 1.0) > 1e-9:
            raise MeasureError(f"weights sum to {total!r}, expected 1")
        w = w / total

        uniq, first, inverse = np.unique(pts, axis=0, return_index=True, return_inverse=True)
        if uniq.shape[0] < k:
            order = np.argsort(first)
            rank = np.empty_like(order)
            rank[order] = np.arange(order.size)
            merged = np.zeros(uniq.shape[0])
            np.add.at(merged, rank[inverse.reshape(-1)], w)
            pts = uniq[order]
            w = merged

        if n_obs is not None:
            n_obs = int(n_obs)
            if n_obs < 1:
                raise MeasureError("n_obs must be positive")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "n_obs", n_obs)

    @property
    def k(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def sq_norms(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.points, self.points)

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(np.abs(self.weights - 1.0 / self.k) <= 1e-12))

    def counts(self) -> np.ndarray:
        """Integer observation counts (requires ``n_obs``)."""
        if self.n_obs is None:
            raise MeasureError("counts need n_obs")
        return np.rint(self.weights * self.n_obs).astype(np.int64)

    @classmethod
    def empirical(cls, points) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(pts, None, n_obs=pts.shape[0])

    def __repr__(self):
        return f"DiscreteMeasure(k={self.k}, dim={self.dim}, n_obs={self.n_obs})"


# ---------------------------------------------------------------------------
# samplable families
# ---------------------------------------------------------------------------


def _vec(params, key, dim, default=None):
    if key not in params:
        if default is None:
            raise MeasureError(f"missing parameter {key!r}")
        return np.asarray(default, dtype=float)
    v = np.atleast_1d(np.asarray(params[key], dtype=float))
    if v.shape == (1,) and dim > 1:
        v = np.full(dim, v[0])
    if v.shape != (dim,):
        raise MeasureError(f"parameter {key!r} must have length {dim}, got shape {v.shape}")
    return v


def _cov(value, dim):
    c = np.asarray(value, dtype=float)
    if c.ndim == 0:
        c = np.eye(dim) * float(c)
    elif c.ndim == 1:
        if c.shape != (dim,):
            raise MeasureError(f"diagonal covariance must have length {dim}")
        c = np.diag(c)
    if c.shape != (dim, dim):
        raise MeasureError(f"covariance must be {dim}x{dim}, got {c.shape}")
    if not np.allclose(c, c.T, atol=1e-12):
        raise MeasureError("covariance must be symmetric")
    try:
        chol = np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        raise MeasureError("covariance is not positive definite") from None
    return c, chol


@dataclass(frozen=True, eq=False)
class SamplableMeasure:
    """Continuous reference measure from one of the built-in families.

    Parameters (all lists are per-coordinate):

    * ``uniform-box``: ``low``, ``high``
    * ``gaussian``: ``mean``, ``cov`` (scalar, diagonal or full; default I)
    * ``gaussian-mixture``: ``weights``, ``means``, ``covs``
    * ``uniform-ball``: ``center``, ``radius``
    * ``piecewise-uniform-1d``: ``intervals`` [[a, b], ...], optional
      ``weights`` (default: proportional to length, i.e. uniform on the union)

    All families but ``piecewise-uniform-1d`` have a positive density on
    the interior of a convex support.
    """

    family: str
    dim: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise MeasureError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if int(self.dim) < 1:
            raise MeasureError("dim must be positive")
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "params", dict(self.params))
        object.__setattr__(self, "_cache", self._prepare())

    def _prepare(self) -> dict:
        d, p = self.dim, self.params
        if self.family == "uniform-box":
            low, high = _vec(p, "low", d, np.zeros(d)), _vec(p, "high", d, np.ones(d))
            if np.any(high <= low):
                raise MeasureError("uniform-box needs high > low in every coordinate")
            return {"low": low, "high": high}
        if self.family == "gaussian":
            mean = _vec(p, "mean", d, np.zeros(d))
            cov, chol = _cov(p.get("cov", 1.0), d)
            return {"mean": mean, "cov": cov, "chol": chol}
        if self.family == "gaussian-mixture":
            w = np.asarray(p.get("weights"), dtype=float)
            means = np.asarray(p.get("means"), dtype=float).reshape(len(w), d)
            covs = p.get("covs", [1.0] * len(w))
            if len(covs) != len(w) or w.ndim != 1 or len(w) == 0:
                raise MeasureError("gaussian-mixture needs matching weights, means and covs")
            if np.any(w < 0) or w.sum() <= 0:
                raise MeasureError("mixture weights must be nonnegative with positive sum")
            comps = [_cov(c, d) for c in covs]
            return {"weights": w / w.sum(), "means": means,
                    "covs": [c for c, _ in comps], "chols": [l for _, l in comps]}
        if self.family == "uniform-ball":
            center = _vec(p, "center", d, np.zeros(d))
            radius = float(p.get("radius", 1.0))
            if radius <= 0:
                raise MeasureError("radius must be positive")
            return {"center": center, "radius": radius}
        # piecewise-uniform-1d
        if d != 1:
            raise MeasureError("piecewise-uniform-1d requires dim = 1")
        iv = np.asarray(p.get("intervals"), dtype=float)
        if iv.ndim != 2 or iv.shape[1] != 2 or iv.shape[0] == 0 or np.any(iv[:, 1] <= iv[:, 0]):
            raise MeasureError("intervals must be a nonempty list of [a, b] with a < b")
        order = np.argsort(iv[:, 0])
        iv = iv[order]
        if np.any(iv[1:, 0] < iv[:-1, 1]):
            raise MeasureError("intervals must not overlap")
        if "weights" in p:
            w = np.asarray(p["weights"], dtype=float)[order]
            if w.shape != (iv.shape[0],) or np.any(w < 0) or w.sum() <= 0:
                raise MeasureError("interval weights invalid")
        else:
            w = iv[:, 1] - iv[:, 0]
        return {"intervals": iv, "weights": w / w.sum()}

    @classmethod
    def from_dict(cls, obj: dict) -> "SamplableMeasure":
        try:
            return cls(obj["family"], int(obj["dim"]), obj.get("params", {}))
        except KeyError as exc:
            raise MeasureError(f"distribution config missing {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {"family": self.family, "dim": self.dim, "params": _jsonable(self.params)}

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Raw (n, d) draws from ``rng``."""
        c, d = self._cache, self.dim
        if self.family == "uniform-box":
            return c["low"] + (c["high"] - c["low"]) * rng.random((n, d))
        if self.family == "gaussian":
            return c["mean"] + rng.standard_normal((n, d)) @ c["chol"].T
        if self.family == "gaussian-mixture":
            comp = rng.choice(len(c["weights"]), size=n, p=c["weights"])
            z = rng.standard_normal((n, d))
            out = np.empty((n, d))
            for i, (m, l) in enumerate(zip(c["means"], c["chols"])):
                sel = comp == i
                out[sel] = m + z[sel] @ l.T
            return out
        if self.family == "uniform-ball":
            g = rng.standard_normal((n, d))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            r = c["radius"] * rng.random(n) ** (1.0 / d)
            return c["center"] + g * r[:, None]
        iv, w = c["intervals"], c["weights"]
        which = rng.choice(len(w), size=n, p=w)
        u = rng.random(n)
        return (iv[which, 0] + u * (iv[which, 1] - iv[which, 0]))[:, None]

    def symmetry_center(self) -> np.ndarray | None:
        """Center ``c`` with ``2c - Y`` equal in law to ``Y``, if known."""
        c = self._cache
        if self.family == "uniform-box":
            return (c["low"] + c["high"]) / 2
        if self.family == "gaussian":
            return c["mean"].copy()
        if self.family == "uniform-ball":
            return c["center"].copy()
        if self.family == "gaussian-mixture":
            if len(c["weights"]) == 1:
                return c["means"][0].copy()
            return None
        iv, w = c["intervals"], c["weights"]
        mid = (iv[0, 0] + iv[-1, 1]) / 2
        mirrored = (2 * mid - iv[::-1, ::-1])
        if np.allclose(mirrored, iv, atol=1e-12) and np.allclose(w[::-1], w, atol=1e-12):
            return np.array([mid])
        return None

    def exact_moment(self, order: int) -> float | None:
        """Closed-form E||Y||^order for order in {2, 4}."""
        c, d = self._cache, self.dim
        if self.family == "uniform-box":
            a, b = c["low"], c["high"]
            m2 = (a * a + a * b + b * b) / 3
            if order == 2:
                return float(m2.sum())
            m4 = (b**5 - a**5) / (5 * (b - a))
            return float(m4.sum() + m2.sum() ** 2 - (m2**2).sum())
        if self.family == "gaussian":
            return _gaussian_moment(c["mean"], c["cov"], order)
        if self.family == "gaussian-mixture":
            return float(sum(w * _gaussian_moment(m, s, order)
                             for w, m, s in zip(c["weights"], c["means"], c["covs"])))
        if self.family == "uniform-ball":
            ctr, r = c["center"], c["radius"]
            cc = float(ctr @ ctr)
            eu2 = r * r * d / (d + 2)
            if order == 2:
                return cc + eu2
            eu4 = r**4 * d / (d + 4)
            return cc * cc + 4 * cc * r * r / (d + 2) + eu4 + 2 * cc * eu2
        iv, w = c["intervals"], c["weights"]
        a, b = iv[:, 0], iv[:, 1]
        e = (b ** (order + 1) - a ** (order + 1)) / ((order + 1) * (b - a))
        return float(w @ e)

    def mean(self) -> np.ndarray:
        c = self._cache
        if self.family == "uniform-box":
            return (c["low"] + c["high"]) / 2
        if self.family == "gaussian":
            return c["mean"].copy()
        if self.family == "gaussian-mixture":
            return c["weights"] @ c["means"]
        if self.family == "uniform-ball":
            return c["center"].copy()
        iv, w = c["intervals"], c["weights"]
        return np.array([w @ iv.mean(axis=1)])

    def __repr__(self):
        return f"SamplableMeasure({self.family!r}, dim={self.dim}, params={self.params})"


def _gaussian_moment(mean, cov, order) -> float:
    mm = float(mean @ mean)
    tr = float(np.trace(cov))
    if order == 2:
        return mm + tr
    # E||Y||^4 = Var(||Y||^2) + (E||Y||^2)^2
    return float(2 * np.trace(cov @ cov) + 4 * mean @ cov @ mean + (mm + tr) ** 2)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def draw_antithetic(q: SamplableMeasure, n: int, rng: np.random.Generator,
                    antithetic: bool = True) -> tuple[np.ndarray, bool]:
    """Draw ``n`` points, as reflected pairs about the symmetry center when
    possible.  Pairs occupy rows ``[0, n//2)`` and ``[n//2, 2*(n//2))``; an odd
    trailing draw is independent.  Returns ``(points, paired)``."""
    center = q.symmetry_center() if antithetic else None
    if center is None or n < 2:
        return q.draw(n, rng), False
    half = n // 2
    y = q.draw(half, rng)
    parts = [y, 2 * center - y]
    if n % 2:
        parts.append(q.draw(1, rng))
    return np.concatenate(parts), True


def sample(measure: SamplableMeasure | DiscreteMeasure, n: int, seed: SeedSpec | int) -> DiscreteMeasure:
    """Empirical measure of ``n`` i.i.d. draws (uniform weights, exact
    duplicates merged)."""
    if n < 1:
        raise MeasureError("n must be at least 1")
    rng = as_seed(seed).generator()
    if isinstance(measure, DiscreteMeasure):
        idx = rng.choice(measure.k, size=n, p=measure.weights)
        counts = np.bincount(idx, minlength=measure.k)
        keep = counts > 0
        return DiscreteMeasure(measure.points[keep], counts[keep] / n, n_obs=n)
    return DiscreteMeasure(measure.draw(n, rng), None, n_obs=n)


def sample_counts(P: DiscreteMeasure, n: int, seed: SeedSpec | int) -> np.ndarray:
    """Multinomial counts aligned with ``P.points`` for ``n`` draws from P."""
    rng = as_seed(seed).generator()
    idx = rng.choice(P.k, size=n, p=P.weights)
    return np.bincount(idx, minlength=P.k)


class Moment(NamedTuple):
    value: float
    se: float
    exact: bool


def moment(measure: SamplableMeasure | DiscreteMeasure, order: int, mc_samples: int = 1_000_000,
           seed: SeedSpec | int | None = None, method: str = "auto") -> Moment:
    """E||Y||^order for order 2 or 4.

    Exact for discrete measures and every built-in family; ``method="mc"``
    forces a Monte Carlo average (standard error attached).
    """
    if order not in (2, 4):
        raise MeasureError("order must be 2 or 4")
    if isinstance(measure, DiscreteMeasure):
        return Moment(float(measure.weights @ measure.sq_norms ** (order // 2)), 0.0, True)
    if method == "auto":
        val = measure.exact_moment(order)
        if val is not None:
            return Moment(float(val), 0.0, True)
    elif method != "mc":
        raise MeasureError(f"unknown method {method!r}")
    if mc_samples < 1:
        raise MeasureError("mc_samples must be positive")
    y = measure.draw(mc_samples, as_seed(seed).generator())
    v = np.einsum("ij,ij->i", y, y) ** (order // 2)
    se = float(v.std(ddof=1) / math.sqrt(mc_samples)) if mc_samples > 1 else float("inf")
    return Moment(float(v.mean()), se, False)


class PairwiseMoments(NamedTuple):
    m22: float
    m4: float
    n_pairs: int
    subsampled: bool


def pairwise_moment_estimates(sample: DiscreteMeasure, pair_budget: int = DEFAULT_PAIR_BUDGET,
                              seed: SeedSpec | int | None = None) -> PairwiseMoments:
    """U-statistic estimates of E(||X1-X2||^2 ||X1||^2) and E||X1-X2||^4.

    Averages over ordered pairs of distinct observations.  Merged duplicates
    are expanded through ``n_obs`` counts; without ``n_obs`` each atom counts
    as one observation of mass ``w``.  Above ``pair_budget`` ordered pairs,
    pairs are subsampled uniformly.
    """
    X, w = sample.points, sample.weights
    if sample.n_obs is not None:
        n = sample.n_obs
        counts = sample.counts().astype(float)
    else:
        n = sample.k
        counts = None
    if n < 2:
        raise MeasureError("pairwise moments need at least 2 observations")
    total_pairs = n * (n - 1)
    sq = sample.sq_norms

    if total_pairs <= pair_budget or sample.k * sample.k <= pair_budget:
        if counts is not None:
            W = np.outer(counts, counts) / total_pairs
        else:
            W = np.outer(w, w) / (1.0 - float(w @ w))
        num22 = num4 = 0.0
        step = max(1, pair_budget // max(sample.k, 1))
        for s in range(0, sample.k, step):
            D = _sqdist(X[s:s + step], X)
            Wb = W[s:s + step]
            num22 += float(np.sum(Wb * D * sq[s:s + step, None]))
            num4 += float(np.sum(Wb * D * D))
        return PairwiseMoments(num22, num4, total_pairs, False)

    rng = as_seed(seed).generator()
    m = int(pair_budget)
    if counts is not None:
        cum = np.cumsum(counts.astype(np.int64))
        i = rng.integers(0, n, size=m)
        j = rng.integers(0, n - 1, size=m)
        j += j >= i
        a = np.searchsorted(cum, i, side="right")
        b = np.searchsorted(cum, j, side="right")
    else:
        a = rng.choice(sample.k, size=m, p=w)
        b = rng.choice(sample.k, size=m, p=w)
        same = a == b
        while np.any(same):
            b[same] = rng.choice(sample.k, size=int(same.sum()), p=w)
            same = a == b
    diff = X[a] - X[b]
    D = np.einsum("ij,ij->i", diff, diff)
    return PairwiseMoments(float(np.mean(D * sq[a])), float(np.mean(D * D)), m, True)


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def read_points_csv(path: str | Path) -> DiscreteMeasure:
    """Read ``x1,...,xd[,weight]`` CSV.  Weights are normalized to sum 1."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        if not header:
            raise MeasureError(f"{path}: empty file")
        cols = [c.strip() for c in header.split(",")]
        has_w = cols[-1] == "weight"
        coord = cols[:-1] if has_w else cols
        expected = [f"x{i + 1}" for i in range(len(coord))]
        if not coord or coord != expected:
            raise MeasureError(f"{path}: header must be x1,...,xd[,weight], got {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        raise MeasureError(f"{path}: no data rows")
    if data.shape[1] != len(cols):
        raise MeasureError(f"{path}: rows have {data.shape[1]} columns, header has {len(cols)}")
    if has_w:
        return DiscreteMeasure(data[:, :-1], data[:, -1], normalize=True)
    return DiscreteMeasure(data, None, n_obs=data.shape[0])


def write_points_csv(path: str | Path, measure: DiscreteMeasure, weights: bool = True) -> None:
    d = measure.dim
    header = ",".join([f"x{i + 1}" for i in range(d)] + (["weight"] if weights else []))
    with Path(path).open("w") as fh:
        fh.write(header + "\n")
        for x, w in zip(measure.points, measure.weights):
            row = [repr(float(v)) for v in x] + ([repr(float(w))] if weights else [])
            fh.write(",".join(row) + "\n")


def read_distribution(path: str | Path) -> SamplableMeasure:
    with Path(path).open() as fh:
        return SamplableMeasure.from_dict(json.load(fh))


def measure_from_spec(spec: Any) -> DiscreteMeasure | SamplableMeasure:
    """Build a measure from a JSON-style spec: either a distribution config
    ``{"family", "dim", "params"}`` or ``{"points": [...], "weights": [...]}``."""
    if isinstance(spec, (DiscreteMeasure, SamplableMeasure)):
        return spec
    if not isinstance(spec, dict):
        raise MeasureError(f"measure spec must be an object, got {type(spec).__name__}")
    if "family" in spec:
        return SamplableMeasure.from_dict(spec)
    if "points" in spec:
        return DiscreteMeasure(spec["points"], spec.get("weights"), normalize=True)
    raise MeasureError("measure spec needs either 'family' or 'points'")


def measure_to_spec(m: DiscreteMeasure | SamplableMeasure) -> dict:
    if isinstance(m, SamplableMeasure):
        return m.to_dict()
    return {"points": m.points.tolist(), "weights": m.weights.tolist()}


__all__: Sequence[str] = (
    "FAMILIES", "MeasureError", "SeedSpec", "DiscreteMeasure", "SamplableMeasure",
    "sample", "sample_counts", "moment", "Moment", "pairwise_moment_estimates",
    "PairwiseMoments", "read_points_csv", "write_points_csv", "read_distribution",
    "measure_from_spec", "measure_to_spec", "draw_antithetic", "as_seed",
)

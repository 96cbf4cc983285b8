"""3D Gaussian mixtures parameterized by upper-triangular precision factors.

A mixture component stores six unconstrained reals ``u = (u11, u22, u33,
u12, u13, u23)``. The precision (inverse covariance) factor is the upper
triangular

    Ubar = [[exp(u11), u12,      u13     ],
            [0,        exp(u22), u23     ],
            [0,        0,        exp(u33)]]

so that ``precision = Ubar.T @ Ubar`` is symmetric positive-definite for
any finite ``u``, and ``log |precision|^(1/2) = u11 + u22 + u33``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InvalidInputError, ParseError

LOG_2PI = float(np.log(2.0 * np.pi))

# Weight-simplex handling: sums within WEIGHT_EXACT_TOL of 1 are accepted
# verbatim; sums within WEIGHT_RENORM_TOL are renormalized; anything worse
# is rejected.
WEIGHT_EXACT_TOL = 1e-9
WEIGHT_RENORM_TOL = 1e-6


def _require_finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise InvalidInputError(f"{name} must be finite, got {value!r}")


def u_factor(u: np.ndarray) -> np.ndarray:
    """Build the 3x3 upper-triangular factor Ubar from the six raw entries."""
    u = np.asarray(u, dtype=float)
    if u.shape != (6,):
        raise InvalidInputError(f"u must have shape (6,), got {u.shape}")
    _require_finite("u", u)
    d = np.exp(u[:3])
    return np.array([
        [d[0], u[3], u[4]],
        [0.0, d[1], u[5]],
        [0.0, 0.0, d[2]],
    ])


def reconstruct_precision(u: np.ndarray) -> np.ndarray:
    """Return the precision matrix Ubar.T @ Ubar for raw entries ``u``."""
    ub = u_factor(u)
    return ub.T @ ub


def log_sqrt_det_precision(u: np.ndarray) -> float:
    """log |precision|^(1/2), which is just the sum of the raw diagonal."""
    u = np.asarray(u, dtype=float)
    if u.shape != (6,):
        raise InvalidInputError(f"u must have shape (6,), got {u.shape}")
    _require_finite("u", u)
    return float(u[0] + u[1] + u[2])


@dataclass(frozen=True)
class GaussianComponent:
    """One mixture component: weight, mean (meters), raw precision entries."""

    weight: float
    mean: np.ndarray  # (3,)
    u: np.ndarray     # (6,), order (u11, u22, u33, u12, u13, u23)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(3)
        u = np.asarray(self.u, dtype=float).reshape(6)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "u", u)
        if not np.isfinite(self.weight) or self.weight < 0:
            raise InvalidInputError(f"weight must be finite and >= 0, got {self.weight}")
        _require_finite("mean", mean)
        _require_finite("u", u)

    @property
    def factor(self) -> np.ndarray:
        return u_factor(self.u)

    @property
    def precision(self) -> np.ndarray:
        return reconstruct_precision(self.u)

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(reconstruct_precision(self.u))


class Gmm3:
    """A 3D Gaussian mixture with >= 1 components and weights summing to 1."""

    def __init__(self, components):
        components = list(components)
        if len(components) < 1:
            raise InvalidInputError("a mixture needs at least one component")
        weights = np.array([c.weight for c in components], dtype=float)
        total = weights.sum()
        if abs(total - 1.0) > WEIGHT_RENORM_TOL:
            raise InvalidInputError(f"component weights sum to {total}, not 1")
        if abs(total - 1.0) > WEIGHT_EXACT_TOL:
            weights = weights / total
        self.weights = weights
        self.means = np.array([c.mean for c in components], dtype=float)
        self.u_entries = np.array([c.u for c in components], dtype=float)

    @classmethod
    def from_arrays(cls, weights, means, u_entries) -> "Gmm3":
        weights = np.asarray(weights, dtype=float).reshape(-1)
        means = np.asarray(means, dtype=float).reshape(len(weights), 3)
        u_entries = np.asarray(u_entries, dtype=float).reshape(len(weights), 6)
        comps = [GaussianComponent(w, m, u) for w, m, u in zip(weights, means, u_entries)]
        return cls(comps)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def components(self) -> list[GaussianComponent]:
        return [
            GaussianComponent(w, m, u)
            for w, m, u in zip(self.weights, self.means, self.u_entries)
        ]

    def factors(self) -> np.ndarray:
        """All upper-triangular factors, shape (n, 3, 3)."""
        n = self.n_components
        out = np.zeros((n, 3, 3))
        d = np.exp(self.u_entries[:, :3])
        out[:, 0, 0] = d[:, 0]
        out[:, 1, 1] = d[:, 1]
        out[:, 2, 2] = d[:, 2]
        out[:, 0, 1] = self.u_entries[:, 3]
        out[:, 0, 2] = self.u_entries[:, 4]
        out[:, 1, 2] = self.u_entries[:, 5]
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Gmm3):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.u_entries, other.u_entries)
        )


def _component_log_terms(g: Gmm3, points: np.ndarray) -> np.ndarray:
    """log w_i + sum(diag u_i) - 0.5 ||Ubar_i (x - mu_i)||^2, shape (N, n).

    These terms differ from the per-component log density only by the
    constant -(3/2) log(2 pi).
    """
    factors = g.factors()                                  # (n, 3, 3)
    diffs = points[:, None, :] - g.means[None, :, :]       # (N, n, 3)
    ydiff = np.einsum("nij,pnj->pni", factors, diffs)      # (N, n, 3)
    quad = np.einsum("pni,pni->pn", ydiff, ydiff)          # (N, n)
    log_sqrt_dets = g.u_entries[:, :3].sum(axis=1)
    with np.errstate(divide="ignore"):
        log_w = np.log(g.weights)
    return log_w[None, :] + log_sqrt_dets[None, :] - 0.5 * quad


def gmm_pdf(g: Gmm3, x: np.ndarray):
    """Mixture density at ``x``; accepts one point (3,) or a batch (N, 3)."""
    if not isinstance(g, Gmm3):
        raise InvalidInputError("g must be a Gmm3")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    points = x.reshape(-1, 3)
    _require_finite("x", points)
    terms = _component_log_terms(g, points)
    dens = np.exp(terms).sum(axis=1) * (2.0 * np.pi) ** -1.5
    return float(dens[0]) if single else dens


def reduced_nll(g: Gmm3, points: np.ndarray) -> float:
    """Mean negative log-likelihood with the (3/2) log(2 pi) constant dropped.

    Stabilized with a max-shift so large quadratic terms cannot overflow.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] == 0:
        raise InvalidInputError("point cloud is empty")
    _require_finite("points", points)
    terms = _component_log_terms(g, points)                # (N, n)
    tmax = terms.max(axis=1)
    lse = tmax + np.log(np.exp(terms - tmax[:, None]).sum(axis=1))
    return float(-lse.mean())


def gmm_sample(g: Gmm3, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` points; deterministic for a given seed.

    Component indices come from inverse-transform sampling on the weight
    CDF; each point is mu_i + Ubar_i^{-1} z with z standard normal, solving
    the triangular system rather than forming a covariance.
    """
    if count < 1:
        raise InvalidInputError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(g.weights)
    idx = np.searchsorted(cdf, rng.random(count), side="right")
    idx = np.minimum(idx, g.n_components - 1)
    z = rng.standard_normal((count, 3))
    out = np.empty((count, 3))
    factors = g.factors()
    for i in range(g.n_components):
        mask = idx == i
        if not mask.any():
            continue
        local = solve_triangular(factors[i], z[mask].T, lower=False).T
        out[mask] = g.means[i] + local
    return out


def gmm_to_text(g: Gmm3) -> str:
    """Serialize: header ``n=<count>``, then one line per component."""
    lines = [f"n={g.n_components}"]
    for w, m, u in zip(g.weights, g.means, g.u_entries):
        vals = [w, *m, *u]
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    return "\n".join(lines) + "\n"


def gmm_from_text(text: str) -> Gmm3:
    """Parse the text form written by :func:`gmm_to_text`."""
    offset = 0
    lines = text.splitlines(keepends=True)
    if not lines or not lines[0].startswith("n="):
        raise ParseError("expected header line 'n=<count>'", 0)
    try:
        n = int(lines[0][2:].strip())
    except ValueError:
        raise ParseError("malformed component count", 2) from None
    offset = len(lines[0].encode())
    comps = []
    for k in range(1, n + 1):
        if k >= len(lines):
            raise ParseError("truncated mixture: missing component line", offset)
        fields = lines[k].split()
        if len(fields) != 10:
            raise ParseError(f"expected 10 fields, got {len(fields)}", offset)
        try:
            vals = [float(f) for f in fields]
        except ValueError:
            raise ParseError("malformed real value", offset) from None
        comps.append(GaussianComponent(vals[0], np.array(vals[1:4]), np.array(vals[4:10])))
        offset += len(lines[k].encode())
    return Gmm3(comps)

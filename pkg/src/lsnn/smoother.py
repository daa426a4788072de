"""Gaussian smoother: parametrization, evaluation, and analytic gradients.

A smoother is a vector of per-patch importance weights over a grid of
patch positions.  Each position p gets

    U_p = exp(-(p - mu)^T  Phi^T Phi  (p - mu))

where mu is the 2-d mean and Phi is a symmetric 2x2 factor stored as
three scalars (alpha, beta, gamma):

    Phi = [[alpha, gamma],
           [gamma, beta ]]

so the precision Lambda = Phi^T Phi is symmetric positive semidefinite
for any real (alpha, beta, gamma), and the exponent is always <= 0.
Optimizing (alpha, beta, gamma) instead of Lambda keeps the constraint
satisfied for free during gradient descent.

Grid coordinates are patch indices normalized per axis to [0, 1]
(row r of a grid with R rows sits at r/(R-1)), which makes the smoother
independent of the grid resolution.

The normalized variant divides by the total mass,

    Uhat_p = U_p / sum_q U_q,

which keeps gradients alive when mu drifts outside the unit square: the
raw U_p all collapse toward zero out there, but the ratios, and hence
the normalized gradients, do not.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import EXP_CLAMP


@dataclass(frozen=True)
class GaussianParams:
    """Mean and symmetric precision factor of one smoother."""

    mu: np.ndarray   # (2,)
    phi: np.ndarray  # (3,) = (alpha, beta, gamma)

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64).reshape(2))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class PatchGrid:
    """Row-major patch positions with normalized 2-d coordinates."""

    rows: int
    cols: int
    coords: np.ndarray  # (rows*cols, 2), coords[r*cols + c] = (p1, p2)

    @classmethod
    def make(cls, rows, cols):
        if rows < 1 or cols < 1:
            raise ValueError("grid extents must be positive")
        p1 = np.full(rows, 0.5) if rows == 1 else np.arange(rows) / (rows - 1)
        p2 = np.full(cols, 0.5) if cols == 1 else np.arange(cols) / (cols - 1)
        coords = np.stack(np.meshgrid(p1, p2, indexing="ij"), axis=-1).reshape(-1, 2)
        return cls(rows, cols, coords)

    @property
    def size(self):
        return self.rows * self.cols


@dataclass
class Smoother:
    values: np.ndarray  # (m,)
    normalized: bool = False


def phi_matrix(params):
    a, b, g = params.phi
    return np.array([[a, g], [g, b]])


def precision_from_phi(params):
    """Precision matrix Lambda = Phi^T Phi, expanded in (alpha, beta, gamma)."""
    a, b, g = params.phi
    off = (a + b) * g
    return np.array([[a * a + g * g, off], [off, b * b + g * g]])


def smoother_forward(params, grid):
    values = _forward_many(params.mu[None], params.phi[None], grid.coords)[0]
    return Smoother(values, normalized=False)


def smoother_normalize(s):
    if s.normalized:
        raise ValueError("smoother is already normalized")
    return Smoother(s.values / s.values.sum(), normalized=True)


def smoother_backward(params, grid, smoother, upstream):
    """Gradients of sum_p upstream_p * U_p w.r.t. mu and (alpha, beta, gamma).

    Requires the raw (unnormalized) smoother produced by smoother_forward
    with the same params and grid.
    """
    if smoother.normalized:
        raise ValueError("smoother_backward expects the unnormalized smoother; "
                         "use normalized_backward")
    upstream = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    gmu, gphi = _backward_many(params.mu[None], params.phi[None], grid.coords,
                               smoother.values[None], upstream)
    return gmu[0], gphi[0]


def normalized_backward(params, grid, raw, upstream):
    """Backward pass through the normalized smoother Uhat = U / sum(U).

    `raw` is the unnormalized smoother; `upstream` holds d(loss)/d(Uhat_p).
    The quotient rule collapses to a rescaled upstream on the raw values:

        d(loss)/dU_p = upstream_p / S - (sum_q upstream_q U_q) / S^2

    with S = sum(U), after which the raw backward pass applies unchanged.
    """
    if raw.normalized:
        raise ValueError("normalized_backward expects the raw smoother")
    upstream = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
    w = _normalized_upstream(raw.values[None], upstream)
    gmu, gphi = _backward_many(params.mu[None], params.phi[None], grid.coords,
                               raw.values[None], w)
    return gmu[0], gphi[0]


# ---------------------------------------------------------------------------
# Vectorized cores, shared with the network layer.  All take N parameter
# sets at once: mu (N, 2), phi (N, 3) as (alpha, beta, gamma) rows, and a
# common coordinate grid (m, 2).


def _forward_many(mu, phi, coords):
    """Raw smoother values for N parameter sets, shape (N, m)."""
    e1 = coords[None, :, 0] - mu[:, None, 0]  # (N, m)
    e2 = coords[None, :, 1] - mu[:, None, 1]
    a, b, g = phi[:, 0, None], phi[:, 1, None], phi[:, 2, None]
    l11 = a * a + g * g
    l22 = b * b + g * g
    l12 = (a + b) * g
    # in-place accumulation of q = e^T Lambda e; these buffers are the
    # batch hot path for the content smoother
    q = e1 * e1
    q *= l11
    t = e2 * e2
    t *= l22
    q += t
    e1 *= e2
    e1 *= 2.0 * l12
    q += e1
    np.minimum(q, EXP_CLAMP, out=q)
    np.negative(q, out=q)
    return np.exp(q, out=q)


def _backward_many(mu, phi, coords, values, upstream):
    """Gradients for N parameter sets given upstream on the raw values.

    Derivation: with e = p - mu and q = e^T Lambda e,

        dU_p/dmu    = +2 U_p Lambda e           (mu enters through -e)
        dU_p/dalpha = -U_p (2 alpha e1^2 + 2 gamma e1 e2)
        dU_p/dbeta  = -U_p (2 beta  e2^2 + 2 gamma e1 e2)
        dU_p/dgamma = -U_p (2 gamma (e1^2 + e2^2) + 2 (alpha+beta) e1 e2)

    The gamma row carries the sum of both off-diagonal entries of the
    unconstrained Phi-gradient because Phi stores one shared off-diagonal
    parameter.
    """
    e1 = coords[None, :, 0] - mu[:, None, 0]
    e2 = coords[None, :, 1] - mu[:, None, 1]
    a, b, g = phi[:, 0], phi[:, 1], phi[:, 2]
    l11 = a * a + g * g
    l22 = b * b + g * g
    l12 = (a + b) * g

    t = upstream * values  # (N, m)
    s1 = np.einsum("nm,nm->n", t, e1 * e1)
    s2 = np.einsum("nm,nm->n", t, e2 * e2)
    s12 = np.einsum("nm,nm->n", t, e1 * e2)
    te1 = np.einsum("nm,nm->n", t, e1)
    te2 = np.einsum("nm,nm->n", t, e2)

    gmu = np.stack([2.0 * (l11 * te1 + l12 * te2),
                    2.0 * (l12 * te1 + l22 * te2)], axis=1)
    gphi = np.stack([-(2.0 * a * s1 + 2.0 * g * s12),
                     -(2.0 * b * s2 + 2.0 * g * s12),
                     -(2.0 * g * (s1 + s2) + 2.0 * (a + b) * s12)], axis=1)
    return gmu, gphi


def _normalized_upstream(values, upstream):
    """Rewrite upstream on Uhat as upstream on raw U (quotient rule)."""
    s = values.sum(axis=1, keepdims=True)
    dot = np.einsum("nm,nm->n", upstream, values)[:, None]
    return upstream / s - dot / (s * s)

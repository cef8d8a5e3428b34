"""Real phase-space geometry of a finite-dimensional Hilbert space.

A state ``sum_k c_k |k>`` with complex amplitudes ``c_k`` is represented by
real canonical coordinates

    x_k = sqrt(2) * Re(c_k),    y_k = sqrt(2) * Im(c_k),

stored as a single vector ``X = (x_1..x_N, y_1..y_N)`` (all x components
first, then all y components).  A unit-norm ket therefore has
``sum(x^2 + y^2) = 2``.

In these coordinates the flat Kaehler triple is

    g   = identity                      (Riemannian metric)
    w   = [[0, I], [-I, 0]]             (symplectic structure, raised indices)
    J   = g^-1 w = w                    (complex structure, J^2 = -1)

``omega_apply`` maps covector components ``(a, b)`` to ``(b, -a)``.  The sign
is fixed by the requirement that the Hamiltonian flow ``Xdot = w grad(H)``,
with ``H`` the expectation value of the Hamiltonian operator, reproduces the
Schroedinger equation ``i cdot = H c``; equivalently ``J`` acts on coordinate
images as multiplication by ``-i``.

One gauge subtlety: expectation values are implemented as normalization
ratios, so ``grad(H)`` on the unit sphere lacks the radial component of the
raw quadratic form.  The flow it generates equals Schroedinger evolution
with the mean energy subtracted from the generator, i.e. the state picks up
no dynamical global phase.  All observable quantities are ray functions and
do not see the difference; comparisons against a bare matrix-exponential
propagator must be made modulo global phase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SQRT2 = float(np.sqrt(2.0))

# Tangent vectors and covectors are plain float arrays with the same block
# layout as state coordinates.
TangentVector = np.ndarray


class StateVector:
    """Quantum state in real canonical coordinates.

    Parameters
    ----------
    coords : array_like
        Real vector of even length ``2N`` laid out as ``(x_1..x_N,
        y_1..y_N)``.  Must be finite and not identically zero.
    """

    __slots__ = ("coords",)

    def __init__(self, coords):
        arr = np.asarray(coords, dtype=float)
        if arr.ndim != 1 or arr.size == 0 or arr.size % 2 != 0:
            raise ValueError(
                f"state coordinates must be a 1-d vector of even length, got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("state coordinates must be finite")
        if not np.any(arr):
            raise ValueError("degenerate state: all coordinates are zero")
        self.coords = arr

    @property
    def dim_hilbert(self) -> int:
        return self.coords.size // 2

    def norm_squared(self) -> float:
        """Coordinate norm squared; equals 2 <psi|psi>."""
        return float(self.coords @ self.coords)

    def normalized(self) -> "StateVector":
        """Rescale onto the sphere sum(x^2 + y^2) = 2."""
        return StateVector(self.coords * (SQRT2 / np.sqrt(self.norm_squared())))

    def copy(self) -> "StateVector":
        return StateVector(self.coords.copy())

    def __repr__(self) -> str:
        return f"StateVector(dim_hilbert={self.dim_hilbert}, coords={self.coords!r})"


@dataclass(frozen=True)
class ClassicalPoint:
    """Single classical degree of freedom (q, p)."""

    q: float
    p: float

    def __post_init__(self):
        if not (np.isfinite(self.q) and np.isfinite(self.p)):
            raise ValueError(f"classical point must be finite, got q={self.q}, p={self.p}")


def coords_of(state) -> np.ndarray:
    """Coordinate array of a StateVector, or a validated raw array."""
    if isinstance(state, StateVector):
        return state.coords
    return StateVector(state).coords


def from_complex(amplitudes) -> StateVector:
    """Build a state from complex amplitudes c_k."""
    c = np.asarray(amplitudes, dtype=complex)
    if c.ndim != 1 or c.size == 0:
        raise ValueError(f"amplitudes must be a 1-d vector, got shape {c.shape}")
    return StateVector(np.concatenate([c.real, c.imag]) * SQRT2)


def to_complex(state) -> np.ndarray:
    """Complex amplitudes c_k = (x_k + i y_k)/sqrt(2)."""
    x = coords_of(state)
    n = x.size // 2
    return (x[:n] + 1j * x[n:]) / SQRT2


def omega_apply(v: TangentVector) -> TangentVector:
    """Apply the raised symplectic structure: (a, b) -> (b, -a).

    Acts on the last axis, so batched ``(..., 2N)`` input is fine.
    """
    v = np.asarray(v, dtype=float)
    n = v.shape[-1] // 2
    return np.concatenate([v[..., n:], -v[..., :n]], axis=-1)


def g_apply(v: TangentVector) -> TangentVector:
    """Apply the raised metric (identity in canonical coordinates)."""
    return np.asarray(v, dtype=float)


def j_apply(v: TangentVector) -> TangentVector:
    """Apply the complex structure J = g^-1 w; multiplication by -i."""
    return omega_apply(v)


def metric_pairing(u: TangentVector, v: TangentVector) -> float:
    """G(u, v), the Euclidean pairing of two tangent vectors."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(u @ v)


def symplectic_pairing(u: TangentVector, v: TangentVector) -> float:
    """Omega(u, v), the symplectic 2-form on two tangent vectors.

    Lowered-index matrix [[0, -I], [I, 0]]; satisfies the compatibility
    identity G(u, v) = Omega(u, J v).
    """
    u = np.asarray(u, dtype=float)
    return float(omega_apply(u) @ np.asarray(v, dtype=float))

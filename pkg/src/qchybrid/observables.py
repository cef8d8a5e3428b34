"""Observables as ray functions on the real phase space.

A Hermitian operator A induces the expectation function

    A(X) = <psi_X| A |psi_X> / <psi_X|psi_X>,

a degree-zero homogeneous (ray-invariant) function of the coordinates.  With
``M`` the real 2N x 2N representation of the operator, the closed forms used
throughout are

    A(X)      = (X.M.X) / (X.X)
    grad A(X) = 2 (M X - A(X) X) / (X.X)

The gradient is tangent to the normalization sphere and orthogonal to the
global-phase direction; at normalized states it is the coordinate image of
(A - A(X)) |psi>.  Dispersions, the constraint function and its gradient,
and the Poisson bracket are built from these two primitives.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import StateVector, coords_of, omega_apply, to_complex

HERMITICITY_TOL = 1e-12
COMMUTATOR_TOL = 1e-12


class DeltaMinError(RuntimeError):
    """Dispersion-floor search failed to converge; carries the best value found."""

    def __init__(self, message: str, best_value: float):
        super().__init__(message)
        self.best_value = best_value


def _real_representation(matrix: np.ndarray) -> np.ndarray:
    # complex-linear action of a Hermitian matrix in (x, y) block coordinates
    s, k = matrix.real, matrix.imag
    return np.block([[s, -k], [k, s]])


@dataclass(frozen=True)
class HermitianObservable:
    """Hermitian operator with cached real-coordinate representations."""

    matrix: np.ndarray
    label: str = ""

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
            raise ValueError(f"observable matrix must be square, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("observable matrix must be finite")
        if np.max(np.abs(m - m.conj().T)) > HERMITICITY_TOL:
            raise ValueError(f"observable {self.label or m.shape} is not Hermitian")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def real_rep(self) -> np.ndarray:
        return _real_representation(self.matrix)

    @cached_property
    def real_rep_squared(self) -> np.ndarray:
        # real representation of the operator square; symmetric because the
        # square of a Hermitian operator is Hermitian
        return self.real_rep @ self.real_rep

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    @cached_property
    def distinct_eigenvalues(self) -> np.ndarray:
        """Eigenvalues with degenerate copies merged (1e-9 clustering)."""
        vals = self.eigenvalues
        out = [vals[0]]
        for v in vals[1:]:
            if abs(v - out[-1]) > 1e-9:
                out.append(v)
        return np.array(out)

    def __repr__(self) -> str:
        return f"HermitianObservable(dim={self.dim}, label={self.label!r})"


def _check_dim(obs: HermitianObservable, x: np.ndarray):
    if x.size != 2 * obs.dim:
        raise ValueError(
            f"state has {x.size // 2} amplitudes but observable {obs.label or ''} acts on {obs.dim}"
        )


def expectation(obs: HermitianObservable, state) -> float:
    """Normalized expectation value of ``obs`` at ``state``."""
    x = coords_of(state)
    _check_dim(obs, x)
    return float(x @ obs.real_rep @ x) / float(x @ x)


def gradient_expectation(obs: HermitianObservable, state) -> np.ndarray:
    """Coordinate gradient of the normalized expectation function."""
    x = coords_of(state)
    _check_dim(obs, x)
    r2 = float(x @ x)
    mx = obs.real_rep @ x
    a = float(x @ mx) / r2
    return 2.0 * (mx - a * x) / r2


def expectation_squared(obs: HermitianObservable, state) -> float:
    """Normalized expectation of the operator square."""
    x = coords_of(state)
    _check_dim(obs, x)
    return float(x @ obs.real_rep_squared @ x) / float(x @ x)


def dispersion(obs: HermitianObservable, state) -> float:
    """Variance <A^2> - <A>^2 at ``state``; nonnegative."""
    x = coords_of(state)
    _check_dim(obs, x)
    r2 = float(x @ x)
    a = float(x @ obs.real_rep @ x) / r2
    a2 = float(x @ obs.real_rep_squared @ x) / r2
    return a2 - a * a


def gradient_dispersion(obs: HermitianObservable, state) -> np.ndarray:
    """Gradient of the variance: grad<A^2> - 2 <A> grad<A>."""
    x = coords_of(state)
    _check_dim(obs, x)
    r2 = float(x @ x)
    mx = obs.real_rep @ x
    sx = obs.real_rep_squared @ x
    a = float(x @ mx) / r2
    a2 = float(x @ sx) / r2
    grad_a = 2.0 * (mx - a * x) / r2
    grad_a2 = 2.0 * (sx - a2 * x) / r2
    return grad_a2 - 2.0 * a * grad_a


def poisson_bracket(f_grad, h_grad) -> float:
    """Poisson bracket value <grad f, w grad h> of two gradient covectors.

    Antisymmetric; for expectation functions of operators F, H evaluated on
    normalized states it equals the expectation of -i[F, H].
    """
    f = np.asarray(f_grad, dtype=float)
    h = np.asarray(h_grad, dtype=float)
    if f.shape != h.shape:
        raise ValueError(f"gradient shapes differ: {f.shape} vs {h.shape}")
    return float(f @ omega_apply(h))


def commutator_norm(a: HermitianObservable, b: HermitianObservable) -> float:
    return float(np.max(np.abs(a.matrix @ b.matrix - b.matrix @ a.matrix)))


@dataclass(frozen=True)
class ObservableSet:
    """Monitored observables together with their joint dispersion floor.

    ``delta_min`` is the minimum over normalized states of the summed
    dispersions of the members.  It vanishes exactly when the members share
    a common eigenstate; in particular it must be zero for a pairwise
    commuting family, which the constructor enforces.
    """

    members: tuple
    delta_min: float = 0.0

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("observable set must contain at least one observable")
        dims = {m.dim for m in members}
        if len(dims) != 1:
            raise ValueError(f"observables act on mismatched dimensions: {sorted(dims)}")
        if not np.isfinite(self.delta_min) or self.delta_min < 0:
            raise ValueError(f"delta_min must be finite and >= 0, got {self.delta_min}")
        if self.pairwise_commuting and self.delta_min != 0.0:
            raise ValueError(
                "commuting observables share exact eigenstates; delta_min must be 0, "
                f"got {self.delta_min}"
            )
        object.__setattr__(self, "members", members)

    @cached_property
    def pairwise_commuting(self) -> bool:
        ms = self.members
        return all(
            commutator_norm(ms[i], ms[j]) <= COMMUTATOR_TOL
            for i in range(len(ms))
            for j in range(i + 1, len(ms))
        )

    @property
    def dim(self) -> int:
        return self.members[0].dim

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ConstraintValue:
    """Constraint function value and its coordinate gradient."""

    value: float
    gradient: np.ndarray = field(repr=False)


def total_dispersion(obs_set: ObservableSet, state) -> float:
    """Sum of member dispersions at ``state``."""
    return float(sum(dispersion(m, state) for m in obs_set.members))


def constraint(obs_set: ObservableSet, state) -> ConstraintValue:
    """Constraint Gamma(X) = sum_n Delta A_n(X) - delta_min with gradient."""
    x = coords_of(state)
    value = -obs_set.delta_min
    grad = np.zeros_like(x)
    for m in obs_set.members:
        value += dispersion(m, x)
        grad += gradient_dispersion(m, x)
    return ConstraintValue(value=value, gradient=grad)


def estimate_delta_min(
    observables,
    n_starts: int = 8,
    seed: int = 0,
    max_iterations: int = 5000,
    grad_tol: float = 1e-10,
) -> float:
    """Dispersion floor by multi-start gradient descent with backtracking.

    Minimizes ``sum_n Delta A_n`` over normalized states.  Each start runs
    projected gradient descent (renormalizing after every update) with an
    Armijo backtracking line search until the gradient norm falls below
    ``grad_tol``.  Deterministic for a fixed ``seed``.

    Raises
    ------
    DeltaMinError
        If any start exhausts ``max_iterations`` before converging; the
        exception carries the best value found so far.
    """
    members = tuple(getattr(observables, "members", observables))
    if not members:
        raise ValueError("need at least one observable")
    dim = members[0].dim
    rng = np.random.default_rng(seed)

    def objective(x):
        val = 0.0
        grad = np.zeros_like(x)
        for m in members:
            val += dispersion(m, x)
            grad += gradient_dispersion(m, x)
        return val, grad

    best = np.inf
    minima = []
    for _ in range(n_starts):
        x = rng.standard_normal(2 * dim)
        x *= np.sqrt(2.0 / (x @ x))
        val, grad = objective(x)
        converged = False
        for _ in range(max_iterations):
            gnorm = np.linalg.norm(grad)
            if gnorm < grad_tol:
                converged = True
                break
            step = 1.0
            # Armijo backtracking on the projected step
            while step > 1e-16:
                trial = x - step * grad
                trial *= np.sqrt(2.0 / (trial @ trial))
                tval, tgrad = objective(trial)
                if tval <= val - 1e-4 * step * gnorm * gnorm:
                    x, val, grad = trial, tval, tgrad
                    break
                step *= 0.5
            else:
                # line search stalled at numerical floor; treat as converged
                converged = True
                break
        best = min(best, val)
        if not converged:
            raise DeltaMinError(
                f"dispersion-floor search did not converge within {max_iterations} "
                f"iterations (best value {best:.12g})",
                best_value=best,
            )
        minima.append(val)
    spread = max(minima) - min(minima)
    if spread > 1e-6:
        warnings.warn(
            f"dispersion-floor starts disagree by {spread:.3g}; "
            "landscape may have distinct local minima",
            stacklevel=2,
        )
    return float(min(minima))


def concurrence(state) -> float:
    """Two-qubit entanglement measure |c1 c4 - c2 c3| / sum |c_k|^2.

    Ranges over [0, 1/2]: zero exactly on product states, 1/2 on maximally
    entangled states.  Invariant under global phase and normalization.
    """
    c = to_complex(state)
    if c.size != 4:
        raise ValueError(f"concurrence is defined for two qubits (4 amplitudes), got {c.size}")
    return float(abs(c[0] * c[3] - c[1] * c[2]) / np.sum(np.abs(c) ** 2))


# ---------------------------------------------------------------------------
# builders

_PAULI = {
    "sx": 0.5 * np.array([[0, 1], [1, 0]], dtype=complex),
    "sy": 0.5 * np.array([[0, -1j], [1j, 0]], dtype=complex),
    "sz": 0.5 * np.array([[1, 0], [0, -1]], dtype=complex),
}


def spin_half():
    """The spin-1/2 triple (sx, sy, sz) with eigenvalues +-1/2."""
    return tuple(HermitianObservable(_PAULI[k], label=k) for k in ("sx", "sy", "sz"))


def spin_x() -> HermitianObservable:
    return HermitianObservable(_PAULI["sx"], label="sx")


def spin_y() -> HermitianObservable:
    return HermitianObservable(_PAULI["sy"], label="sy")


def spin_z() -> HermitianObservable:
    return HermitianObservable(_PAULI["sz"], label="sz")


def identity(dim: int) -> HermitianObservable:
    return HermitianObservable(np.eye(dim, dtype=complex), label="id")


def tensor_product(a: HermitianObservable, b: HermitianObservable, label: str = "") -> HermitianObservable:
    """Kronecker product a (x) b; first factor owns the slower index.

    Amplitude ordering matches ``|jk> = |j>_1 |k>_2  <->  c[2(j-1)+k]`` for
    qubit factors, i.e. numpy row-major kron.
    """
    if not label:
        label = f"{a.label or 'A'}*{b.label or 'B'}"
    return HermitianObservable(np.kron(a.matrix, b.matrix), label=label)

"""Hybrid quantum-classical evolution and its integrators.

The quantum sector lives on the real phase space of module ``geometry``; the
classical sector is a canonical pair (q, p).  The deterministic part of the
quantum drift is the Hamiltonian flow of

    H_det(X; q, p) = <H_q>(X) + f(q, p) * sum_n A_n(X)

corrected by a Lagrange-multiplier term -lambda * grad Gamma that removes the
component of the flow normal to the constraint surface Gamma = 0, so the total
dispersion of the monitored observables is conserved when the noise is off.
The classical sector follows Hamilton's equations sourced by the summed
expectation of the monitored observables.

Evolution modes
---------------
``fht``
    Full constrained stochastic evolution.  Each monitored observable
    contributes two localization noise channels along omega*grad A and
    grad A.  In the Ito discretization those channels carry a systematic
    second-order contribution along grad Gamma; the Euler-Maruyama step
    therefore adds the matching compensating drift (see
    ``noise_compensation_drift``), which makes every monitored expectation
    an exact martingale of the noise and yields collapse branch weights
    equal to squared overlaps.  The compensator vanishes with the noise.
``hamiltonian-only``
    Drops the constraint and noise entirely: quantum Hamiltonian flow
    coupled to the classical Hamilton equations.  Conserves the physical
    energy <H_q> + f * sum A_n + H_cl.  Always integrated with RK4.
``measurement-approx``
    Idealized measurement: the quantum sector evolves as in ``fht`` but
    sees the classical point frozen at its initial value; once the
    convergence detector fires, the classical coordinate acts as a pointer
    with rate q' = alpha * df/dp evaluated at the frozen point, where alpha
    is the monitored expectation at detection.  Non-convergence by t_final
    is an error.
``hughston``
    Single-observable collapse equation: Hamiltonian flow plus a dispersion
    descent -(mu^2/8) grad(Delta A) and one real noise channel
    (mu/2) grad A dW, scaled by noise_amplitude.  The factor arrangement
    keeps the ensemble mean of the monitored expectation a martingale at
    noise_amplitude = 1 and reduces to plain Hamiltonian flow as mu -> 0.

Integration
-----------
Euler-Maruyama for stochastic runs (the noise contract is Ito), classic RK4
whenever the dynamics is deterministic (``hamiltonian-only``, or any mode
with noise_amplitude = 0).  The state is renormalized after every step; the
largest pre-renormalization deviation of the squared norm from 2 is kept as
a per-path diagnostic.

Determinism
-----------
Each path owns a counter-based Philox stream keyed by (master_seed,
path_index) and consumes it in fixed-size blocks, so a path's noise depends
only on those two integers, never on batching, worker count, or t_final.
Batched arithmetic uses fixed per-element reduction orders (einsum without
optimization, elementwise updates), which makes per-path results bit-identical
regardless of how paths are grouped into batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ClassicalPoint, StateVector, coords_of, omega_apply
from .observables import (
    HermitianObservable,
    ObservableSet,
    constraint,
    expectation,
    gradient_dispersion,
    gradient_expectation,
)
from .records import TrajectoryRecord

MODES = ("fht", "hamiltonian-only", "measurement-approx", "hughston")

# below this squared gradient norm the state counts as on-manifold and the
# multiplier is dropped (its defining ratio degenerates to 0/0 there)
LAMBDA_REGULARIZATION = 1e-10

# noise is drawn per path in fixed blocks of this many steps so the stream
# layout is independent of t_final and of batching
NOISE_BLOCK_STEPS = 4096

_BLOWUP_PREFIX = "numerical blow-up"
_NONCONVERGENCE_PREFIX = "measurement did not converge"


class SimulationError(RuntimeError):
    """Base class for integration failures."""


class NumericalBlowUpError(SimulationError):
    """State left the representable range (NaN/Inf)."""


class MeasurementConvergenceError(SimulationError):
    """measurement-approx run ended before the detector fired."""

    def __init__(self, message: str, final_gamma: float):
        super().__init__(message)
        self.final_gamma = final_gamma


@dataclass(frozen=True)
class DetectorConfig:
    """Collapse detector: constraint below ``threshold`` for ``dwell_samples``
    consecutive samples.  A path counts as converged only while its trailing
    run of below-threshold samples is at least the dwell length; the
    convergence time is the sample at which that run filled the window."""

    threshold: float = 1e-3
    dwell_samples: int = 100

    def __post_init__(self):
        if not (np.isfinite(self.threshold) and self.threshold > 0):
            raise ValueError(f"detector threshold must be positive, got {self.threshold}")
        if self.dwell_samples < 1:
            raise ValueError(f"detector dwell must be >= 1 sample, got {self.dwell_samples}")


@dataclass(frozen=True)
class HybridState:
    quantum: StateVector
    classical: ClassicalPoint
    time: float = 0.0


@dataclass(frozen=True)
class NoiseIncrement:
    """One step's Wiener increments, one (dw_r, dw_i) pair per observable."""

    dw_r: np.ndarray
    dw_i: np.ndarray

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.dw_r, dtype=float))
        i = np.atleast_1d(np.asarray(self.dw_i, dtype=float))
        if r.shape != i.shape:
            raise ValueError(f"channel counts differ: {r.shape} vs {i.shape}")
        object.__setattr__(self, "dw_r", r)
        object.__setattr__(self, "dw_i", i)


@dataclass(frozen=True, eq=False)
class HybridModel:
    """Immutable bundle describing one hybrid system.

    ``h_cl`` and ``coupling_f`` are objects with ``value(q, p)``, ``dq(q, p)``
    and ``dp(q, p)`` methods accepting scalars or arrays.  ``noise_amplitude``
    scales both localization channels of every observable; ``hughston_mu`` is
    used by the hughston mode only.
    """

    h_q: HermitianObservable
    h_cl: object
    coupling_f: object
    observables: ObservableSet
    noise_amplitude: float = 1.0
    mode: str = "fht"
    hughston_mu: float = 1.0
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not (np.isfinite(self.noise_amplitude) and self.noise_amplitude >= 0):
            raise ValueError(f"noise_amplitude must be finite and >= 0, got {self.noise_amplitude}")
        if not np.isfinite(self.hughston_mu) or self.hughston_mu < 0:
            raise ValueError(f"hughston_mu must be finite and >= 0, got {self.hughston_mu}")
        if self.observables.dim != self.h_q.dim:
            raise ValueError(
                f"observables act on dimension {self.observables.dim} "
                f"but h_q has dimension {self.h_q.dim}"
            )
        for attr in ("value", "dq", "dp"):
            for part, name in ((self.h_cl, "h_cl"), (self.coupling_f, "coupling_f")):
                if not callable(getattr(part, attr, None)):
                    raise TypeError(f"{name} must provide a callable {attr}(q, p)")
        if self.mode == "measurement-approx" and len(self.observables) != 1:
            raise ValueError("measurement-approx mode: single observable required")
        if self.mode == "hughston":
            member = self.observables.members[0]
            if len(self.observables) != 1 or len(member.distinct_eigenvalues) != member.dim:
                raise ValueError(
                    "hughston mode: single observable required, with a "
                    "nondegenerate spectrum on the full quantum sector"
                )

    @property
    def n_channels(self) -> int:
        if self.mode == "hughston":
            return 1
        return 2 * len(self.observables)

    @property
    def is_deterministic(self) -> bool:
        return self.mode == "hamiltonian-only" or self.noise_amplitude == 0.0


def path_rng(master_seed: int, path_index: int) -> np.random.Generator:
    """Independent counter-based stream for one path.

    Keyed directly by (master_seed, path_index), so any subset of paths can
    be generated on any worker without coordination.
    """
    if master_seed < 0 or path_index < 0:
        raise ValueError("master_seed and path_index must be nonnegative")
    key = np.array([master_seed, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def draw_noise(model: HybridModel, rng: np.random.Generator, dt: float) -> NoiseIncrement:
    """One step of Wiener increments: the dw_r block first, then dw_i."""
    m = len(model.observables)
    root = np.sqrt(dt)
    return NoiseIncrement(dw_r=rng.standard_normal(m) * root, dw_i=rng.standard_normal(m) * root)


# ---------------------------------------------------------------------------
# single-state operations


def _state_parts(state: HybridState):
    x = coords_of(state.quantum)
    return x, state.classical.q, state.classical.p


def _hdet_gradient(model: HybridModel, x: np.ndarray, q: float, p: float) -> np.ndarray:
    grad = gradient_expectation(model.h_q, x)
    f_val = float(model.coupling_f.value(q, p))
    if f_val != 0.0:
        for obs in model.observables.members:
            grad = grad + f_val * gradient_expectation(obs, x)
    return grad


def lagrange_multiplier(model: HybridModel, state: HybridState) -> float:
    """Multiplier {Gamma, H_det} / |grad Gamma|^2, zero on the constraint
    surface (regularized); makes the deterministic drift preserve Gamma."""
    x, q, p = _state_parts(state)
    gg = constraint(model.observables, x).gradient
    den = float(gg @ gg)
    if den < LAMBDA_REGULARIZATION:
        return 0.0
    num = float(gg @ omega_apply(_hdet_gradient(model, x, q, p)))
    return num / den


def drift_quantum(model: HybridModel, state: HybridState) -> np.ndarray:
    """Deterministic quantum drift: omega*grad(H_det) - lambda*grad(Gamma)."""
    x, q, p = _state_parts(state)
    gg = constraint(model.observables, x).gradient
    ghdet = _hdet_gradient(model, x, q, p)
    den = float(gg @ gg)
    out = omega_apply(ghdet)
    if den >= LAMBDA_REGULARIZATION:
        lam = float(gg @ omega_apply(ghdet)) / den
        out = out - lam * gg
    return out


def noise_compensation_drift(model: HybridModel, state: HybridState) -> np.ndarray:
    """Ito correction accompanying the localization noise channels.

    Equals -(noise_amplitude)^2 * grad(Gamma).  The Euler-Maruyama step adds
    it to the deterministic drift so the noise-averaged change of every
    monitored expectation vanishes; without it the second-order part of the
    Ito increments biases the flow away from the constraint surface and the
    branch statistics.  Identically zero when the noise is off.
    """
    x = coords_of(state.quantum)
    k = model.noise_amplitude
    if k == 0.0:
        return np.zeros_like(x)
    return -(k * k) * constraint(model.observables, x).gradient


def diffusion_quantum(model: HybridModel, state: HybridState, dw: NoiseIncrement) -> np.ndarray:
    """Stochastic increment: per observable, omega*grad(A) dw_r + grad(A) dw_i,
    all scaled by the noise amplitude."""
    x = coords_of(state.quantum)
    members = model.observables.members
    if dw.dw_r.size != len(members):
        raise ValueError(f"expected {len(members)} noise channels, got {dw.dw_r.size}")
    out = np.zeros_like(x)
    for i, obs in enumerate(members):
        ga = gradient_expectation(obs, x)
        out += omega_apply(ga) * dw.dw_r[i] + ga * dw.dw_i[i]
    return model.noise_amplitude * out


def drift_classical(model: HybridModel, state: HybridState) -> tuple:
    """Hamilton equations for (q, p), sourced by the summed expectation of the
    monitored observables through the coupling function."""
    if model.mode == "measurement-approx":
        raise ValueError("classical sector is frozen in measurement-approx mode")
    x, q, p = _state_parts(state)
    a_tot = sum(expectation(obs, x) for obs in model.observables.members)
    f = model.coupling_f
    dq = float(model.h_cl.dp(q, p)) + a_tot * float(f.dp(q, p))
    dp = -float(model.h_cl.dq(q, p)) - a_tot * float(f.dq(q, p))
    return dq, dp


def _hughston_drift(model: HybridModel, x: np.ndarray, q: float, p: float) -> np.ndarray:
    obs = model.observables.members[0]
    mu = model.hughston_mu
    return omega_apply(_hdet_gradient(model, x, q, p)) - (mu * mu / 8.0) * gradient_dispersion(obs, x)


def _deterministic_rhs(model: HybridModel, x: np.ndarray, q: float, p: float):
    if model.mode == "hamiltonian-only":
        dx = omega_apply(_hdet_gradient(model, x, q, p))
    elif model.mode == "hughston":
        dx = _hughston_drift(model, x, q, p)
    else:
        state = HybridState(StateVector(x), ClassicalPoint(q, p))
        dx = drift_quantum(model, state)
    if model.mode == "measurement-approx":
        return dx, 0.0, 0.0
    a_tot = sum(expectation(obs, x) for obs in model.observables.members)
    f = model.coupling_f
    dq = float(model.h_cl.dp(q, p)) + a_tot * float(f.dp(q, p))
    dp = -float(model.h_cl.dq(q, p)) - a_tot * float(f.dq(q, p))
    return dx, dq, dp


def _renormalized(x: np.ndarray) -> np.ndarray:
    return x * np.sqrt(2.0 / float(x @ x))


def _check_finite(x: np.ndarray, q: float, p: float, t: float):
    if not (np.all(np.isfinite(x)) and np.isfinite(q) and np.isfinite(p)):
        raise NumericalBlowUpError(f"{_BLOWUP_PREFIX} at t={t!r}")


def step(model: HybridModel, state: HybridState, dt: float, rng) -> HybridState:
    """Advance one step: Euler-Maruyama when stochastic, RK4 when the
    dynamics is deterministic.  Renormalizes the quantum state."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if model.mode == "hughston" and not model.is_deterministic:
        return step_hughston(model, state, dt, rng)
    x, q, p = _state_parts(state)
    t1 = state.time + dt

    if model.is_deterministic:
        xn, qn, pn = _rk4(model, x, q, p, dt)
    else:
        dw = draw_noise(model, rng, dt)
        drift = drift_quantum(model, state) + noise_compensation_drift(model, state)
        xn = x + dt * drift + diffusion_quantum(model, state, dw)
        xn = _renormalized(xn)
        if model.mode == "measurement-approx":
            qn, pn = q, p
        else:
            dq, dp = drift_classical(model, state)
            qn, pn = q + dt * dq, p + dt * dp

    _check_finite(xn, qn, pn, t1)
    return HybridState(StateVector(xn), ClassicalPoint(qn, pn), t1)


def step_hughston(model: HybridModel, state: HybridState, dt: float, rng) -> HybridState:
    """Euler-Maruyama step of the single-observable collapse equation with
    one real noise channel of strength noise_amplitude * hughston_mu / 2."""
    if model.mode != "hughston":
        raise ValueError(f"step_hughston requires hughston mode, model is in {model.mode!r}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x, q, p = _state_parts(state)
    t1 = state.time + dt
    if model.is_deterministic:
        xn, qn, pn = _rk4(model, x, q, p, dt)
    else:
        obs = model.observables.members[0]
        dw = float(rng.standard_normal()) * np.sqrt(dt)
        coeff = model.noise_amplitude * model.hughston_mu / 2.0
        xn = x + dt * _hughston_drift(model, x, q, p) + coeff * gradient_expectation(obs, x) * dw
        xn = _renormalized(xn)
        state_pre = HybridState(StateVector(x), ClassicalPoint(q, p))
        dq, dp = drift_classical(model, state_pre)
        qn, pn = q + dt * dq, p + dt * dp
    _check_finite(xn, qn, pn, t1)
    return HybridState(StateVector(xn), ClassicalPoint(qn, pn), t1)


def _rk4(model: HybridModel, x, q, p, dt):
    k1 = _deterministic_rhs(model, x, q, p)
    k2 = _deterministic_rhs(model, x + 0.5 * dt * k1[0], q + 0.5 * dt * k1[1], p + 0.5 * dt * k1[2])
    k3 = _deterministic_rhs(model, x + 0.5 * dt * k2[0], q + 0.5 * dt * k2[1], p + 0.5 * dt * k2[2])
    k4 = _deterministic_rhs(model, x + dt * k3[0], q + dt * k3[1], p + dt * k3[2])
    sixth = dt / 6.0
    xn = x + sixth * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    qn = q + sixth * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    pn = p + sixth * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
    return _renormalized(xn), qn, pn


# ---------------------------------------------------------------------------
# batched path engine


class _BatchKernel:
    """Fixed-step integrator for a contiguous block of paths.

    All per-step arithmetic is elementwise or uses einsum contractions whose
    per-element reduction order is fixed, so each path's trajectory is
    bit-identical however the paths are batched.  Noise comes from each
    path's own Philox stream in blocks of NOISE_BLOCK_STEPS steps.
    """

    def __init__(self, model: HybridModel, x0, q0, p0, t0, t_final, dt,
                 master_seed, lo, hi, sample_stride, record_states,
                 extra_observables, store_series):
        if t_final < t0:
            raise ValueError(f"t_final {t_final} precedes start time {t0}")
        if dt <= 0:
            raise ValueError(f"dt must be positive, got {dt}")
        if sample_stride < 1:
            raise ValueError(f"sample_stride must be >= 1, got {sample_stride}")
        span = t_final - t0
        n_steps = int(round(span / dt))
        if abs(n_steps * dt - span) > 1e-9 * max(1.0, abs(span)):
            raise ValueError("t_final - start time must be an integer number of steps")
        if n_steps % sample_stride != 0:
            raise ValueError(
                f"step count {n_steps} is not a multiple of sample_stride {sample_stride}"
            )

        self.model = model
        self.dt = dt
        self.t0 = t0
        self.n_steps = n_steps
        self.stride = sample_stride
        self.n_samples = n_steps // sample_stride + 1
        self.lo, self.hi = lo, hi
        self.B = hi - lo
        self.master_seed = master_seed
        self.store_series = store_series

        self.n = model.h_q.dim
        self.mode = model.mode
        self.k = model.noise_amplitude
        self.deterministic = model.is_deterministic
        self.frozen_classical = self.mode == "measurement-approx"
        self.members = model.observables.members
        self.m_count = len(self.members)
        self.track = list(self.members) + [
            o for o in extra_observables if o is not None
        ]
        self.reps = [o.real_rep for o in self.members]
        self.reps_sq = [o.real_rep_squared for o in self.members]
        self.track_reps = [(o.real_rep, o.real_rep_squared) for o in self.track]
        self.m_h = model.h_q.real_rep
        self.delta_min = model.observables.delta_min
        self.h_cl = model.h_cl
        self.f = model.coupling_f
        self.coupling_zero = bool(getattr(model.coupling_f, "is_zero", False))
        self.mu_h = model.hughston_mu
        self.record_states = record_states
        self.with_concurrence = self.n == 4

        x0 = np.asarray(x0, dtype=float)
        scale = np.sqrt(2.0 / float(x0 @ x0))
        self.X = np.tile(x0 * scale, (self.B, 1))
        self.q = np.full(self.B, float(q0))
        self.p = np.full(self.B, float(p0))
        if self.frozen_classical:
            self.f0 = float(model.coupling_f.value(q0, p0))
            self.dfdp0 = float(model.coupling_f.dp(q0, p0))
            self.alpha_rate = np.zeros(self.B)
            self.p[:] = float(p0)

        det = model.detector
        self.thr = det.threshold
        self.dwell = det.dwell_samples
        self.run_ct = np.zeros(self.B, dtype=np.int64)
        self.fire_t = np.full(self.B, np.nan)
        self.fired_ever = np.zeros(self.B, dtype=bool)
        self.err_t = np.full(self.B, np.nan)
        self.norm_drift = np.zeros(self.B)

        s_shape = self.n_samples if store_series else 1
        t_count = len(self.track)
        self.exp_s = np.empty((s_shape, self.B, t_count))
        self.disp_s = np.empty((s_shape, self.B, t_count))
        self.q_s = np.empty((s_shape, self.B))
        self.p_s = np.empty((s_shape, self.B))
        self.gamma_s = np.empty((s_shape, self.B))
        self.conc_s = np.empty((s_shape, self.B)) if self.with_concurrence else None
        self.states_s = (
            np.empty((s_shape, self.B, 2 * self.n)) if record_states else None
        )

        if not self.deterministic:
            self.gens = [path_rng(master_seed, i) for i in range(lo, hi)]
            if self.mode == "hughston":
                self.n_channels = 1
                self.noise_coeff = self.k * self.mu_h / 2.0 * np.sqrt(dt)
            else:
                self.n_channels = 2 * self.m_count
                self.noise_coeff = self.k * np.sqrt(dt)
            self.block = None
            self.block_pos = NOISE_BLOCK_STEPS

    # -- batched primitives -------------------------------------------------

    def _mv(self, m, v):
        return np.einsum("ij,bj->bi", m, v)

    def _dot(self, u, v):
        return np.einsum("bi,bi->b", u, v)

    def _omega(self, v):
        n = self.n
        return np.concatenate((v[:, n:], -v[:, :n]), axis=1)

    def _next_noise(self):
        # (B, C) increments pre-scaled by the mode's noise coefficient
        if self.block_pos >= NOISE_BLOCK_STEPS:
            arr = np.empty((NOISE_BLOCK_STEPS, self.B, self.n_channels))
            for b, gen in enumerate(self.gens):
                arr[:, b, :] = gen.standard_normal((NOISE_BLOCK_STEPS, self.n_channels))
            arr *= self.noise_coeff
            self.block = arr
            self.block_pos = 0
        row = self.block[self.block_pos]
        self.block_pos += 1
        return row

    def _coupling_value(self, q, p):
        if self.frozen_classical:
            return self.f0
        if self.coupling_zero:
            return None
        return self.f.value(q, p)

    def _fields(self, X, f_val, need_gamma, need_obs):
        """Shared per-step quantities.  Returns (r2, grad_hdet, grad_gamma,
        grad_a list, a_total); gamma/observable parts are None when skipped."""
        r2 = self._dot(X, X)
        inv2 = 2.0 / r2
        hx = self._mv(self.m_h, X)
        gh = (hx - (self._dot(X, hx) / r2)[:, None] * X) * inv2[:, None]
        if not need_obs:
            return r2, gh, None, None, None
        gg = None
        ga_list = []
        a_tot = None
        for i in range(self.m_count):
            ax = self._mv(self.reps[i], X)
            a = self._dot(X, ax) / r2
            ga = (ax - a[:, None] * X) * inv2[:, None]
            ga_list.append(ga)
            a_tot = a if a_tot is None else a_tot + a
            if need_gamma:
                sx = self._mv(self.reps_sq[i], X)
                a2 = self._dot(X, sx) / r2
                gd = (sx - a2[:, None] * X) * inv2[:, None] - (2.0 * a)[:, None] * ga
                gg = gd if gg is None else gg + gd
        ghdet = gh
        if f_val is not None:
            ga_sum = ga_list[0]
            for ga in ga_list[1:]:
                ga_sum = ga_sum + ga
            if np.ndim(f_val) == 0:
                ghdet = gh + f_val * ga_sum
            else:
                ghdet = gh + f_val[:, None] * ga_sum
        return r2, ghdet, gg, ga_list, a_tot

    def _lambda(self, ghdet, gg):
        den = self._dot(gg, gg)
        num = self._dot(gg, self._omega(ghdet))
        safe = np.where(den > LAMBDA_REGULARIZATION, den, 1.0)
        return np.where(den > LAMBDA_REGULARIZATION, num / safe, 0.0)

    def _classical_rates(self, q, p, a_tot):
        if self.coupling_zero or a_tot is None:
            return self.h_cl.dp(q, p), -self.h_cl.dq(q, p)
        return (
            self.h_cl.dp(q, p) + a_tot * self.f.dp(q, p),
            -self.h_cl.dq(q, p) - a_tot * self.f.dq(q, p),
        )

    def _renorm(self, X):
        r2 = self._dot(X, X)
        self.norm_drift = np.maximum(self.norm_drift, np.abs(r2 - 2.0))
        return X * np.sqrt(2.0 / r2)[:, None]

    # -- steps --------------------------------------------------------------

    def _em_step_fht(self, dw):
        X, q, p = self.X, self.q, self.p
        f_val = self._coupling_value(q, p)
        r2, ghdet, gg, ga_list, a_tot = self._fields(X, f_val, True, True)
        lam_eff = self._lambda(ghdet, gg) + self.k * self.k
        Xn = X + self.dt * (self._omega(ghdet) - lam_eff[:, None] * gg)
        for i in range(self.m_count):
            ga = ga_list[i]
            Xn = Xn + self._omega(ga) * dw[:, i, None] + ga * dw[:, self.m_count + i, None]
        self.X = self._renorm(Xn)
        if self.frozen_classical:
            self.q = q + self.dt * self.alpha_rate
        else:
            dqdt, dpdt = self._classical_rates(q, p, a_tot)
            self.q = q + self.dt * dqdt
            self.p = p + self.dt * dpdt

    def _em_step_hughston(self, dw):
        X, q, p = self.X, self.q, self.p
        f_val = self._coupling_value(q, p)
        r2, ghdet, gg, ga_list, a_tot = self._fields(X, f_val, True, True)
        drift = self._omega(ghdet) - (self.mu_h * self.mu_h / 8.0) * gg
        Xn = X + self.dt * drift + ga_list[0] * dw[:, 0, None]
        self.X = self._renorm(Xn)
        dqdt, dpdt = self._classical_rates(q, p, a_tot)
        self.q = q + self.dt * dqdt
        self.p = p + self.dt * dpdt

    def _rhs(self, X, q, p):
        f_val = self._coupling_value(q, p)
        if self.mode == "hamiltonian-only":
            need_obs = not self.coupling_zero
            r2, ghdet, gg, ga_list, a_tot = self._fields(X, f_val, False, need_obs)
            dX = self._omega(ghdet)
        elif self.mode == "hughston":
            r2, ghdet, gg, ga_list, a_tot = self._fields(X, f_val, True, True)
            dX = self._omega(ghdet) - (self.mu_h * self.mu_h / 8.0) * gg
        else:
            r2, ghdet, gg, ga_list, a_tot = self._fields(X, f_val, True, True)
            lam = self._lambda(ghdet, gg)
            dX = self._omega(ghdet) - lam[:, None] * gg
        if self.frozen_classical:
            return dX, self.alpha_rate, np.zeros_like(p)
        dq, dp = self._classical_rates(q, p, a_tot)
        return dX, np.broadcast_to(dq, q.shape), np.broadcast_to(dp, p.shape)

    def _rk4_step(self):
        X, q, p = self.X, self.q, self.p
        dt = self.dt
        h = 0.5 * dt
        k1 = self._rhs(X, q, p)
        k2 = self._rhs(X + h * k1[0], q + h * k1[1], p + h * k1[2])
        k3 = self._rhs(X + h * k2[0], q + h * k2[1], p + h * k2[2])
        k4 = self._rhs(X + dt * k3[0], q + dt * k3[1], p + dt * k3[2])
        sixth = dt / 6.0
        Xn = X + sixth * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        self.q = q + sixth * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        self.p = p + sixth * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
        self.X = self._renorm(Xn)

    # -- sampling and detection ---------------------------------------------

    def _take_sample(self, sample_idx, t_s):
        X = self.X
        slot = sample_idx if self.store_series else 0
        r2 = self._dot(X, X)
        gamma = np.full(self.B, -self.delta_min)
        for j, (m, m_sq) in enumerate(self.track_reps):
            a = self._dot(X, self._mv(m, X)) / r2
            a2 = self._dot(X, self._mv(m_sq, X)) / r2
            d = a2 - a * a
            self.exp_s[slot, :, j] = a
            self.disp_s[slot, :, j] = d
            if j < self.m_count:
                gamma += d
        self.gamma_s[slot] = gamma
        self.q_s[slot] = self.q
        self.p_s[slot] = self.p
        if self.with_concurrence:
            x1, x2, x3, x4 = X[:, 0], X[:, 1], X[:, 2], X[:, 3]
            y1, y2, y3, y4 = X[:, 4], X[:, 5], X[:, 6], X[:, 7]
            re = x1 * x4 - y1 * y4 - x2 * x3 + y2 * y3
            im = x1 * y4 + y1 * x4 - x2 * y3 - y2 * x3
            self.conc_s[slot] = np.sqrt(re * re + im * im) / r2
        if self.record_states:
            self.states_s[slot] = X

        # blow-up surfaces as NaN in the sampled quantities
        finite = np.isfinite(gamma) & np.isfinite(self.q) & np.isfinite(self.p)
        new_bad = ~finite & np.isnan(self.err_t)
        if new_bad.any():
            self.err_t[new_bad] = t_s

        below = gamma < self.thr
        self.run_ct = np.where(below, self.run_ct + 1, 0)
        just_fired = self.run_ct == self.dwell
        if just_fired.any():
            self.fire_t[just_fired] = t_s
            if self.frozen_classical:
                new = just_fired & ~self.fired_ever
                if new.any():
                    self.alpha_rate[new] = self.exp_s[slot, new, 0] * self.dfdp0
            self.fired_ever |= just_fired

    # -- driver -------------------------------------------------------------

    def run(self):
        if self.deterministic:
            advance = lambda: self._rk4_step()
        elif self.mode == "hughston":
            advance = lambda: self._em_step_hughston(self._next_noise())
        else:
            advance = lambda: self._em_step_fht(self._next_noise())

        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            self._take_sample(0, self.t0)
            sample_idx = 0
            for s in range(1, self.n_steps + 1):
                advance()
                if s % self.stride == 0:
                    sample_idx += 1
                    self._take_sample(sample_idx, self.t0 + s * self.dt)
        return self._build_records()

    def _build_records(self):
        if self.store_series:
            step_of_sample = np.arange(self.n_samples) * self.stride
        else:
            step_of_sample = np.array([self.n_steps])
        times = self.t0 + step_of_sample * self.dt

        eigs = self.members[0].distinct_eigenvalues
        final_a0 = self.exp_s[-1, :, 0]
        branch_idx = np.argmin(np.abs(final_a0[:, None] - eigs[None, :]), axis=1)
        converged = (self.run_ct >= self.dwell) & np.isnan(self.err_t)

        records = []
        for b in range(self.B):
            error = None
            if not np.isnan(self.err_t[b]):
                error = f"{_BLOWUP_PREFIX} at t={self.err_t[b]!r}"
            elif self.frozen_classical and not converged[b]:
                error = (
                    f"{_NONCONVERGENCE_PREFIX} by t={times[-1]!r} "
                    f"(Gamma={self.gamma_s[-1, b]!r})"
                )
            records.append(TrajectoryRecord(
                times=times,
                expectations=self.exp_s[:, b, :].copy(),
                dispersions=self.disp_s[:, b, :].copy(),
                q=self.q_s[:, b].copy(),
                p=self.p_s[:, b].copy(),
                gamma=self.gamma_s[:, b].copy(),
                seed=self.master_seed,
                path_index=self.lo + b,
                concurrence=self.conc_s[:, b].copy() if self.with_concurrence else None,
                states=self.states_s[:, b, :].copy() if self.record_states else None,
                converged_branch=float(eigs[branch_idx[b]]) if converged[b] else None,
                convergence_time=float(self.fire_t[b]) if converged[b] else None,
                norm_drift_max=float(self.norm_drift[b]),
                error=error,
                final_state=self.X[b].copy(),
            ))
        return records


def run_paths(model, x0, q0, p0, t0, t_final, dt, master_seed, lo, hi,
              sample_stride=10, record_states=False, extra_observables=(),
              store_series=True):
    """Integrate paths lo..hi-1 as one batch; per-path errors are recorded on
    the returned TrajectoryRecords rather than raised."""
    kern = _BatchKernel(model, x0, q0, p0, t0, t_final, dt, master_seed, lo, hi,
                        sample_stride, record_states, tuple(extra_observables),
                        store_series)
    return kern.run()


def simulate_path(model: HybridModel, init: HybridState, t_final: float, dt: float,
                  seed: int, sample_stride: int = 10, record_states: bool = False,
                  extra_observables=(), path_index: int = 0) -> TrajectoryRecord:
    """Integrate a single path and return its record.

    Observables are sampled every ``sample_stride`` steps; ``t_final - init.time``
    must be an integer number of steps and a multiple of the stride.  The noise
    stream is determined by (seed, path_index) alone, so path ``i`` of an
    ensemble with the same master seed is reproduced exactly.  Raises on
    numerical blow-up and on measurement-approx non-convergence.
    """
    records = run_paths(model, coords_of(init.quantum), init.classical.q,
                        init.classical.p, init.time, t_final, dt, seed,
                        path_index, path_index + 1, sample_stride,
                        record_states, extra_observables)
    rec = records[0]
    if rec.error is not None:
        if rec.error.startswith(_BLOWUP_PREFIX):
            raise NumericalBlowUpError(rec.error)
        raise MeasurementConvergenceError(rec.error, final_gamma=float(rec.gamma[-1]))
    return rec


def measurement_approx_path(model: HybridModel, init: HybridState, t_final: float,
                            dt: float, seed: int, sample_stride: int = 10,
                            record_states: bool = False) -> TrajectoryRecord:
    """Run the idealized-measurement mode for one path.

    The quantum sector sees (q, p) frozen at the initial point; after the
    detector fires, q becomes a pointer moving at alpha * df/dp with alpha
    the monitored expectation at detection.  Raises
    MeasurementConvergenceError (carrying the final constraint value) if the
    detector never fires.
    """
    if model.mode != "measurement-approx":
        raise ValueError(f"model mode is {model.mode!r}, expected 'measurement-approx'")
    return simulate_path(model, init, t_final, dt, seed,
                         sample_stride=sample_stride, record_states=record_states)

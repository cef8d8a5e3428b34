"""Ready-made hybrid systems and named initial states.

Two builtin systems ship with the package:

``spin-measurement``
    One spin coupled to a classical oscillator through its momentum,
    monitoring the transverse spin component.  The stochastic dynamics
    drives the spin onto an eigenstate of the monitored component while the
    oscillator coordinate records which one.

``two-qubit``
    A pair of coupled qubits, with the oscillator momentum coupled to the
    z component of the first qubit.  Monitoring that component destroys the
    entanglement between the qubits; the hamiltonian-only mode keeps it
    oscillating.

Default parameters are duplicated in the packaged ``presets/*.json`` files;
a regression test keeps the two copies identical.  The defaults put the
localization terms in charge of the quantum sector: the noise amplitude is
order one while the oscillator is slow (``omega_cl`` well below the spin
frequencies), and ``hughston_mu`` is large enough that the hughston-mode
collapse rate (``hughston_mu**2 / 4``) dominates the spin precession, which
keeps that mode's branch statistics near the squared-overlap weights.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

from .dynamics import DetectorConfig, HybridModel
from .geometry import StateVector, from_complex
from .observables import (
    HermitianObservable,
    ObservableSet,
    identity,
    spin_x,
    spin_z,
    tensor_product,
)

MODEL_NAMES = ("spin-measurement", "two-qubit")


@dataclass(frozen=True)
class HarmonicOscillatorHamiltonian:
    """H_cl = p^2 / 2m + m w^2 q^2 / 2; methods accept scalars or arrays."""

    mass: float = 1.0
    frequency: float = 0.05

    def __post_init__(self):
        if not (np.isfinite(self.mass) and self.mass > 0):
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not (np.isfinite(self.frequency) and self.frequency >= 0):
            raise ValueError(f"frequency must be finite and >= 0, got {self.frequency}")

    def value(self, q, p):
        return p * p / (2.0 * self.mass) + 0.5 * self.mass * self.frequency**2 * q * q

    def dq(self, q, p):
        return self.mass * self.frequency**2 * q

    def dp(self, q, p):
        return p / self.mass


@dataclass(frozen=True)
class LinearMomentumCoupling:
    """f(q, p) = strength * p, the standard pointer coupling."""

    strength: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.strength):
            raise ValueError(f"strength must be finite, got {self.strength}")

    @property
    def is_zero(self) -> bool:
        return self.strength == 0.0

    def value(self, q, p):
        return self.strength * p

    def dq(self, q, p):
        return q * 0.0

    def dp(self, q, p):
        return q * 0.0 + self.strength


@dataclass(frozen=True)
class ZeroCoupling:
    """Decoupled classical sector."""

    is_zero = True

    def value(self, q, p):
        return q * 0.0

    def dq(self, q, p):
        return q * 0.0

    def dp(self, q, p):
        return q * 0.0


@dataclass(frozen=True)
class SpinMeasurementParams:
    omega_q: float = 1.0
    mass: float = 1.0
    omega_cl: float = 0.05
    mu: float = 1.0
    noise_amplitude: float = 1.0
    hughston_mu: float = 8.0

    def __post_init__(self):
        if not (np.isfinite(self.mass) and self.mass > 0):
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not (np.isfinite(self.noise_amplitude) and self.noise_amplitude >= 0):
            raise ValueError(f"noise_amplitude must be >= 0, got {self.noise_amplitude}")


@dataclass(frozen=True)
class TwoQubitParams:
    omega_q: float = 1.0
    c_coupling: float = 0.1
    mass: float = 1.0
    omega_cl: float = 0.05
    mu: float = 1.0
    noise_amplitude: float = 1.0
    hughston_mu: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.mass) and self.mass > 0):
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not (np.isfinite(self.noise_amplitude) and self.noise_amplitude >= 0):
            raise ValueError(f"noise_amplitude must be >= 0, got {self.noise_amplitude}")


def spin_measurement_model(params: SpinMeasurementParams | None = None,
                           mode: str = "fht",
                           detector: DetectorConfig | None = None) -> HybridModel:
    """Spin + oscillator: H_q = omega_q * sz, f = mu * p, monitoring sx."""
    params = params or SpinMeasurementParams()
    h_q = HermitianObservable(params.omega_q * spin_z().matrix, label="h_q")
    return HybridModel(
        h_q=h_q,
        h_cl=HarmonicOscillatorHamiltonian(mass=params.mass, frequency=params.omega_cl),
        coupling_f=LinearMomentumCoupling(strength=params.mu),
        observables=ObservableSet(members=(spin_x(),), delta_min=0.0),
        noise_amplitude=params.noise_amplitude,
        mode=mode,
        hughston_mu=params.hughston_mu,
        detector=detector or DetectorConfig(),
    )


def two_qubit_model(params: TwoQubitParams | None = None,
                    mode: str = "fht",
                    detector: DetectorConfig | None = None) -> HybridModel:
    """Coupled qubits + oscillator: H_q = w(sz1 + sz2) + c sx1*sx2, f = mu * p,
    monitoring the first qubit's z component."""
    params = params or TwoQubitParams()
    one = identity(2)
    sz1 = tensor_product(spin_z(), one, label="sz1")
    sz2 = tensor_product(one, spin_z(), label="sz2")
    sxx = tensor_product(spin_x(), spin_x(), label="sx1sx2")
    h_matrix = params.omega_q * (sz1.matrix + sz2.matrix) + params.c_coupling * sxx.matrix
    return HybridModel(
        h_q=HermitianObservable(h_matrix, label="h_q"),
        h_cl=HarmonicOscillatorHamiltonian(mass=params.mass, frequency=params.omega_cl),
        coupling_f=LinearMomentumCoupling(strength=params.mu),
        observables=ObservableSet(members=(sz1,), delta_min=0.0),
        noise_amplitude=params.noise_amplitude,
        mode=mode,
        hughston_mu=params.hughston_mu,
        detector=detector or DetectorConfig(),
    )


_PARAM_TYPES = {
    "spin-measurement": SpinMeasurementParams,
    "two-qubit": TwoQubitParams,
}
_BUILDERS = {
    "spin-measurement": spin_measurement_model,
    "two-qubit": two_qubit_model,
}
_PRESET_FILES = {
    "spin-measurement": "spin_measurement.json",
    "two-qubit": "two_qubit.json",
}


def default_params(name: str):
    """Builtin default parameters for a named model."""
    try:
        return _PARAM_TYPES[name]()
    except KeyError:
        raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}") from None


def packaged_default_params(name: str) -> dict:
    """The frozen copy of the defaults shipped as package data."""
    if name not in _PRESET_FILES:
        raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
    text = resources.files("qchybrid").joinpath("presets", _PRESET_FILES[name]).read_text()
    return json.loads(text)


def build_model(name: str, mode: str = "fht", params: dict | None = None,
                detector: DetectorConfig | None = None) -> HybridModel:
    """Construct a builtin model by name, with optional parameter overrides."""
    if name not in _BUILDERS:
        raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
    base = asdict(default_params(name))
    for key, value in (params or {}).items():
        if key not in base:
            raise ValueError(f"unknown parameter {key!r} for model {name!r}")
        base[key] = float(value)
    return _BUILDERS[name](_PARAM_TYPES[name](**base), mode=mode, detector=detector)


_SQ = 1.0 / np.sqrt(2.0)

INITIAL_STATES = {
    # spin-1/2 states; overlap74 has squared overlap 0.74 with the +1/2
    # eigenstate of sx and expectation <sx> = 0.24
    "overlap74": ((2 - 2j) / 5, (4 + 1j) / 5),
    "plus-x": (_SQ, _SQ),
    "minus-x": (_SQ, -_SQ),
    "up-z": (1.0, 0.0),
    "down-z": (0.0, 1.0),
    # two-qubit states
    "bell": (_SQ, 0.0, 0.0, _SQ),
    "updown": (0.0, 1.0, 0.0, 0.0),
    "downup": (0.0, 0.0, 1.0, 0.0),
}


def initial_state(name: str) -> StateVector:
    """Named initial quantum state."""
    try:
        amplitudes = INITIAL_STATES[name]
    except KeyError:
        known = ", ".join(sorted(INITIAL_STATES))
        raise ValueError(f"unknown initial state {name!r}; known states: {known}") from None
    return from_complex(np.array(amplitudes, dtype=complex))

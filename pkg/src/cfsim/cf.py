"""Park-vector arithmetic and the complex-frequency derivative operator.

A Park vector u = u_d + j*u_q collects the dq components of a three-phase
quantity on a rotating reference frame.  Its complex frequency (CF) is the
logarithmic derivative

    du/dt = (rho + j*omega) * u

whose real part rho is the rate of change of ln|u| (a radial "translation")
and whose imaginary part omega is the rate of change of the phase angle (a
rotation).  Everything in this module is pure and side-effect free.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

from .errors import MagnitudeUnderflow

#: Below this magnitude (pu) the CF of a vector is treated as undefined.
EPS_MAG = 1e-9


class ParkVector(complex):
    """Complex dq quantity in per unit on a chosen reference frame.

    Subclasses ``complex`` so all arithmetic works natively; ``d`` is the
    real part and ``q`` the imaginary part.
    """

    __slots__ = ()

    def __new__(cls, d: float = 0.0, q: float = 0.0) -> "ParkVector":
        if isinstance(d, complex) and q == 0.0:
            return super().__new__(cls, d.real, d.imag)
        return super().__new__(cls, d, q)

    @classmethod
    def from_complex(cls, z: complex) -> "ParkVector":
        return super().__new__(cls, z.real, z.imag)

    @property
    def d(self) -> float:
        return self.real

    @property
    def q(self) -> float:
        return self.imag

    def magnitude(self) -> float:
        return abs(self)

    def phase(self) -> float:
        """Phase angle in radians; undefined (raises) at near-zero magnitude."""
        if abs(self) <= EPS_MAG:
            raise MagnitudeUnderflow(f"phase undefined for |u|={abs(self):.3e}")
        return cmath.phase(self)

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"ParkVector(d={self.real!r}, q={self.imag!r})"


class ComplexFrequency(complex):
    """Complex frequency (rho, omega) in per unit on the nominal frequency.

    ``rho`` (real part) tracks magnitude change, ``omega`` (imaginary part)
    tracks rotation.  In the deviation convention used for reporting, a
    nominal steady state has value (0, 0).
    """

    __slots__ = ()

    def __new__(cls, rho: float = 0.0, omega: float = 0.0) -> "ComplexFrequency":
        if isinstance(rho, complex) and omega == 0.0:
            return super().__new__(cls, rho.real, rho.imag)
        return super().__new__(cls, rho, omega)

    @classmethod
    def from_complex(cls, z: complex) -> "ComplexFrequency":
        return super().__new__(cls, z.real, z.imag)

    @property
    def rho(self) -> float:
        return self.real

    @property
    def omega(self) -> float:
        return self.imag

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"ComplexFrequency(rho={self.real!r}, omega={self.imag!r})"


@dataclass(frozen=True)
class NominalBase:
    """Nominal per-unit bases: angular frequency, voltage and frequency."""

    f_n: float = 60.0
    v_n: float = 1.0

    def __post_init__(self) -> None:
        if self.f_n <= 0.0:
            raise ValueError(f"nominal frequency must be positive, got {self.f_n}")

    @property
    def omega_n(self) -> float:
        """Nominal angular frequency in rad/s."""
        return 2.0 * math.pi * self.f_n


def apply_cf(u: ParkVector, eta: ComplexFrequency) -> ParkVector:
    """Time derivative of ``u`` under complex frequency ``eta``: du/dt = eta*u."""
    return ParkVector.from_complex(complex(eta) * complex(u))


def cf_of_pair(u: ParkVector, udot: ParkVector) -> ComplexFrequency:
    """Recover the complex frequency from a vector and its derivative.

    Inverse of :func:`apply_cf`: eta = udot/u.  Raises
    :class:`MagnitudeUnderflow` when |u| <= EPS_MAG, where the CF is
    undefined.
    """
    if abs(u) <= EPS_MAG:
        raise MagnitudeUnderflow(f"CF undefined for |u|={abs(u):.3e} <= {EPS_MAG}")
    return ComplexFrequency.from_complex(complex(udot) / complex(u))


def to_grid_frame(u_local: ParkVector, delta: float) -> ParkVector:
    """Rotate a local-frame vector to the grid frame: u = exp(j*delta)*u'."""
    return ParkVector.from_complex(cmath.exp(1j * delta) * complex(u_local))


def to_local_frame(u_grid: ParkVector, delta: float) -> ParkVector:
    """Rotate a grid-frame vector to the local frame: u' = exp(-j*delta)*u."""
    return ParkVector.from_complex(cmath.exp(-1j * delta) * complex(u_grid))


def cf_local(eta_grid: ComplexFrequency, delta_dot: float) -> ComplexFrequency:
    """CF referred to a frame rotating at ``delta_dot`` relative to the grid.

    eta' = eta - j*delta_dot: only the rotational part shifts; applies
    identically to voltage and current CFs.
    """
    return ComplexFrequency(eta_grid.real, eta_grid.imag - delta_dot)


def complex_power(v: ParkVector, i: ParkVector) -> ParkVector:
    """Instantaneous complex power s = v * conj(i); Re = p, Im = q."""
    return ParkVector.from_complex(complex(v) * complex(i).conjugate())


def sdot_identity(eta_v: ComplexFrequency, eta_i: ComplexFrequency,
                  s: ParkVector) -> ParkVector:
    """Rate of change of complex power: sdot = (eta_v + conj(eta_i)) * s.

    The local-frame form with both CFs shifted by the same frame speed is
    identical because the j*delta_dot contributions cancel.
    """
    return ParkVector.from_complex(
        (complex(eta_v) + complex(eta_i).conjugate()) * complex(s))


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi] for display; internal angles stay unwrapped."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    return wrapped if wrapped != -math.pi else math.pi

"""Exception types shared across the simulator."""


class CfsimError(Exception):
    """Base class for all cfsim errors."""


class MagnitudeUnderflow(CfsimError):
    """A Park vector is too close to zero for the requested operation.

    Complex frequency is the logarithmic derivative of a Park vector and is
    undefined at (near-)zero magnitude; operations that divide by a vector
    raise this instead of fabricating a value.
    """


class DomainError(CfsimError):
    """A physical state left its admissible domain (e.g. non-positive speed)."""


class DuplicateBus(CfsimError):
    """Two buses in a network share an id."""


class DisconnectedGraph(CfsimError):
    """The branch set does not connect all buses."""


class NonConvergence(CfsimError):
    """Newton power flow failed; carries the per-iteration mismatch trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class InitializationInfeasible(CfsimError):
    """A device cannot be back-solved to equilibrium from the power flow."""


class StepNonConvergence(CfsimError):
    """The implicit integration step did not converge; try a smaller dt."""


class UnknownConfiguration(CfsimError):
    """Device configuration does not match any internal-frequency rule."""


class MissingChannel(CfsimError):
    """A requested time-series channel is not recorded."""


class ParseError(CfsimError):
    """Scenario or dataset text could not be parsed."""

    def __init__(self, message, path=None, line=None):
        loc = f"{path or '<input>'}:{line}" if line is not None else (path or "<input>")
        super().__init__(f"{loc}: {message}")
        self.path = path
        self.line = line


class ValidationError(CfsimError):
    """Scenario parsed but is not a valid simulation setup."""


class SolverError(CfsimError):
    """A run failed inside the numerical solvers."""

"""
Error types for the GP flow library
Every numerical failure the library can detect has its own class so the
CLI can map it to an exit code and the training loops can abort cleanly
"""


class GpFlowError(Exception):
    """Base class for all library errors"""


class NonFiniteInputError(GpFlowError, ValueError):
    """Input contains NaN or infinite values"""


class OutOfDomainError(GpFlowError, ValueError):
    """A value fell outside the open cube guarded by erf^-1"""

    def __init__(self, message, index=None, value=None):
        super().__init__(message)
        self.index = index
        self.value = value


class IntegrationEscapeError(GpFlowError):
    """An ODE particle left the closed cube during integration"""

    def __init__(self, step, point):
        self.step = step
        self.point = point
        super().__init__(f"Particle escaped the cube at RK4 step {step}: {point}")


class DegenerateJacobianError(GpFlowError):
    """Finite-difference Jacobian determinant has the wrong sign or vanishes"""


class InverseUnavailableError(GpFlowError):
    """The base flow does not expose a cheap inverse"""


class NonFiniteObjectiveError(GpFlowError):
    """Objective evaluated to NaN or infinity before differentiation"""


class DimensionMismatchError(GpFlowError, ValueError):
    """Two checkpoints or arrays disagree on the dimension d"""


class ConfigError(GpFlowError, ValueError):
    """Run configuration failed validation"""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__('; '.join(self.errors))


class TrainingAbortedError(GpFlowError):
    """Training stopped on a numerical failure

    Carries the epoch and step at which it stopped and the last parameters
    that produced a finite objective, so callers can keep a partial checkpoint.
    """

    def __init__(self, message, epoch, step, last_params=None):
        self.epoch = epoch
        self.step = step
        self.last_params = last_params
        super().__init__(f"{message} (epoch {epoch}, step {step})")

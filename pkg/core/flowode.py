"""
Flow ODE Module
Fixed-step RK4 integration of dX/dt = v(t, X) on [0, T]. The time-T map
phi is volume preserving when v is divergence free, and stays in the cube
when v . n = 0 on the faces. The reverse direction integrates the same
grid backwards to realize phi^-1.
"""

import logging
from dataclasses import dataclass, replace

import torch

from config import DEFAULT_N_STEPS, ESCAPE_TOL
from core.errors import IntegrationEscapeError, OutOfDomainError
from core.fdiff import finite_difference_jacobian

logger = logging.getLogger(__name__)

DIRECTIONS = ('forward', 'reverse')


@dataclass
class OdeMap:
    """
    The time-T flow map of a velocity field

    Attributes:
        field: callable (x, t) -> v, batched over the leading dimensions of x
        n_steps: number of uniform RK4 steps
        t_final: integration horizon T
        direction: 'forward' realizes phi, 'reverse' realizes phi^-1
        check_domain: raise when a particle leaves the closed cube
    """
    field: object
    n_steps: int = DEFAULT_N_STEPS
    t_final: float = 1.0
    direction: str = 'forward'
    check_domain: bool = True

    def __post_init__(self):
        if self.n_steps <= 0:
            raise ValueError(f"n_steps must be positive, got {self.n_steps}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"Unknown direction '{self.direction}'")

    def reversed(self):
        """Same field and grid, opposite direction"""
        other = 'reverse' if self.direction == 'forward' else 'forward'
        return replace(self, direction=other)

    def __call__(self, x):
        return integrate(self, x)

    def inverse(self, y):
        return integrate(self.reversed(), y)


@dataclass
class Trajectory:
    """Particle positions on the RK4 grid; states[k] is the position at times[k]"""
    times: torch.Tensor
    states: torch.Tensor

    @property
    def final(self):
        return self.states[-1]


def time_grid(ode_map, dtype=torch.float64):
    """Node times in integration order (decreasing for the reverse direction)"""
    grid = torch.linspace(0.0, ode_map.t_final, ode_map.n_steps + 1, dtype=dtype)
    return grid if ode_map.direction == 'forward' else grid.flip(0)


def _check_inside(x, step):
    outside = x.abs() > 1 + ESCAPE_TOL
    if bool(outside.any()):
        row = outside.reshape(-1, x.shape[-1]).any(-1).nonzero()[0, 0]
        point = x.reshape(-1, x.shape[-1])[row].detach().tolist()
        raise IntegrationEscapeError(step, point)


def _rk4_steps(ode_map, x0, keep_states):
    times = time_grid(ode_map, x0.dtype)
    h = ode_map.t_final / ode_map.n_steps
    if ode_map.direction == 'reverse':
        h = -h
    v = ode_map.field

    if ode_map.check_domain and bool((x0.abs() > 1 + ESCAPE_TOL).any()):
        raise OutOfDomainError("Initial points must lie in the closed cube [-1, 1]^d")

    x = x0
    states = [x0] if keep_states else None
    for step in range(ode_map.n_steps):
        t = times[step]
        k1 = v(x, t)
        k2 = v(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = v(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = v(x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if ode_map.check_domain:
            _check_inside(x, step + 1)
        if keep_states:
            states.append(x)
    return times, x, states


def integrate(ode_map, x0):
    """
    Integrate a batch of points through the flow map

    Args:
        ode_map: OdeMap
        x0: (..., d) tensor of starting points in the cube

    Returns:
        torch.Tensor: end points, same shape as x0

    Raises:
        IntegrationEscapeError: a particle left the cube by more than ESCAPE_TOL
    """
    _, x, _ = _rk4_steps(ode_map, x0, keep_states=False)
    return x


def integrate_trajectory(ode_map, x0):
    """Like integrate, recording all n_steps + 1 states"""
    times, _, states = _rk4_steps(ode_map, x0, keep_states=True)
    return Trajectory(times=times, states=torch.stack(states))


def volume_residual(ode_map, x, h=1e-5):
    """|det grad phi(x) - 1| per point, with a central finite-difference Jacobian"""
    x = x.reshape(-1, x.shape[-1])
    with torch.no_grad():
        jac = finite_difference_jacobian(lambda p: integrate(ode_map, p), x, h)
    return (torch.linalg.det(jac) - 1).abs()

"""
Euler Regularization Module
Penalizes the non-gradient part of the Lagrangian acceleration
w = Dv/Dt along particle paths. A field solving the incompressible Euler
equations has w = -grad p, whose Jacobian is symmetric, so the penalty is
the squared antisymmetric form (y^T J z - z^T J y)^2 for random probes y, z.
Also provides the kinetic path energy diagnostic.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch

from core.flowode import integrate_trajectory

logger = logging.getLogger(__name__)

DEFAULT_DT = 2 * math.sqrt(torch.finfo(torch.float64).eps)
JVP_METHODS = ('autograd', 'finite_difference')


@dataclass
class EulerPenaltyConfig:
    """
    Settings of the Euler penalty and its weight schedule

    The weight starts at lambda0 and is divided by decay_factor every
    decay_period epochs, n_decays times at most. decay_period None means
    "spread the decays evenly over the run" and is resolved by the trainer.
    """
    lambda0: float = 0.0
    decay_factor: float = 2.0
    decay_period: Optional[int] = None
    n_decays: int = 5
    dt: float = DEFAULT_DT
    probes_per_point: int = 1
    seed: int = 0
    jvp: str = 'autograd'

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.lambda0 < 0:
            raise ValueError(f"lambda0 must be non-negative, got {self.lambda0}")
        if self.probes_per_point <= 0:
            raise ValueError("probes_per_point must be positive")
        if self.jvp not in JVP_METHODS:
            raise ValueError(f"Unknown Jacobian-vector method '{self.jvp}'")

    @property
    def enabled(self):
        return self.lambda0 > 0


def lagrangian_accel(field, x, t, dt=DEFAULT_DT):
    """
    First-order Lagrangian estimate of Dv/Dt at particle position x

    One explicit Euler sub-step moves the particle to x + dt v(t, x); the
    result is [v(t + dt, x') - v(t, x)] / dt.
    """
    v0 = field(x, t)
    v1 = field(x + dt * v0, t + dt)
    return (v1 - v0) / dt


def antisymmetry_probe(w, x, y, z, method='autograd', eps=1e-5):
    """
    (y^T J z - z^T J y)^2 per point, J the Jacobian of w at x

    With 'autograd' both bilinear terms come from vector-Jacobian products
    (y^T J z = (J^T y) . z), so J is never materialized and the result is
    differentiable with respect to anything w depends on. 'finite_difference'
    uses central differences of w along z and y instead.
    """
    if method == 'finite_difference':
        jz = (w(x + eps * z) - w(x - eps * z)) / (2 * eps)
        jy = (w(x + eps * y) - w(x - eps * y)) / (2 * eps)
        return ((y * jz).sum(-1) - (z * jy).sum(-1)) ** 2

    with torch.enable_grad():
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        wx = w(x)
        if not wx.requires_grad:
            # w does not depend on x
            return x.new_zeros(x.shape[:-1])
        jty, = torch.autograd.grad(wx, x, grad_outputs=y, create_graph=True, retain_graph=True, allow_unused=True)
        jtz, = torch.autograd.grad(wx, x, grad_outputs=z, create_graph=True, retain_graph=True, allow_unused=True)
    if jty is None:
        return x.new_zeros(x.shape[:-1])
    return ((jty * z).sum(-1) - (jtz * y).sum(-1)) ** 2


def asym_probe(field, x, t, y, z, dt=DEFAULT_DT, method='autograd'):
    """Antisymmetry probe of the Lagrangian acceleration of a field at time t"""
    return antisymmetry_probe(lambda p: lagrangian_accel(field, p, t, dt), x, y, z, method=method)


def penalty_along(field, traj, config, generator=None):
    """
    Mean antisymmetry probe over a precomputed trajectory

    Probes y, z ~ N(0, I) are drawn independently for every (node, point,
    probe) from the given generator, or from one seeded with config.seed.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(int(config.seed))
    states = traj.states
    shape = (config.probes_per_point, *states.shape[1:])
    total = states.new_zeros(())
    for t, pos in zip(traj.times, states):
        for y, z in zip(torch.randn(shape, generator=generator, dtype=states.dtype),
                        torch.randn(shape, generator=generator, dtype=states.dtype)):
            total = total + asym_probe(field, pos, t, y, z, config.dt, config.jvp).mean()
    return total / (len(traj.times) * config.probes_per_point)


def euler_penalty(ode_map, batch, config, generator=None):
    """Integrate batch through ode_map and average the probe over all RK4 nodes"""
    return penalty_along(ode_map.field, integrate_trajectory(ode_map, batch), config, generator)


def energy_along(field, traj):
    """Trapezoidal time integral of the mean kinetic energy 1/2 |v|^2 along traj"""
    kinetic = torch.stack([
        0.5 * (field(pos, t) ** 2).sum(-1).mean() for t, pos in zip(traj.times, traj.states)
    ])
    return torch.trapezoid(kinetic, traj.times).abs()


def path_energy(ode_map, batch):
    """(1/N) sum_i int_0^T 1/2 |v(t, X(t, x_i))|^2 dt"""
    return energy_along(ode_map.field, integrate_trajectory(ode_map, batch))

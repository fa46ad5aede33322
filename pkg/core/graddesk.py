"""
Gradient Desk Module
Parameter vectors, reverse-mode gradients of scalar objectives, a hand-written
Adam update and the two GP training loops:

    forward:  min E_data   |x - s(f(x))|^2 + lambda R   (needs data)
    backward: min E_N(0,I) |x - g(s(x))|^2 + lambda R   (needs g = f^-1)

Gradients are taken through the exact computational graph of the fixed-step
RK4 integrator, so they can be checked against finite differences.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Optional

import torch
from torch import nn
from torch.func import functional_call
from torch.nn.utils import parameters_to_vector, vector_to_parameters
from tqdm import tqdm

from config import DTYPE, DEFAULT_N_STEPS
from core.divfree import VelocityField
from core.errors import (
    GpFlowError,
    InverseUnavailableError,
    NonFiniteObjectiveError,
    TrainingAbortedError,
)
from core.eulerreg import EulerPenaltyConfig, energy_along, penalty_along
from core.flowode import OdeMap
from core.gaussmap import GpFlow, gp_trajectory
from core.otlab import TransportReport, composed_nll

if TYPE_CHECKING:
    from core.baseflow import BaseFlow

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class _Bound(nn.Module):
    """Runs fn(module, *args) so functional_call can swap the module's parameters"""

    def __init__(self, module, fn):
        super().__init__()
        self.module = module
        self.fn = fn

    def forward(self, *args):
        return self.fn(self.module, *args)


@dataclass
class ParamVector:
    """
    Flat view of trainable parameters

    Attributes:
        values: 1-D tensor, parameters concatenated in declaration order
        names: parameter names, empty for a free-standing vector
        shapes: matching parameter shapes
    """
    values: torch.Tensor
    names: tuple = ()
    shapes: tuple = ()

    @classmethod
    def from_module(cls, module):
        named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
        if named:
            values = parameters_to_vector([p for _, p in named]).detach().clone()
        else:
            values = torch.zeros(0, dtype=DTYPE)
        return cls(values, tuple(n for n, _ in named), tuple(tuple(p.shape) for _, p in named))

    def __len__(self):
        return self.values.numel()

    def with_values(self, values):
        return replace(self, values=values)

    def unflatten(self, values=None):
        """name -> view of values with the parameter's shape"""
        values = self.values if values is None else values
        out, offset = {}, 0
        for name, shape in zip(self.names, self.shapes):
            size = int(torch.Size(shape).numel())
            out[name] = values[offset:offset + size].view(shape)
            offset += size
        if offset != values.numel():
            raise ValueError(f"Parameter vector has {values.numel()} entries, layout expects {offset}")
        return out

    def call(self, module, values, fn, *args):
        """fn(module, *args) evaluated with the module's parameters replaced by values"""
        bound = _Bound(module, fn)
        params = {f'module.{k}': v for k, v in self.unflatten(values).items()}
        return functional_call(bound, params, args)

    def load_into(self, module, values=None):
        values = self.values if values is None else values
        trainable = [p for p in module.parameters() if p.requires_grad]
        if trainable:
            with torch.no_grad():
                vector_to_parameters(values.detach(), trainable)


def value_and_grad(objective, params):
    """
    Objective value and its reverse-mode gradient

    Args:
        objective: callable taking a flat values tensor, returning a scalar tensor
        params: ParamVector at which to differentiate

    Returns:
        tuple: (value, ParamVector of gradients)

    Raises:
        NonFiniteObjectiveError: objective is NaN/inf at params
    """
    values = params.values.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        value = objective(values)
        if not bool(torch.isfinite(value).all()):
            raise NonFiniteObjectiveError(f"Objective is not finite: {float(value)}")
        if not value.requires_grad:
            return value.detach(), params.with_values(torch.zeros_like(values).detach())
        gradient, = torch.autograd.grad(value, values, allow_unused=True)
    if gradient is None:
        gradient = torch.zeros_like(values)
    if not bool(torch.isfinite(gradient).all()):
        raise NonFiniteObjectiveError("Gradient is not finite")
    return value.detach(), params.with_values(gradient.detach())


def grad(objective, params):
    """Reverse-mode gradient of a scalar objective of the flat parameter vector"""
    return value_and_grad(objective, params)[1]


@dataclass
class TrainState:
    """Parameters, Adam moments, step count, current Euler weight and seed"""
    params: ParamVector
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    lambda_: float = 0.0
    seed: int = 0

    @classmethod
    def initial(cls, params, lambda_=0.0, seed=0):
        zeros = torch.zeros_like(params.values)
        return cls(params, zeros, zeros.clone(), 0, float(lambda_), int(seed))


def adam_step(state, gradient, lr, betas=ADAM_BETAS, eps=ADAM_EPS):
    """
    One Adam update with bias-corrected moments

    Args:
        state: TrainState
        gradient: ParamVector or tensor of the same length as state.params
        lr: learning rate

    Returns:
        TrainState: new state; the input is left untouched
    """
    g = gradient.values if isinstance(gradient, ParamVector) else gradient
    beta1, beta2 = betas
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    values = state.params.values - lr * m_hat / (torch.sqrt(v_hat) + eps)
    return replace(state, params=state.params.with_values(values), m=m, v=v, step=step)


def resolve_decay_period(config, epochs):
    """decay_period, or the period spreading n_decays evenly over the run"""
    if config.decay_period is not None:
        return int(config.decay_period)
    return max(1, int(epochs) // (config.n_decays + 1))


def lambda_schedule(config, epoch, epochs=None):
    """
    Euler weight at an epoch: lambda0 / decay_factor^min(epoch // period, n_decays)

    Examples:
        lambda_schedule(EulerPenaltyConfig(1.0, decay_period=10), 0) -> 1.0
        lambda_schedule(EulerPenaltyConfig(1.0, decay_period=10), 10) -> 0.5
    """
    if epoch < 0:
        raise ValueError(f"Epoch must be non-negative, got {epoch}")
    if config.decay_period is None and epochs is None:
        raise ValueError("decay_period is unset; pass the total number of epochs")
    period = resolve_decay_period(config, epochs)
    decays = min(epoch // period, config.n_decays)
    return config.lambda0 * config.decay_factor ** (-decays)


@dataclass
class GpFitConfig:
    """
    Settings of a GP fit

    callback(epoch, gp, state) is called after every checkpoint_every-th
    epoch when checkpoint_every > 0.
    """
    mode: str = 'forward'
    epochs: int = 2000
    batch_size: int = 1000
    lr: float = 1e-2
    epoch_samples: int = 20000
    monitor_size: int = 500
    hidden: tuple = (15, 15)
    n_steps: int = DEFAULT_N_STEPS
    t_final: float = 1.0
    boundary: str = 'cube'
    final_scale: float = 0.01
    orientation: int = 1
    euler: EulerPenaltyConfig = field(default_factory=EulerPenaltyConfig)
    seed: int = 0
    checkpoint_every: int = 0
    report_every: int = 50
    progress: bool = False
    callback: Optional[Callable] = None
    velocity: Optional[VelocityField] = None


@dataclass
class FitResult:
    """Fitted GP flow, per-epoch TransportReport rows and run statistics"""
    gp: GpFlow
    curve: list
    stats: dict


def build_gp(dim, config):
    """Fresh GP flow (or one around config.velocity) for a fit"""
    velocity = config.velocity
    if velocity is None:
        velocity = VelocityField(dim, config.hidden, config.boundary, config.final_scale, config.seed)
    elif velocity.dim != dim:
        raise ValueError(f"Velocity field has d={velocity.dim}, base flow has d={dim}")
    phi = OdeMap(velocity, n_steps=config.n_steps, t_final=config.t_final)
    return GpFlow(phi, dim, config.orientation)


class _Fit:
    """
    Shared loop of the forward and backward fits

    Batches are (x, z) pairs: x is the point the displacement is measured
    from and z the Gaussian-side point that s moves.
    """

    def __init__(self, base, config, dim):
        self.base = base
        self.config = config
        self.gp = build_gp(dim, config)
        self.field = self.gp.phi.field
        self.layout = ParamVector.from_module(self.field)
        self.euler = config.euler
        if self.euler.decay_period is None:
            self.euler = replace(self.euler, decay_period=resolve_decay_period(self.euler, config.epochs))
        self.generator = torch.Generator().manual_seed(int(config.seed))
        self.state = TrainState.initial(self.layout, self.euler.lambda0, config.seed)
        self.euler_evaluations = 0

    def transported(self, sz):
        """Image of a batch under the transport map, given s(z)"""
        raise NotImplementedError

    def epoch_batches(self, epoch):
        raise NotImplementedError

    def monitor_batch(self):
        raise NotImplementedError

    def monitor_nll(self, x):
        return None

    def terms(self, x, z, lam, probe_seed):
        sz, traj = gp_trajectory(self.gp, z)
        cost = ((x - self.transported(sz)) ** 2).sum(-1).mean()
        if lam <= 0:
            return cost, cost.new_zeros(())
        self.euler_evaluations += 1
        penalty = penalty_along(self.field, traj, self.euler,
                                torch.Generator().manual_seed(int(probe_seed)))
        return cost, penalty

    def objective(self, values, x, z, lam, probe_seed):
        def loss(_module):
            cost, penalty = self.terms(x, z, lam, probe_seed)
            return cost + lam * penalty
        return self.layout.call(self.field, values, loss)

    def monitor(self, x, z, epoch, lam):
        with torch.no_grad():
            sz, traj = gp_trajectory(self.gp, z)
            costs = ((x - self.transported(sz)) ** 2).sum(-1)
            energy = float(energy_along(self.field, traj))
        penalty = 0.0
        if self.euler.enabled:
            self.euler_evaluations += 1
            probes = torch.Generator().manual_seed(int(self.euler.seed))
            penalty = float(penalty_along(self.field, traj, self.euler, probes).detach())
        return TransportReport(
            ot_cost=float(costs.mean()),
            nll=self.monitor_nll(x),
            energy=energy,
            sample_count=len(x),
            seed=int(self.config.seed),
            ot_cost_stderr=float(costs.std() / len(costs) ** 0.5) if len(costs) > 1 else 0.0,
            epoch=epoch,
            euler_penalty=penalty,
            lambda_=float(lam),
        )

    def run(self):
        config = self.config
        start = time.perf_counter()
        mon_x, mon_z = self.monitor_batch()
        try:
            curve = [self.monitor(mon_x, mon_z, 0, lambda_schedule(self.euler, 0))]
        except GpFlowError as e:
            raise TrainingAbortedError(str(e), 0, -1, self.state.params) from e
        global_step = 0

        epochs = tqdm(range(config.epochs), desc=f'fit-gp ({config.mode})', disable=not config.progress)
        for epoch in epochs:
            lam = lambda_schedule(self.euler, epoch)
            self.state = replace(self.state, lambda_=lam)
            for step, (x, z) in enumerate(self.epoch_batches(epoch)):
                probe_seed = int(self.euler.seed) * 1_000_003 + global_step
                try:
                    _, gradient = value_and_grad(
                        lambda values: self.objective(values, x, z, lam, probe_seed), self.state.params)
                except GpFlowError as e:
                    self.layout.load_into(self.field, self.state.params.values)
                    raise TrainingAbortedError(str(e), epoch, step, self.state.params) from e
                self.state = adam_step(self.state, gradient, config.lr)
                self.layout.load_into(self.field, self.state.params.values)
                global_step += 1

            try:
                row = self.monitor(mon_x, mon_z, epoch + 1, lam)
            except GpFlowError as e:
                raise TrainingAbortedError(str(e), epoch, -1, self.state.params) from e
            curve.append(row)
            if (epoch + 1) % config.report_every == 0 or epoch + 1 == config.epochs:
                logger.info("fit-gp epoch %d: ot_cost=%.5f nll=%s penalty=%.3e lambda=%.3e",
                            row.epoch, row.ot_cost, row.nll, row.euler_penalty, lam)
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0 and config.callback:
                config.callback(epoch + 1, self.gp, self.state)

        stats = {
            'mode': config.mode,
            'epochs': config.epochs,
            'steps': global_step,
            'euler_evaluations': self.euler_evaluations,
            'wall_time_s': time.perf_counter() - start,
            'param_count': len(self.layout),
        }
        return FitResult(self.gp, curve, stats)


class _ForwardFit(_Fit):
    """x from the data, z = f(x) computed once"""

    def __init__(self, base, data, config):
        data = torch.as_tensor(data, dtype=DTYPE)
        if data.ndim != 2 or data.shape[-1] != base.dim:
            raise ValueError(f"Data must have shape (n, {base.dim}), got {tuple(data.shape)}")
        super().__init__(base, config, base.dim)
        self.data = data
        with torch.no_grad():
            self.latent = base.forward(data)[0]

    def transported(self, sz):
        return sz

    def epoch_batches(self, epoch):
        perm = torch.randperm(len(self.data), generator=self.generator)
        for idx in perm.split(self.config.batch_size):
            yield self.data[idx], self.latent[idx]

    def monitor_batch(self):
        n = self.config.monitor_size
        return self.data[:n], self.latent[:n]

    def monitor_nll(self, x):
        with torch.no_grad():
            return float(composed_nll(self.base, self.gp, x))


class _BackwardFit(_Fit):
    """x = z ~ N(0, I), transported through g o s"""

    def __init__(self, base, config):
        if not getattr(base, 'invertible', False):
            raise InverseUnavailableError("Backward GP fits need a base flow with an inverse")
        super().__init__(base, config, base.dim)
        self.dim = base.dim

    def transported(self, sz):
        return self.base.inverse(sz)

    def epoch_batches(self, epoch):
        buffer = torch.randn(self.config.epoch_samples, self.dim, generator=self.generator, dtype=DTYPE)
        for batch in buffer.split(self.config.batch_size):
            yield batch, batch

    def monitor_batch(self):
        gen = torch.Generator().manual_seed(int(self.config.seed) + 1)
        z = torch.randn(self.config.monitor_size, self.dim, generator=gen, dtype=DTYPE)
        return z, z


def fit_gp_forward(base: 'BaseFlow', data, config: GpFitConfig) -> FitResult:
    """
    Fit s so that s o f is close to the Monge map from the data to N(0, I)

    Args:
        base: BaseFlow mapping data to approximately N(0, I)
        data: (n, d) training points; batches are drawn without replacement
        config: GpFitConfig

    Returns:
        FitResult: gp, curve (TransportReport per epoch on a fixed monitor
        batch, row 0 before training) and stats

    Raises:
        TrainingAbortedError: a particle escaped the cube or the objective
            became non-finite; carries the last good parameters
    """
    return _ForwardFit(base, data, replace(config, mode='forward')).run()


def fit_gp_backward(base: 'BaseFlow', config: GpFitConfig) -> FitResult:
    """
    Fit s so that g o s is close to the Monge map from N(0, I) to the data,
    without any training data

    Each epoch draws a fresh buffer of epoch_samples standard-normal points.

    Raises:
        InverseUnavailableError: base flow has no inverse
        TrainingAbortedError: as fit_gp_forward
    """
    return _BackwardFit(base, replace(config, mode='backward')).run()

"""
Base Flow Module
Invertible base maps f (data -> Gaussian) with inverse g = f^-1 and a
closed-form log-determinant. Flows are stacks of simple invertible layers:
diagonal affine maps, planar rotations, permutations and affine couplings
with a small tanh conditioner. Handles frozen synthetic flows for controlled
experiments and maximum-likelihood training of coupling flows on toy data.
"""

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn
from tqdm import tqdm

from config import DTYPE
from core.errors import InverseUnavailableError, NonFiniteObjectiveError, TrainingAbortedError
from core.gaussmap import standard_normal_log_prob
from core.graddesk import ParamVector, TrainState, adam_step, value_and_grad

logger = logging.getLogger(__name__)

MIN_SCALE = 1e-12
COUPLING_SCALE_BOUND = 2.0


class DiagonalAffine(nn.Module):
    """y = scale * x + shift"""

    def __init__(self, scale, shift=None):
        super().__init__()
        scale = torch.as_tensor(scale, dtype=DTYPE).reshape(-1)
        if bool((scale.abs() < MIN_SCALE).any()):
            raise ValueError(f"Diagonal scale must satisfy |scale| >= {MIN_SCALE}, got {scale.tolist()}")
        shift = torch.zeros_like(scale) if shift is None else torch.as_tensor(shift, dtype=DTYPE).reshape(-1)
        self.scale = nn.Parameter(scale)
        self.shift = nn.Parameter(shift)

    def forward(self, x):
        logdet = torch.log(self.scale.abs()).sum().expand(x.shape[:-1])
        return x * self.scale + self.shift, logdet

    def inverse(self, y):
        return (y - self.shift) / self.scale


class PlanarRotation(nn.Module):
    """Rotation by angle in the (i, j) coordinate plane"""

    def __init__(self, dim, i=0, j=1, angle=0.0):
        super().__init__()
        if not (0 <= i < dim and 0 <= j < dim and i != j):
            raise ValueError(f"Invalid rotation plane ({i}, {j}) for d={dim}")
        self.dim, self.i, self.j = dim, i, j
        self.angle = nn.Parameter(torch.tensor(float(angle), dtype=DTYPE))

    def _rotate(self, x, angle):
        c, s = torch.cos(angle), torch.sin(angle)
        xi, xj = x[..., self.i], x[..., self.j]
        y = x.clone()
        y[..., self.i] = c * xi - s * xj
        y[..., self.j] = s * xi + c * xj
        return y

    def forward(self, x):
        return self._rotate(x, self.angle), x.new_zeros(x.shape[:-1])

    def inverse(self, y):
        return self._rotate(y, -self.angle)


class Permutation(nn.Module):
    """Output component k is input component perm[k]"""

    def __init__(self, perm):
        super().__init__()
        perm = torch.as_tensor(perm, dtype=torch.long)
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise ValueError(f"Not a permutation: {perm.tolist()}")
        self.register_buffer('perm', perm)
        self.register_buffer('inverse_perm', torch.argsort(perm))

    def forward(self, x):
        return x[..., self.perm], x.new_zeros(x.shape[:-1])

    def inverse(self, y):
        return y[..., self.inverse_perm]


class AffineCoupling(nn.Module):
    """
    Affine coupling with a binary mask

    Masked components pass through and condition the update of the others:
    y = m x + (1 - m) (x exp(s) + t), with (s, t) from a tanh MLP of m x and
    s bounded by COUPLING_SCALE_BOUND * tanh. affine=False gives an additive
    (volume-preserving) coupling.
    """

    def __init__(self, dim, mask, hidden=(32, 32), affine=True, init_scale=0.0, seed=0):
        super().__init__()
        self.dim = dim
        self.affine = affine
        self.register_buffer('mask', torch.as_tensor(mask, dtype=DTYPE))
        widths = [dim, *hidden]
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(fan_in, fan_out, dtype=DTYPE), nn.Tanh()]
        layers.append(nn.Linear(widths[-1], 2 * dim, dtype=DTYPE))
        self.net = nn.Sequential(*layers)

        generator = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for module in self.net:
                if isinstance(module, nn.Linear):
                    bound = 1.0 / math.sqrt(module.in_features)
                    for tensor in (module.weight, module.bias):
                        tensor.copy_((2 * torch.rand(tensor.shape, generator=generator, dtype=DTYPE) - 1) * bound)
            # identity at init unless init_scale > 0
            self.net[-1].weight.mul_(init_scale)
            self.net[-1].bias.mul_(init_scale)

    def _scale_shift(self, x_masked):
        raw_s, t = self.net(x_masked).chunk(2, dim=-1)
        free = 1 - self.mask
        s = COUPLING_SCALE_BOUND * torch.tanh(raw_s) * free if self.affine else torch.zeros_like(raw_s)
        return s, t * free

    def forward(self, x):
        s, t = self._scale_shift(x * self.mask)
        return x * torch.exp(s) + t, s.sum(-1)

    def inverse(self, y):
        s, t = self._scale_shift(y * self.mask)
        return (y - t) * torch.exp(-s)


def checkerboard_mask(dim, parity):
    """Alternating 0/1 mask; parity selects which half passes through"""
    return [float((i + parity) % 2) for i in range(dim)]


class BaseFlow(nn.Module):
    """
    Ordered stack of invertible layers

    Attributes:
        dim: data dimension d
        invertible: False hides the inverse, modelling architectures
            without a cheap inverse
        spec: builder arguments, written into checkpoints
    """

    def __init__(self, dim, layers=(), invertible=True, spec=None):
        super().__init__()
        self.dim = int(dim)
        self.layers = nn.ModuleList(layers)
        self.invertible = bool(invertible)
        self.spec = dict(spec or {'kind': 'identity', 'dim': self.dim})

    def forward(self, x):
        """f(x) and log|det grad f(x)| per point"""
        logdet = x.new_zeros(x.shape[:-1])
        for layer in self.layers:
            x, layer_logdet = layer(x)
            logdet = logdet + layer_logdet
        return x, logdet

    def inverse(self, y):
        """g(y) = f^-1(y)"""
        if not self.invertible:
            raise InverseUnavailableError(f"Base flow '{self.spec.get('kind')}' has no inverse")
        for layer in reversed(self.layers):
            y = layer.inverse(y)
        return y

    def transform(self, x):
        return self.forward(x)[0]

    def header(self):
        return {**self.spec, 'dim': self.dim, 'invertible': self.invertible}


def forward(flow, x):
    """(f(x), log|det grad f(x)|)"""
    return flow.forward(x)


def inverse(flow, y):
    return flow.inverse(y)


def log_prob(flow, x):
    """log p(x) = log N(f(x); 0, I) + log|det grad f(x)|"""
    z, logdet = flow.forward(x)
    return standard_normal_log_prob(z) + logdet


def nll(flow, batch):
    """Mean negative log-likelihood of a batch under the flow"""
    return -log_prob(flow, batch).mean()


# Builders

def identity_flow(dim):
    return BaseFlow(dim, spec={'kind': 'identity', 'dim': dim})


def scale_flow(dim, scale):
    """f(x) = scale * x"""
    layer = DiagonalAffine(torch.full((dim,), float(scale), dtype=DTYPE))
    return BaseFlow(dim, [layer], spec={'kind': 'scale', 'dim': dim, 'scale': float(scale)})


def rotation_flow(angle, dim=2, i=0, j=1):
    """Orthogonal base flow; with invertible g = R^-1 the Gaussian is left invariant"""
    flow = BaseFlow(dim, [PlanarRotation(dim, i, j, angle)],
                    spec={'kind': 'rotation', 'dim': dim, 'angle': float(angle), 'plane': [i, j]})
    return freeze(flow)


def build_coupling_flow(dim=2, n_layers=6, hidden=(32, 32), seed=0):
    """
    Trainable coupling flow: a learned diagonal affine input layer followed
    by n_layers affine couplings with alternating checkerboard masks
    """
    layers = [DiagonalAffine(torch.ones(dim, dtype=DTYPE))]
    for k in range(n_layers):
        layers.append(AffineCoupling(dim, checkerboard_mask(dim, k % 2), hidden, seed=seed * 1000 + k))
    spec = {'kind': 'coupling', 'dim': dim, 'n_layers': n_layers, 'hidden': list(hidden), 'seed': seed}
    return BaseFlow(dim, layers, spec=spec)


def build_synthetic_flow(dim=2, n_layers=4, seed=0, invertible=True):
    """
    Frozen random diffeomorphism

    Each block is a random diagonal affine map, a random planar rotation, a
    random permutation and a coupling with a non-trivial conditioner.
    Nothing is trainable.
    """
    generator = torch.Generator().manual_seed(int(seed))
    layers = []
    for k in range(n_layers):
        scale = 0.7 + 0.7 * torch.rand(dim, generator=generator, dtype=DTYPE)
        shift = 0.3 * torch.randn(dim, generator=generator, dtype=DTYPE)
        layers.append(DiagonalAffine(scale, shift))
        i, j = torch.randperm(dim, generator=generator)[:2].tolist()
        angle = float(2 * math.pi * torch.rand((), generator=generator, dtype=DTYPE))
        layers.append(PlanarRotation(dim, i, j, angle))
        layers.append(Permutation(torch.randperm(dim, generator=generator)))
        layers.append(AffineCoupling(dim, checkerboard_mask(dim, k % 2), (8,), init_scale=0.3,
                                     seed=int(seed) * 1000 + k))
    spec = {'kind': 'synthetic', 'dim': dim, 'n_layers': n_layers, 'seed': seed}
    return freeze(BaseFlow(dim, layers, invertible=invertible, spec=spec))


def freeze(flow):
    for p in flow.parameters():
        p.requires_grad_(False)
    return flow


def build_from_header(header):
    """Rebuild the architecture described by a checkpoint header"""
    kind = header.get('kind')
    dim = int(header['dim'])
    if kind == 'identity':
        flow = identity_flow(dim)
    elif kind == 'scale':
        flow = scale_flow(dim, header['scale'])
    elif kind == 'rotation':
        i, j = header.get('plane', [0, 1])
        flow = rotation_flow(header['angle'], dim, i, j)
    elif kind == 'coupling':
        flow = build_coupling_flow(dim, header['n_layers'], tuple(header['hidden']), header.get('seed', 0))
    elif kind == 'synthetic':
        flow = build_synthetic_flow(dim, header['n_layers'], header.get('seed', 0),
                                    header.get('invertible', True))
    else:
        raise ValueError(f"Unknown base flow kind '{kind}'")
    flow.invertible = bool(header.get('invertible', flow.invertible))
    return flow


@dataclass
class NfTrainConfig:
    """Maximum-likelihood training settings for a coupling flow"""
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 500
    holdout: float = 0.2
    seed: int = 0
    progress: bool = False
    report_every: int = 50


def train_nf(flow, data, config):
    """
    Fit a base flow by maximum likelihood with Adam

    Args:
        flow: BaseFlow with trainable parameters
        data: (n, d) tensor of finite training points
        config: NfTrainConfig

    Returns:
        tuple: (flow, curve) with curve a list of dicts
        {'epoch', 'train_nll', 'heldout_nll'}; row 0 is the untrained flow

    Raises:
        TrainingAbortedError: the likelihood became non-finite
    """
    data = torch.as_tensor(data, dtype=DTYPE)
    if not bool(torch.isfinite(data).all()):
        raise ValueError("Training data must be finite")
    generator = torch.Generator().manual_seed(int(config.seed))
    order = torch.randperm(len(data), generator=generator)
    n_hold = int(round(config.holdout * len(data)))
    held_out, train = data[order[:n_hold]], data[order[n_hold:]]
    if len(train) == 0:
        raise ValueError("No training points left after the hold-out split")

    params = ParamVector.from_module(flow)
    state = TrainState.initial(params, seed=config.seed)

    def heldout_nll():
        with torch.no_grad():
            return float(nll(flow, held_out)) if n_hold else float('nan')

    with torch.no_grad():
        curve = [{'epoch': 0, 'train_nll': float(nll(flow, train)), 'heldout_nll': heldout_nll()}]

    epochs = tqdm(range(config.epochs), desc='train-nf', disable=not config.progress)
    for epoch in epochs:
        perm = torch.randperm(len(train), generator=generator)
        total, count = 0.0, 0
        for step, idx in enumerate(perm.split(config.batch_size)):
            batch = train[idx]
            try:
                value, gradient = value_and_grad(
                    lambda values: params.call(flow, values, nll, batch), state.params)
            except NonFiniteObjectiveError as e:
                params.load_into(flow, state.params.values)
                raise TrainingAbortedError(f"NLL diverged: {e}", epoch, step, state.params) from e
            state = adam_step(state, gradient, config.lr)
            params.load_into(flow, state.params.values)
            total += float(value) * len(idx)
            count += len(idx)

        row = {'epoch': epoch + 1, 'train_nll': total / count, 'heldout_nll': heldout_nll()}
        curve.append(row)
        if (epoch + 1) % config.report_every == 0:
            logger.info("train-nf epoch %d: train_nll=%.4f heldout_nll=%.4f",
                        row['epoch'], row['train_nll'], row['heldout_nll'])

    return flow, curve

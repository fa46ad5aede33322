"""
Transport Metrology Module
Measures how far a transport map is from optimal:
- empirical displacement cost E|x - T(x)|^2
- exact discrete OT between equal-size samples (assignment problem)
- matching agreement between a map and the discrete OT permutation
- density of the composed model base + GP flow
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from core.eulerreg import path_energy
from core.flowode import OdeMap
from core.gaussmap import log_abs_det, standard_normal_log_prob, to_cube

logger = logging.getLogger(__name__)

MAX_ASSIGNMENT_SIZE = 4096


@dataclass
class TransportReport:
    """
    Transport and likelihood figures of a map on one sample set

    Curve rows additionally carry epoch, euler_penalty and lambda_;
    evaluation reports carry discrete_ot_cost and agreement.
    """
    ot_cost: float
    nll: Optional[float] = None
    energy: Optional[float] = None
    discrete_ot_cost: Optional[float] = None
    agreement: Optional[float] = None
    sample_count: int = 0
    seed: int = 0
    ot_cost_stderr: Optional[float] = None
    epoch: Optional[int] = None
    euler_penalty: Optional[float] = None
    lambda_: Optional[float] = None

    def __post_init__(self):
        if not self.ot_cost >= 0:
            raise ValueError(f"ot_cost must be non-negative, got {self.ot_cost}")
        if self.agreement is not None and not 0 <= self.agreement <= 1:
            raise ValueError(f"agreement must lie in [0, 1], got {self.agreement}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown report fields: {', '.join(sorted(unknown))}")
        return cls(**data)


def _as_numpy(points):
    if isinstance(points, torch.Tensor):
        points = points.detach().cpu().numpy()
    return np.asarray(points, dtype=np.float64)


def displacement_costs(transport, samples):
    """|x - T(x)|^2 per sample"""
    with torch.no_grad():
        return ((samples - transport(samples)) ** 2).sum(-1)


def displacement_cost(transport, samples):
    """
    Mean squared displacement of a map on a sample set

    Args:
        transport: callable T, batched over rows
        samples: (n, d) finite tensor, n > 0

    Returns:
        float: (1/n) sum |x_i - T(x_i)|^2

    Examples:
        displacement_cost(lambda x: x + 1.0, torch.zeros(5, 2)) -> 2.0
    """
    if len(samples) == 0:
        raise ValueError("Displacement cost needs at least one sample")
    return float(displacement_costs(transport, samples).mean())


def displacement_stats(transport, samples):
    """(mean cost, Monte-Carlo standard error)"""
    costs = displacement_costs(transport, samples)
    stderr = float(costs.std() / math.sqrt(len(costs))) if len(costs) > 1 else 0.0
    return float(costs.mean()), stderr


def exact_discrete_ot(source, target):
    """
    Exact uniform-weight discrete OT with squared Euclidean cost

    Args:
        source: (n, d) points
        target: (n, d) points, same n

    Returns:
        tuple: (mean cost, perm) where perm[i] is the target matched to source i

    Raises:
        ValueError: unequal counts, mismatched dimensions or n > 4096
    """
    source, target = _as_numpy(source), _as_numpy(target)
    if source.ndim != 2 or target.ndim != 2 or source.shape[1] != target.shape[1]:
        raise ValueError(f"Point sets must be (n, d) with equal d, got {source.shape} and {target.shape}")
    if len(source) != len(target):
        raise ValueError(f"Discrete OT needs equal counts, got {len(source)} and {len(target)}")
    if len(source) > MAX_ASSIGNMENT_SIZE:
        raise ValueError(f"Discrete OT is limited to n <= {MAX_ASSIGNMENT_SIZE}, got {len(source)}")
    if len(source) == 0:
        raise ValueError("Discrete OT needs at least one point")

    costs = cdist(source, target, 'sqeuclidean')
    rows, cols = linear_sum_assignment(costs)
    perm = np.empty(len(source), dtype=np.int64)
    perm[rows] = cols
    return float(costs[rows, cols].mean()), perm


def nearest_targets(images, target):
    """Index of the nearest target point for every image"""
    return cdist(_as_numpy(images), _as_numpy(target), 'sqeuclidean').argmin(axis=1)


def matching_agreement(transport, source, target, perm=None):
    """
    Fraction of source points whose image lands nearest their OT partner

    Args:
        transport: callable T
        source, target: equal-size point sets
        perm: precomputed exact_discrete_ot permutation (solved when None)

    Returns:
        float in [0, 1]
    """
    if perm is None:
        _, perm = exact_discrete_ot(source, target)
    with torch.no_grad():
        images = transport(torch.as_tensor(_as_numpy(source)))
    return float((nearest_targets(images, target) == perm).mean())


def composed_nll(base, s, data):
    """
    Mean NLL of the model x -> s(f(x)) with a standard normal latent

    log p(x) = log N(s(f(x))) + log|det grad s(f(x))| + log|det grad f(x)|,
    with the GP log-determinant from finite differences.
    """
    with torch.no_grad():
        z, logdet_f = base.forward(data)
        y = s(z)
        logdet_s = log_abs_det(s, z)
        return -(standard_normal_log_prob(y) + logdet_s + logdet_f).mean()


def base_nll(base, data):
    with torch.no_grad():
        z, logdet = base.forward(data)
        return -(standard_normal_log_prob(z) + logdet).mean()


def gap_closure(base_cost, gp_cost, discrete_cost):
    """
    Share of the gap between the base flow and exact discrete OT that the
    GP flow closes; NaN when the base flow already sits on the optimum
    """
    gap = base_cost - discrete_cost
    if gap <= 0:
        return float('nan')
    return (base_cost - gp_cost) / gap


def evaluate_transport(base, data, reference, s=None, seed=0, perm=None, discrete_cost=None):
    """
    Full TransportReport of T = f (s None) or T = s o f from data to N(0, I)

    Args:
        base: base flow with forward(x) -> (z, logdet)
        data: (n, d) held-out data points
        reference: (n, d) standard-normal points matched against T(data)
        s: optional GpFlow applied after the base flow
        perm, discrete_cost: reuse a solved exact_discrete_ot(data, reference)
    """
    if perm is None or discrete_cost is None:
        discrete_cost, perm = exact_discrete_ot(data, reference)

    def transport(x):
        z = base.forward(x)[0]
        return z if s is None else s(z)

    cost, stderr = displacement_stats(transport, data)
    if s is None:
        nll = float(base_nll(base, data))
        energy = 0.0
    else:
        nll = float(composed_nll(base, s, data))
        energy = 0.0
        if isinstance(s.phi, OdeMap):
            with torch.no_grad():
                energy = float(path_energy(s.phi, to_cube(s, base.forward(data)[0])))

    return TransportReport(
        ot_cost=cost,
        nll=nll,
        energy=energy,
        discrete_ot_cost=float(discrete_cost),
        agreement=matching_agreement(transport, data, reference, perm),
        sample_count=len(data),
        seed=int(seed),
        ot_cost_stderr=stderr,
    )

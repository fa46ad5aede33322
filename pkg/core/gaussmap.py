"""
Gaussian Map Module
Conjugates volume-preserving cube maps phi: (-1, 1)^d -> (-1, 1)^d into
Gaussian-preserving maps of R^d:

    s(x) = sqrt(2) erf^-1( phi( erf(x / sqrt(2)) ) )

with erf applied componentwise. An optional reflection of the first
coordinate before phi gives the orientation-reversing case.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from config import EPS_CLIP
from core.errors import DegenerateJacobianError, NonFiniteInputError, OutOfDomainError
from core.fdiff import finite_difference_jacobian
from core.flowode import OdeMap, integrate_trajectory

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)
LOG_2PI = math.log(2 * math.pi)
# |w| above which erf^-1 goes through the complement 1 - |w|
TAIL_SWITCH = 0.5
MIN_COMPLEMENT = 1e-300


def _require_finite(x, what):
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteInputError(f"{what} must be finite")


def erf_vec(x):
    """Componentwise erf; rejects NaN/inf input"""
    _require_finite(x, 'erf input')
    return torch.special.erf(x)


def erfinv_vec(y):
    """
    Componentwise erf^-1 on the open cube with one Newton refinement

    Args:
        y: tensor with every |y_i| < 1 - EPS_CLIP

    Returns:
        torch.Tensor: z with erf(z) = y

    Raises:
        OutOfDomainError: naming the first offending component
    """
    _require_finite(y, 'erf^-1 input')
    bad = y.abs() >= 1 - EPS_CLIP
    if bool(bad.any()):
        flat = bad.reshape(-1).nonzero()[0, 0].item()
        value = y.reshape(-1)[flat].item()
        index = tuple(int(i) for i in np.unravel_index(flat, tuple(y.shape)))
        raise OutOfDomainError(
            f"erf^-1 argument out of domain at component {index}: {value!r}",
            index=index, value=value,
        )
    z = torch.special.erfinv(y)
    # Newton step on erf(z) - y
    return z - (torch.special.erf(z) - y) / (TWO_OVER_SQRT_PI * torch.exp(-z * z))


def standard_normal_log_prob(z):
    """log density of N(0, I) summed over the last dimension"""
    return -0.5 * (z ** 2).sum(-1) - 0.5 * z.shape[-1] * LOG_2PI


class IdentityCubeMap:
    """phi = identity; conjugates to s = identity"""

    def __call__(self, u):
        return u

    def inverse(self, u):
        return u


class SignedPermutation:
    """
    Exact volume-preserving cube map u -> signs * u[perm]

    Output component i is signs[i] * u[perm[i]]. A planar rotation by 90
    degrees is SignedPermutation([1, 0], [-1, 1]): (a, b) -> (-b, a).
    """

    def __init__(self, perm, signs):
        self.perm = torch.as_tensor(perm, dtype=torch.long)
        self.signs = torch.as_tensor(signs, dtype=torch.float64)
        if sorted(self.perm.tolist()) != list(range(len(self.perm))):
            raise ValueError(f"Not a permutation: {self.perm.tolist()}")
        if self.signs.shape != self.perm.shape or not bool((self.signs.abs() == 1).all()):
            raise ValueError("Signs must be +-1, one per coordinate")
        self.inverse_perm = torch.argsort(self.perm)

    def __call__(self, u):
        return self.signs.to(u.dtype) * u[..., self.perm]

    def inverse(self, u):
        return (u * self.signs.to(u.dtype))[..., self.inverse_perm]

    def carry(self, q):
        """Per-coordinate data follows the coordinate it is moved to"""
        return q[..., self.perm]

    def carry_inverse(self, q):
        return q[..., self.inverse_perm]


@dataclass
class GpFlow:
    """
    Gaussian-preserving map built from a cube map phi

    Attributes:
        phi: volume-preserving cube map with __call__ and inverse (an OdeMap in practice)
        dim: dimension d
        orientation: +1, or -1 to reflect x_1 before phi
    """
    phi: object
    dim: int
    orientation: int = 1

    def __post_init__(self):
        if self.orientation not in (1, -1):
            raise ValueError(f"Orientation must be +1 or -1, got {self.orientation}")
        if self.dim <= 0:
            raise ValueError(f"Dimension must be positive, got {self.dim}")

    def __call__(self, x):
        return gp_apply(self, x)

    def inverse(self, y):
        return gp_inverse(self, y)


def _reflect(u):
    return torch.cat([-u[..., :1], u[..., 1:]], dim=-1)


def to_cube(s, x):
    """erf(x / sqrt 2) followed by the orientation reflection"""
    u = erf_vec(x / SQRT2)
    return _reflect(u) if s.orientation == -1 else u


def from_cube(w, u, x):
    """
    sqrt(2) erf^-1(w) for cube points w reached from u = erf(x / sqrt 2)

    Coordinates with |w| > TAIL_SWITCH are resolved through their complement
    1 - |w| = erfc(|x| / sqrt 2) + (|u| - |w|), which stays exact where
    erf(x / sqrt 2) itself has rounded to +-1. A complement below
    MIN_COMPLEMENT means the coordinate sits on a face and keeps |x|.

    Args:
        w: cube points, shape (..., d)
        u: cube points w started from, broadcastable to w
        x: Gaussian points u was lifted from, same shape as u
    """
    _require_finite(w, 'Cube point')
    tail = w.abs() > TAIL_SWITCH
    if not bool(tail.any()):
        return SQRT2 * erfinv_vec(w)
    tau = x.abs().expand_as(w)
    complement = torch.special.erfc(tau / SQRT2) + (u.abs() - w.abs())
    resolved = complement > MIN_COMPLEMENT
    safe = torch.where(tail & resolved, complement, torch.ones_like(complement))
    magnitude = torch.where(resolved, -torch.special.ndtri(0.5 * safe), tau)
    core = SQRT2 * erfinv_vec(torch.where(tail, torch.zeros_like(w), w))
    return torch.where(tail, torch.sign(w) * magnitude, core)


def _carried(phi, name, q):
    # cube maps that move coordinates around say how per-coordinate data follows
    carry = getattr(phi, name, None)
    return q if carry is None else carry(q)


def gp_apply(s, x):
    """s(x) = sqrt(2) erf^-1(phi(h(erf(x / sqrt(2)))))"""
    u = to_cube(s, x)
    w = s.phi(u)
    return from_cube(w, _carried(s.phi, 'carry', u), _carried(s.phi, 'carry', x))


def gp_inverse(s, y):
    """s^-1(y), through phi^-1"""
    u = erf_vec(y / SQRT2)
    w = s.phi.inverse(u)
    if s.orientation == -1:
        w = _reflect(w)
    return from_cube(w, _carried(s.phi, 'carry_inverse', u), _carried(s.phi, 'carry_inverse', y))


def gp_trajectory(s, x):
    """
    Apply s and keep the cube-space trajectory of phi

    Returns:
        tuple: (s(x), Trajectory) so a loss and a path penalty can share one ODE solve
    """
    if not isinstance(s.phi, OdeMap):
        raise TypeError("gp_trajectory needs an ODE-defined phi")
    u = to_cube(s, x)
    traj = integrate_trajectory(s.phi, u)
    return from_cube(traj.final, u, x), traj


def _jacobian_of_s(s, x):
    x = x.reshape(-1, x.shape[-1])
    _require_finite(x, 'Residual input')
    h = 1e-5 * torch.clamp(x.norm(dim=-1), min=1.0)
    with torch.no_grad():
        jac = finite_difference_jacobian(lambda p: gp_apply(s, p), x, h)
        det = torch.linalg.det(jac) * s.orientation
    if bool((det <= 0).any()):
        raise DegenerateJacobianError(
            f"Finite-difference Jacobian determinant has the wrong sign at {int((det <= 0).sum())} point(s)"
        )
    return x, det


def log_abs_det(s, x):
    """log|det grad s(x)| per point, from a central finite-difference Jacobian"""
    _, det = _jacobian_of_s(s, x)
    return torch.log(det)


def preservation_residual(s, x):
    """
    Gaussian-preservation defect per point

    | log|det grad s(x)| - (|s(x)|^2 - |x|^2) / 2 |, zero for an exact
    Gaussian-preserving map. Finite-difference step h = 1e-5 * max(1, |x|).
    """
    x, det = _jacobian_of_s(s, x)
    with torch.no_grad():
        sx = gp_apply(s, x)
    return (torch.log(det) - 0.5 * ((sx ** 2).sum(-1) - (x ** 2).sum(-1))).abs()

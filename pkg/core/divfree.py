"""
Divergence-Free Fields Module
Time-dependent divergence-free velocity fields on the cube (-1, 1)^d.

A single tanh network u: R^{d+1} -> R^{(d-1) x d} produces d-1 row vectors
u^0 ... u^{d-2}. Block n uses the antisymmetric potentials
psi_ij = u^n_i - u^n_j on the indices i, j >= n, which makes every block
divergence free. In 'cube' mode each potential is multiplied by
h_i h_j with h_i = x_i^2 - 1 so that v_i vanishes on the faces x_i = +-1.
Indices in this module are 0-based: block n is active on i >= n.
"""

import logging

import torch
from torch import nn

from config import DTYPE
from core.fdiff import finite_difference_divergence

logger = logging.getLogger(__name__)

BOUNDARIES = ('free', 'cube')


class UNet(nn.Module):
    """
    Tanh multilayer map u(x, t) with analytic spatial Jacobian

    Layer widths are [d+1, w_1, ..., w_L, (d-1)*d]. Weights are drawn
    uniformly in [-a, a] with a = 1/sqrt(fan_in); the last layer is scaled by
    final_scale so that the initial field is close to zero.
    """

    def __init__(self, dim, hidden=(15, 15), final_scale=0.01, seed=0):
        super().__init__()
        if dim < 2:
            raise ValueError(f"Divergence-free fields need d >= 2, got d={dim}")
        self.dim = int(dim)
        self.hidden = tuple(int(w) for w in hidden)
        if any(w <= 0 for w in self.hidden):
            raise ValueError(f"Hidden widths must be positive, got {self.hidden}")
        self.dims = [self.dim + 1, *self.hidden, (self.dim - 1) * self.dim]
        self.layers = nn.ModuleList(
            nn.Linear(fan_in, fan_out, dtype=DTYPE)
            for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:])
        )
        self._initialize(final_scale, seed)

    def _initialize(self, final_scale, seed):
        generator = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for k, layer in enumerate(self.layers):
                bound = 1.0 / layer.in_features ** 0.5
                scale = final_scale if k == len(self.layers) - 1 else 1.0
                for tensor in (layer.weight, layer.bias):
                    noise = torch.rand(tensor.shape, generator=generator, dtype=DTYPE)
                    tensor.copy_((2 * noise - 1) * bound * scale)

    def _augment(self, x, t):
        t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
        if t.numel() == 1:
            t = t.reshape(()).expand(x.shape[:-1])
        return torch.cat([x, t.reshape(*x.shape[:-1], 1)], dim=-1)

    def forward(self, x, t):
        """u(x, t) reshaped to (..., d-1, d)"""
        h = self._augment(x, t)
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
        u = self.layers[-1](h)
        return u.reshape(*x.shape[:-1], self.dim - 1, self.dim)

    def evaluate_with_jacobian(self, x, t):
        """
        One pass returning u and its spatial Jacobian

        Returns:
            tuple: (u, jac) with u of shape (..., d-1, d) and jac of shape
            (..., d-1, d, d), jac[..., n, i, j] = d u^n_i / d x_j. The time
            input is not differentiated.
        """
        h = self._augment(x, t)
        # d(x, t)/dx: identity on the space rows, zero time row
        jac = torch.eye(self.dim + 1, self.dim, dtype=x.dtype, device=x.device)
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
            jac = (1 - h ** 2).unsqueeze(-1) * torch.matmul(layer.weight, jac)
        last = self.layers[-1]
        u = last(h)
        jac = torch.matmul(last.weight, jac)
        jac = jac.expand(*x.shape[:-1], *jac.shape[-2:])

        batch = x.shape[:-1]
        u = u.reshape(*batch, self.dim - 1, self.dim)
        jac = jac.reshape(*batch, self.dim - 1, self.dim, self.dim)
        return u, jac


def unet_eval(net, x, t):
    """u(x, t) as a (..., d-1, d) tensor; row n is u^n"""
    return net(x, t)


def unet_jacobian(net, x, t):
    """Spatial Jacobian of the flattened output, shape (..., (d-1)*d, d)"""
    _, jac = net.evaluate_with_jacobian(x, t)
    return jac.reshape(*jac.shape[:-3], (net.dim - 1) * net.dim, net.dim)


def block_masks(dim, dtype=DTYPE, device=None):
    """(d-1, d) matrix whose row n is the indicator of the indices >= n"""
    idx = torch.arange(dim, device=device)
    return (idx[None, :] >= torch.arange(dim - 1, device=device)[:, None]).to(dtype)


def _block_terms(u, jac, mask, x, boundary):
    # u: (..., B, d), jac: (..., B, d, d), mask: (B, d)
    masked_jac = jac * mask[:, :, None] * mask[:, None, :]
    diag = torch.diagonal(masked_jac, dim1=-2, dim2=-1)

    if boundary == 'free':
        return masked_jac.sum(-1) - diag.sum(-1, keepdim=True) * mask

    h = x ** 2 - 1
    hb = h.unsqueeze(-2)
    xb = x.unsqueeze(-2)
    # (M^n x)_i with M^n_ij = (u_i - u_j) on active i, j
    mx = mask * (u * (mask * xb).sum(-1, keepdim=True) - (mask * u * xb).sum(-1, keepdim=True))
    jh = torch.matmul(masked_jac, hb.unsqueeze(-1)).squeeze(-1)
    trace_h = (hb * diag).sum(-1, keepdim=True) * mask
    return hb * (2 * mx + jh - trace_h)


def _check_block(dim, n):
    if not 0 <= n <= dim - 2:
        raise ValueError(f"Block index must be in [0, {dim - 2}], got {n}")


def block_field(net, n, x, t):
    """Divergence-free block n without boundary factors"""
    _check_block(net.dim, n)
    u, jac = net.evaluate_with_jacobian(x, t)
    mask = block_masks(net.dim, x.dtype, x.device)[n:n + 1]
    return _block_terms(u[..., n:n + 1, :], jac[..., n:n + 1, :, :], mask, x, 'free').squeeze(-2)


def boundary_block_field(net, n, x, t):
    """Divergence-free block n whose component i vanishes on x_i = +-1"""
    _check_block(net.dim, n)
    u, jac = net.evaluate_with_jacobian(x, t)
    mask = block_masks(net.dim, x.dtype, x.device)[n:n + 1]
    return _block_terms(u[..., n:n + 1, :], jac[..., n:n + 1, :, :], mask, x, 'cube').squeeze(-2)


class VelocityField(nn.Module):
    """Sum of all d-1 divergence-free blocks, evaluated from one network pass"""

    def __init__(self, dim, hidden=(15, 15), boundary='cube', final_scale=0.01, seed=0):
        super().__init__()
        if boundary not in BOUNDARIES:
            raise ValueError(f"Unknown boundary mode '{boundary}'. Expected one of: {', '.join(BOUNDARIES)}")
        self.dim = int(dim)
        self.boundary = boundary
        self.unet = UNet(dim, hidden, final_scale=final_scale, seed=seed)
        self.register_buffer('masks', block_masks(self.dim), persistent=False)

    @property
    def hidden(self):
        return self.unet.hidden

    @property
    def block_count(self):
        return self.dim - 1

    def forward(self, x, t):
        u, jac = self.unet.evaluate_with_jacobian(x, t)
        return _block_terms(u, jac, self.masks.to(x.dtype), x, self.boundary).sum(-2)

    def divergence(self, x, t, h=1e-5):
        """Finite-difference divergence per point"""
        return finite_difference_divergence(lambda p: self(p, t), x, h)

    def header(self):
        """Shape description written into checkpoints"""
        return {'dim': self.dim, 'hidden': list(self.hidden), 'boundary': self.boundary}


def velocity(field, x, t):
    """v(x, t) for a VelocityField"""
    return field(x, t)

"""
Central finite differences on batched maps
Used as the independent oracle for Jacobians, determinants and
divergences throughout the library.
"""

import torch


def finite_difference_jacobian(fn, x, h):
    """
    Central finite-difference Jacobian of a batched map

    Args:
        fn: callable mapping (n, d) -> (n, m)
        x: (n, d) tensor of evaluation points
        h: step, a float or an (n,) tensor of per-point steps

    Returns:
        torch.Tensor: (n, m, d) with entry [k, i, j] = d fn_i / d x_j at x[k]
    """
    n, d = x.shape
    h = torch.as_tensor(h, dtype=x.dtype, device=x.device)
    if h.ndim == 0:
        h = h.expand(n)
    offsets = torch.eye(d, dtype=x.dtype, device=x.device)[None, :, :] * h[:, None, None]

    # all 2d perturbed copies in one evaluation
    plus = (x[:, None, :] + offsets).reshape(n * d, d)
    minus = (x[:, None, :] - offsets).reshape(n * d, d)
    values = fn(torch.cat([plus, minus], dim=0))
    f_plus, f_minus = values[: n * d], values[n * d:]
    m = values.shape[-1]

    diff = (f_plus - f_minus).reshape(n, d, m) / (2 * h[:, None, None])
    return diff.transpose(1, 2)


def finite_difference_divergence(fn, x, h=1e-5):
    """Trace of the central finite-difference Jacobian, per point"""
    return torch.diagonal(finite_difference_jacobian(fn, x, h), dim1=-2, dim2=-1).sum(-1)

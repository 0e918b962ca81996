"""Probability primitives used by the model and the objectives.

All densities are evaluated in log-space. Tensors carry arbitrary leading
batch dimensions; the trailing axis of a :class:`DiagGaussian` is the latent
axis, and likelihoods sum over their last ``event_ndim`` axes.
"""

import math
from dataclasses import dataclass
from typing import Union

import torch
import torch.nn.functional as F

from .exceptions import DomainError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(a.shape)} does not match {tuple(b.shape)}")


@dataclass(frozen=True)
class DiagGaussian:
    """Gaussian with diagonal covariance, parameterised by mean and std-dev."""

    mean: torch.Tensor
    scale: torch.Tensor

    def __post_init__(self):
        _check_same_shape(self.mean, self.scale, "DiagGaussian mean/scale")

    @property
    def latent_dim(self) -> int:
        return self.mean.shape[-1]

    def validate(self):
        if not bool(torch.all(self.scale > 0)):
            raise DomainError("DiagGaussian scale must be strictly positive")
        return self

    def rsample(self, noise):
        return gauss_rsample(self, noise)

    def log_prob(self, x):
        return gauss_log_prob(self, x)

    def index(self, idx):
        return DiagGaussian(self.mean[idx], self.scale[idx])

    def detach(self):
        return DiagGaussian(self.mean.detach(), self.scale.detach())


def gauss_rsample(d: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterised draw ``mean + scale * noise``.

    ``noise`` may carry extra leading sample dimensions; its trailing
    dimensions must equal the distribution's shape.
    """
    tail = noise.shape[noise.dim() - d.mean.dim():] if noise.dim() >= d.mean.dim() else None
    if tail != d.mean.shape:
        raise ShapeError(
            f"noise shape {tuple(noise.shape)} incompatible with distribution shape {tuple(d.mean.shape)}"
        )
    return d.mean + d.scale * noise


def gauss_log_prob(d: DiagGaussian, x: torch.Tensor) -> torch.Tensor:
    """Exact log-density summed over the latent (last) axis. Broadcasts."""
    if x.shape[-1] != d.mean.shape[-1]:
        raise ShapeError(f"point dimension {x.shape[-1]} != distribution dimension {d.mean.shape[-1]}")
    if bool(torch.any(d.scale <= 0)):
        raise DomainError("Gaussian scale must be strictly positive")
    z = (x - d.mean) / d.scale
    return torch.sum(-0.5 * z * z - torch.log(d.scale) - 0.5 * LOG_2PI, dim=-1)


def w2_gaussian_diag(a: DiagGaussian, b: DiagGaussian) -> torch.Tensor:
    """Squared 2-Wasserstein distance between diagonal Gaussians.

    For commuting (diagonal) covariances the trace term collapses to the
    squared difference of the standard deviations::

        d2 = ||m1 - m2||^2 + sum_i (s1_i - s2_i)^2

    Broadcasts over leading dimensions; the result is in squared latent units.
    """
    if a.mean.shape[-1] != b.mean.shape[-1]:
        raise ShapeError(f"latent dimensions differ: {a.mean.shape[-1]} vs {b.mean.shape[-1]}")
    dm = a.mean - b.mean
    ds = a.scale - b.scale
    return torch.sum(dm * dm, dim=-1) + torch.sum(ds * ds, dim=-1)


def _sum_event(x, event_ndim):
    if event_ndim == 0:
        return x
    return x.sum(dim=tuple(range(-event_ndim, 0)))


class LaplaceLikelihood:
    """Factorised Laplace likelihood over a continuous payload.

    Parameters
    ----------
    loc : Tensor
        Location, shape ``batch + payload_shape``.
    scale : float or Tensor
        Positive scale, broadcastable against ``loc``.
    event_ndim : int
        Number of trailing payload axes summed by :meth:`log_prob`.
    """

    def __init__(self, loc, scale: Union[float, torch.Tensor], event_ndim=1):
        scale = torch.as_tensor(scale, dtype=loc.dtype, device=loc.device)
        if not bool(torch.all(scale > 0)):
            raise DomainError("Laplace scale must be strictly positive")
        self.loc = loc
        self.scale = scale
        self.event_ndim = event_ndim

    @property
    def mean(self):
        return self.loc

    def log_prob(self, x):
        if x.shape[x.dim() - self.event_ndim:] != self.loc.shape[self.loc.dim() - self.event_ndim:]:
            raise ShapeError(f"payload shape {tuple(x.shape)} vs likelihood shape {tuple(self.loc.shape)}")
        lp = -torch.abs(x - self.loc) / self.scale - torch.log(2.0 * self.scale)
        return _sum_event(lp, self.event_ndim)


class GaussianLikelihood:
    """Factorised Gaussian likelihood with a fixed scale.

    Used for linear-Gaussian toy models whose evidence is analytic.
    """

    def __init__(self, loc, scale, event_ndim=1):
        scale = torch.as_tensor(scale, dtype=loc.dtype, device=loc.device)
        if not bool(torch.all(scale > 0)):
            raise DomainError("Gaussian scale must be strictly positive")
        self.loc = loc
        self.scale = scale
        self.event_ndim = event_ndim

    @property
    def mean(self):
        return self.loc

    def log_prob(self, x):
        if x.shape[x.dim() - self.event_ndim:] != self.loc.shape[self.loc.dim() - self.event_ndim:]:
            raise ShapeError(f"payload shape {tuple(x.shape)} vs likelihood shape {tuple(self.loc.shape)}")
        u = (x - self.loc) / self.scale
        lp = -0.5 * u * u - torch.log(self.scale) - 0.5 * LOG_2PI
        return _sum_event(lp, self.event_ndim)


class CategoricalLikelihood:
    """Independent categorical likelihood per payload position.

    ``logits`` has shape ``batch + payload_shape + (n_categories,)``; the
    payload holds integer category ids with shape ``batch + payload_shape``.
    """

    def __init__(self, logits, event_ndim=1):
        if not bool(torch.all(torch.isfinite(logits))):
            raise DomainError("categorical logits must be finite")
        self.logits = logits
        self.event_ndim = event_ndim

    @property
    def mean(self):
        return self.mode

    @property
    def mode(self):
        return torch.argmax(self.logits, dim=-1)

    @property
    def probs(self):
        return torch.softmax(self.logits, dim=-1)

    def log_prob(self, x):
        x = x.long()
        if x.shape[x.dim() - self.event_ndim:] != self.logits.shape[self.logits.dim() - 1 - self.event_ndim:-1]:
            raise ShapeError(f"payload shape {tuple(x.shape)} vs logits shape {tuple(self.logits.shape)}")
        logp = F.log_softmax(self.logits, dim=-1)
        x = x.expand(logp.shape[:-1])
        lp = torch.gather(logp, -1, x.unsqueeze(-1)).squeeze(-1)
        return _sum_event(lp, self.event_ndim)

"""Training bounds for MEME.

Supervised direction ``x -> y`` (both payloads observed)::

    L(x, y) = E_{q(z|x)}[ sg(r) * (log p(x|z) + log p(z|y) - log q(z|x) - log q(y|z)) ]
              + beta * log q(y|x)

with ``p(z|y)`` the encoder of ``y``, ``q(y|z)`` the decoder of ``y``,
``r = q(y|z) / q(y|x)`` and ``sg`` a stop-gradient. ``log q(y|x)`` is the
LogSumExp average of ``log q(y|z_k)`` over ``K`` posterior draws that always
include the outer draw, so ``r <= K``. The parameter-free ``log p(y)`` is
dropped.

Unobserved partner (only ``x``)::

    L(x) = E_{q(z|x)}[ log p(x|z) - log q(z|x) + log (1/N) sum_i p(z|u_i) ]

with ``u_i`` the pseudo-inputs of the missing modality.

Noise protocol
--------------
Every objective takes either explicit standard-normal ``noise`` tensors or a
``torch.Generator``. When drawing from a generator the order is fixed: for a
direction, the outer draw ``(B, D)`` then the ``K - 1`` inner draws
``(K - 1, B, D)``; :func:`bidirectional_elbo` draws ``s -> t`` before
``t -> s``; :func:`batch_objective` handles paired rows first, then
``s``-only rows, then ``t``-only rows.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import torch

from .distributions import DiagGaussian, gauss_log_prob, gauss_rsample
from .exceptions import ConfigError, DataError, NumericalError, ShapeError

BOTH, S_ONLY, T_ONLY = 0, 1, 2


@dataclass(frozen=True)
class ObjectiveConfig:
    """Hyper-parameters of the bound.

    ``classifier_weight`` multiplies the standalone ``log q(y|x)`` term;
    ``1.0`` gives the literal bound.
    """

    mc_samples: int = 16
    classifier_weight: float = 10.0
    pseudo_count: int = 50

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.classifier_weight < 0:
            raise ConfigError("classifier_weight must be >= 0")
        if self.pseudo_count < 1:
            raise ConfigError("pseudo_count must be >= 1")


@dataclass
class ObjectiveTerms:
    """Batch-averaged objective and its decomposition.

    ``total == recon_s + recon_t + cross_kl_terms + beta * log_qts``.
    ``recon_m`` collects every ratio-weighted likelihood term produced by the
    decoder of modality ``m`` (the inner classifier enters with a minus
    sign); ``cross_kl_terms`` collects prior-minus-posterior terms.
    ``per_sample`` holds the per-row totals (differentiable).
    """

    total: torch.Tensor
    recon_s: torch.Tensor
    recon_t: torch.Tensor
    cross_kl_terms: torch.Tensor
    log_qts: torch.Tensor
    direction: str
    per_sample: torch.Tensor = field(repr=False)
    ratio: Optional[torch.Tensor] = field(default=None, repr=False)

    def record(self, **extra) -> dict:
        rec = dict(extra)
        rec.update(
            direction=self.direction,
            total=float(self.total.detach()),
            recon_s=float(self.recon_s.detach()),
            recon_t=float(self.recon_t.detach()),
            cross_kl_terms=float(self.cross_kl_terms.detach()),
            log_qts=float(self.log_qts.detach()),
        )
        return rec


class DirectionNoise(NamedTuple):
    outer: torch.Tensor  # (B, D)
    inner: torch.Tensor  # (K - 1, B, D)


def draw_direction_noise(batch, latent_dim, k, generator=None, dtype=torch.float64):
    outer = torch.randn((batch, latent_dim), generator=generator, dtype=dtype)
    inner = torch.randn((k - 1, batch, latent_dim), generator=generator, dtype=dtype)
    return DirectionNoise(outer, inner)


def draw_bidirectional_noise(batch, latent_dim, k, generator=None, dtype=torch.float64):
    st = draw_direction_noise(batch, latent_dim, k, generator, dtype)
    ts = draw_direction_noise(batch, latent_dim, k, generator, dtype)
    return st, ts


def _check_finite(value, term, direction=None):
    if not bool(torch.all(torch.isfinite(value))):
        where = f" (direction {direction})" if direction else ""
        raise NumericalError(f"non-finite value in {term}{where}", term=term)


def _log_qts_terms(model, target, y, posterior: DiagGaussian, z_current, inner_noise):
    """Return ``(log_qts, ratio, log q(y|z_current))`` per row."""
    z_extra = gauss_rsample(posterior, inner_noise)  # (K-1, B, D)
    z_all = torch.cat([z_current.unsqueeze(0), z_extra], dim=0)
    log_qy = model.decode(target, z_all).log_prob(y)  # (K, B)
    _check_finite(log_qy, f"log q({target}|z)")
    k = z_all.shape[0]
    lse = torch.logsumexp(log_qy, dim=0)
    log_qts = lse - math.log(k)
    # log_qy[0] <= lse because the current draw is inside the sum, so the
    # ratio never exceeds K; the floor keeps it strictly positive.
    with torch.no_grad():
        ratio = k * torch.exp(log_qy[0] - lse)
        ratio = torch.clamp(ratio, min=torch.finfo(ratio.dtype).tiny)
    return log_qts, ratio, log_qy[0]


def estimate_log_qts(model, target, y, posterior: DiagGaussian, z_current, k, noise=None, generator=None):
    """LogSumExp estimate of ``log q(y|x)`` reusing the current posterior draw.

    Parameters
    ----------
    target : str
        Modality of ``y`` (whose decoder acts as ``q(y|z)``).
    posterior : DiagGaussian
        ``q(z|x)`` for the conditioning payload, shape ``(B, D)``.
    z_current : Tensor
        The draw already taken from ``posterior``, shape ``(B, D)``.
    k : int
        Total number of latents in the average (``k - 1`` new draws).
    noise : Tensor, optional
        Standard-normal noise of shape ``(k - 1, B, D)``.

    Returns
    -------
    log_qts : Tensor
        ``log(1/k) + logsumexp_k log q(y|z_k)``, differentiable.
    ratio : Tensor
        ``exp(log q(y|z_current) - log_qts)``, detached, in ``(0, k]``.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    target = model.resolve(target)
    if noise is None:
        noise = torch.randn((k - 1,) + tuple(posterior.mean.shape), generator=generator, dtype=posterior.mean.dtype)
    if noise.shape[0] != k - 1:
        raise ShapeError(f"inner noise has {noise.shape[0]} draws, expected {k - 1}")
    log_qts, ratio, _ = _log_qts_terms(model, target, y, posterior, z_current, noise.to(posterior.mean.dtype))
    return log_qts, ratio


def _supervised_rows(model, x_id, y_id, x, y, cfg, noise: DirectionNoise, ratio_model=None):
    """Per-row pieces of the supervised bound in direction ``x_id -> y_id``.

    ``ratio_model`` (defaults to ``model``) supplies the parameters along the
    ratio path only; it exists so tests can duplicate parameters and show
    that this path carries no gradient.
    """
    direction = f"{x_id}->{y_id}"
    dtype = model.param_dtype
    qzx = model.encode(x_id, x)
    z = gauss_rsample(qzx, noise.outer.to(dtype))
    log_px = model.decode(x_id, z).log_prob(x)
    log_pz_y = gauss_log_prob(model.encode(y_id, y), z)
    log_qz_x = gauss_log_prob(qzx, z)
    log_qts, ratio, log_qy = _log_qts_terms(model, y_id, y, qzx, z, noise.inner.to(dtype))
    if ratio_model is not None:
        rq = ratio_model.encode(x_id, x)
        rz = gauss_rsample(rq, noise.outer.to(dtype))
        _, ratio, _ = _log_qts_terms(ratio_model, y_id, y, rq, rz, noise.inner.to(dtype))
        ratio = ratio.detach()
    for name, v in (
        (f"log p({x_id}|z)", log_px),
        (f"log p(z|{y_id})", log_pz_y),
        (f"log q(z|{x_id})", log_qz_x),
    ):
        _check_finite(v, name, direction)
    return dict(
        log_px=log_px, log_pz_y=log_pz_y, log_qz_x=log_qz_x, log_qy=log_qy, log_qts=log_qts, ratio=ratio
    )


def _supervised_terms(rows, x_id, beta, direction):
    r = rows["ratio"]
    recon_x = r * rows["log_px"]
    recon_y = -r * rows["log_qy"]
    cross = r * (rows["log_pz_y"] - rows["log_qz_x"])
    per_sample = recon_x + recon_y + cross + beta * rows["log_qts"]
    recon = {x_id: recon_x, ("t" if x_id == "s" else "s"): recon_y}
    return per_sample, recon["s"], recon["t"], cross, rows["log_qts"]


def _terms(per_sample, recon_s, recon_t, cross, log_qts, direction, ratio=None, denom=None):
    denom = per_sample.shape[0] if denom is None else denom
    return ObjectiveTerms(
        total=per_sample.sum() / denom,
        recon_s=recon_s.sum() / denom,
        recon_t=recon_t.sum() / denom,
        cross_kl_terms=cross.sum() / denom,
        log_qts=log_qts.sum() / denom,
        direction=direction,
        per_sample=per_sample,
        ratio=ratio,
    )


def _require(payload, what):
    if payload is None:
        raise DataError(f"{what} payload missing; route unimodal rows to unimodal_elbo")


def supervised_elbo(model, s, t, cfg: ObjectiveConfig, noise: Optional[DirectionNoise] = None,
                    generator=None, direction="s->t") -> ObjectiveTerms:
    """Supervised bound for a batch of fully observed pairs.

    ``direction="t->s"`` evaluates the mirrored bound: ``t`` is encoded and
    supervised by ``s`` through ``s``'s encoder and decoder.
    """
    _require(s, "s")
    _require(t, "t")
    if direction not in ("s->t", "t->s"):
        raise ValueError(f"unknown direction {direction!r}")
    x_id, y_id = ("s", "t") if direction == "s->t" else ("t", "s")
    x, y = (s, t) if x_id == "s" else (t, s)
    if noise is None:
        noise = draw_direction_noise(x.shape[0], model.latent_dim, cfg.mc_samples, generator, model.param_dtype)
    rows = _supervised_rows(model, x_id, y_id, x, y, cfg, noise)
    parts = _supervised_terms(rows, x_id, cfg.classifier_weight, direction)
    return _terms(*parts, direction=direction, ratio=rows["ratio"])


def bidirectional_elbo(model, s, t, cfg: ObjectiveConfig, noise=None, generator=None) -> ObjectiveTerms:
    """Average of the ``s -> t`` and ``t -> s`` supervised bounds.

    ``noise`` is a pair ``(noise_st, noise_ts)`` of :class:`DirectionNoise`.
    """
    _require(s, "s")
    _require(t, "t")
    if noise is None:
        noise = draw_bidirectional_noise(s.shape[0], model.latent_dim, cfg.mc_samples, generator, model.param_dtype)
    a = supervised_elbo(model, s, t, cfg, noise[0], direction="s->t")
    b = supervised_elbo(model, s, t, cfg, noise[1], direction="t->s")
    half = 0.5
    return ObjectiveTerms(
        total=half * (a.total + b.total),
        recon_s=half * (a.recon_s + b.recon_s),
        recon_t=half * (a.recon_t + b.recon_t),
        cross_kl_terms=half * (a.cross_kl_terms + b.cross_kl_terms),
        log_qts=half * (a.log_qts + b.log_qts),
        direction="bi",
        per_sample=half * (a.per_sample + b.per_sample),
    )


def unimodal_elbo(model, modality, x, cfg: ObjectiveConfig, noise=None, generator=None) -> ObjectiveTerms:
    """Bound for rows where only ``modality`` is observed.

    The missing partner enters only through the pseudo-input mixture prior,
    so its decoder receives no gradient.
    """
    m = model.resolve(modality)
    other = model.other(m)
    _require(x, m)
    dtype = model.param_dtype
    if noise is None:
        noise = torch.randn((x.shape[0], model.latent_dim), generator=generator, dtype=dtype)
    qz = model.encode(m, x)
    z = gauss_rsample(qz, noise.to(dtype))
    log_px = model.decode(m, z).log_prob(x)
    log_qz = gauss_log_prob(qz, z)
    log_prior = model.pseudo_prior_log_prob(other, z)
    direction = f"{m}-only"
    for name, v in ((f"log p({m}|z)", log_px), (f"log q(z|{m})", log_qz), (f"log p_pseudo_{other}(z)", log_prior)):
        _check_finite(v, name, direction)
    cross = log_prior - log_qz
    per_sample = log_px + cross
    zero = torch.zeros_like(log_px)
    recon_s, recon_t = (log_px, zero) if m == "s" else (zero, log_px)
    return _terms(per_sample, recon_s, recon_t, cross, zero, direction)


@dataclass
class Batch:
    """Column-stacked rows with an observation mask.

    Missing payloads are filled with zeros; ``mask`` holds ``BOTH``,
    ``S_ONLY`` or ``T_ONLY`` per row.
    """

    s: torch.Tensor
    t: torch.Tensor
    mask: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __len__(self):
        return int(self.mask.shape[0])

    def kind(self):
        kinds = set(self.mask.tolist())
        return {BOTH: "paired", S_ONLY: "s-only", T_ONLY: "t-only"}[kinds.pop()] if len(kinds) == 1 else "mixed"


def batch_objective(model, batch: Batch, cfg: ObjectiveConfig, generator=None) -> ObjectiveTerms:
    """Overall objective: bidirectional bound on pairs, unimodal bounds on the rest.

    Sums the per-row bounds and divides by the batch size.
    """
    n = len(batch)
    if n == 0:
        raise DataError("empty batch")
    mask = batch.mask
    if bool(torch.any((mask < BOTH) | (mask > T_ONLY))):
        raise DataError("batch contains a row with no observed modality")
    dtype = model.param_dtype
    parts = []
    paired = torch.nonzero(mask == BOTH).flatten()
    if len(paired):
        parts.append(bidirectional_elbo(model, batch.s[paired], batch.t[paired], cfg, generator=generator))
    for code, m, payload in ((S_ONLY, "s", batch.s), (T_ONLY, "t", batch.t)):
        idx = torch.nonzero(mask == code).flatten()
        if len(idx):
            parts.append(unimodal_elbo(model, m, payload[idx], cfg, generator=generator))

    def agg(attr):
        return sum(getattr(p, attr) * p.per_sample.shape[0] for p in parts) / n

    return ObjectiveTerms(
        total=sum(p.per_sample.sum() for p in parts) / n,
        recon_s=agg("recon_s"),
        recon_t=agg("recon_t"),
        cross_kl_terms=agg("cross_kl_terms"),
        log_qts=agg("log_qts"),
        direction=batch.kind(),
        per_sample=torch.cat([p.per_sample for p in parts]).to(dtype),
    )

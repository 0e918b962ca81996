"""The MEME network container.

Exactly four networks exist: one encoder and one decoder per modality.
Weight sharing is realised by *role*, not by extra modules: in the
direction s -> t the encoder of ``t`` doubles as the conditional prior
``p(z|t)`` and the decoder of ``t`` doubles as the inner classifier
``q(t|z)``; the mirrored direction swaps every role. Two pseudo-input banks
(one per modality) provide the mixture prior used when a modality is
unobserved.
"""

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .distributions import (
    CategoricalLikelihood,
    DiagGaussian,
    GaussianLikelihood,
    LaplaceLikelihood,
    gauss_log_prob,
)
from .exceptions import ConfigError, ShapeError

SCALE_FLOOR = 1e-6
LIKELIHOODS = ("laplace", "categorical", "gaussian")
MODALITIES = ("s", "t")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModalitySpec:
    """Static description of one modality.

    ``payload_shape`` excludes the batch axis. Categorical payloads hold
    integer ids, so the network input gains a trailing one-hot axis of size
    ``n_categories``.
    """

    name: str
    payload_shape: Tuple[int, ...]
    likelihood: str = "laplace"
    n_categories: Optional[int] = None
    likelihood_scale: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "payload_shape", tuple(int(d) for d in self.payload_shape))
        if not self.payload_shape or any(d <= 0 for d in self.payload_shape):
            raise ConfigError(f"modality {self.name!r}: payload_shape must be nonempty and positive")
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError(f"modality {self.name!r}: unknown likelihood {self.likelihood!r}")
        if self.likelihood == "categorical" and not self.n_categories:
            raise ConfigError(f"modality {self.name!r}: categorical likelihood needs n_categories")
        if self.likelihood != "categorical" and self.likelihood_scale <= 0:
            raise ConfigError(f"modality {self.name!r}: likelihood_scale must be positive")

    @property
    def is_categorical(self):
        return self.likelihood == "categorical"

    @property
    def input_shape(self):
        if self.is_categorical:
            return self.payload_shape + (self.n_categories,)
        return self.payload_shape

    @property
    def event_ndim(self):
        return len(self.payload_shape)

    def check_payload(self, payload):
        n = len(self.payload_shape)
        if tuple(payload.shape[payload.dim() - n:]) != self.payload_shape or payload.dim() < n:
            raise ShapeError(
                f"modality {self.name!r}: payload shape {tuple(payload.shape)} does not end with {self.payload_shape}"
            )

    def to_input(self, payload, dtype):
        """Map a payload onto the encoder's input space."""
        self.check_payload(payload)
        if self.is_categorical:
            return F.one_hot(payload.long(), self.n_categories).to(dtype)
        return payload.to(dtype)

    def to_dict(self):
        d = asdict(self)
        d["payload_shape"] = list(self.payload_shape)
        return d


@dataclass(frozen=True)
class HeadConfig:
    """Architecture of the encoder/decoder heads.

    ``arch`` is ``"mlp"`` (any payload) or ``"conv"`` (image payloads shaped
    ``(C, H, W)`` with ``H`` and ``W`` divisible by 4).
    """

    arch: str = "mlp"
    hidden: Tuple[int, ...] = (64, 64)
    conv_channels: Tuple[int, int] = (32, 64)
    decoder_output: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.arch not in ("mlp", "conv"):
            raise ConfigError(f"unknown head architecture {self.arch!r}")
        if self.decoder_output not in ("identity", "sigmoid"):
            raise ConfigError(f"unknown decoder_output {self.decoder_output!r}")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _mlp(dims, activation=nn.ReLU):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(dims) - 2:
            layers.append(activation())
    return nn.Sequential(*layers)


def _flatten_lead(x, n_event):
    lead = x.shape[: x.dim() - n_event]
    return x.reshape((-1,) + tuple(x.shape[x.dim() - n_event:])), lead


class EncoderHead(nn.Module):
    """Payload (encoder-input space) -> DiagGaussian over the latent."""

    def __init__(self, input_shape, latent_dim, head: HeadConfig):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.latent_dim = latent_dim
        if head.arch == "conv":
            if len(self.input_shape) != 3 or self.input_shape[1] % 4 or self.input_shape[2] % 4:
                raise ConfigError(f"conv encoder needs (C, H, W) with H, W divisible by 4, got {self.input_shape}")
            c, h, w = self.input_shape
            c1, c2 = head.conv_channels
            self.body = nn.Sequential(
                nn.Conv2d(c, c1, 4, 2, 1), nn.ReLU(),
                nn.Conv2d(c1, c2, 4, 2, 1), nn.ReLU(),
                nn.Flatten(),
                _mlp([c2 * (h // 4) * (w // 4), *head.hidden, 2 * latent_dim]),
            )
        else:
            self.body = nn.Sequential(
                nn.Flatten(),
                _mlp([math.prod(self.input_shape), *head.hidden, 2 * latent_dim]),
            )

    def forward(self, x) -> DiagGaussian:
        flat, lead = _flatten_lead(x, len(self.input_shape))
        out = self.body(flat).reshape(lead + (2 * self.latent_dim,))
        mean, raw = out[..., : self.latent_dim], out[..., self.latent_dim:]
        return DiagGaussian(mean, F.softplus(raw) + SCALE_FLOOR)


class DecoderHead(nn.Module):
    """Latent -> likelihood parameters for one modality."""

    def __init__(self, spec: ModalitySpec, latent_dim, head: HeadConfig):
        super().__init__()
        self.spec = spec
        self.out_shape = spec.input_shape
        self.output = head.decoder_output
        if head.arch == "conv":
            if len(self.out_shape) != 3 or self.out_shape[1] % 4 or self.out_shape[2] % 4:
                raise ConfigError(f"conv decoder needs (C, H, W) with H, W divisible by 4, got {self.out_shape}")
            c, h, w = self.out_shape
            c1, c2 = head.conv_channels
            self.body = nn.Sequential(
                _mlp([latent_dim, *head.hidden, c2 * (h // 4) * (w // 4)]), nn.ReLU(),
                nn.Unflatten(1, (c2, h // 4, w // 4)),
                nn.ConvTranspose2d(c2, c1, 4, 2, 1), nn.ReLU(),
                nn.ConvTranspose2d(c1, c, 4, 2, 1),
            )
        else:
            self.body = nn.Sequential(
                _mlp([latent_dim, *head.hidden, math.prod(self.out_shape)]),
                nn.Unflatten(1, self.out_shape),
            )

    def forward(self, z):
        flat, lead = _flatten_lead(z, 1)
        out = self.body(flat)
        out = out.reshape(lead + tuple(out.shape[1:]))
        if self.output == "sigmoid" and not self.spec.is_categorical:
            out = torch.sigmoid(out)
        return out

    def likelihood(self, z):
        params = self(z)
        spec = self.spec
        if spec.likelihood == "laplace":
            return LaplaceLikelihood(params, spec.likelihood_scale, spec.event_ndim)
        if spec.likelihood == "gaussian":
            return GaussianLikelihood(params, spec.likelihood_scale, spec.event_ndim)
        return CategoricalLikelihood(params, spec.event_ndim)


class PseudoBank(nn.Module):
    """Learnable pseudo-inputs living in one modality's encoder-input space."""

    def __init__(self, size, input_shape):
        super().__init__()
        if size < 1:
            raise ConfigError("pseudo bank size must be >= 1")
        self.points = nn.Parameter(torch.randn((size,) + tuple(input_shape)) * 0.1)

    @property
    def size(self):
        return self.points.shape[0]


class MemeModel(nn.Module):
    """Two encoders, two decoders and two pseudo banks.

    Modalities are addressed as ``"s"``/``"t"`` or by their spec names.
    """

    def __init__(
        self,
        spec_s: ModalitySpec,
        spec_t: ModalitySpec,
        latent_dim: int,
        head: HeadConfig = HeadConfig(),
        n_pseudo: int = 50,
        seed: int = 0,
        dtype="float32",
    ):
        super().__init__()
        if latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if spec_s.name == spec_t.name:
            raise ConfigError("modality names must be unique")
        if n_pseudo < 1:
            raise ConfigError("n_pseudo must be >= 1")
        self.spec_s, self.spec_t = spec_s, spec_t
        self.latent_dim = int(latent_dim)
        self.head = head
        self.n_pseudo = int(n_pseudo)
        self.seed = int(seed)
        self.dtype_name = dtype if isinstance(dtype, str) else {v: k for k, v in _DTYPES.items()}[dtype]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.enc_s = EncoderHead(spec_s.input_shape, latent_dim, head)
            self.enc_t = EncoderHead(spec_t.input_shape, latent_dim, head)
            self.dec_s = DecoderHead(spec_s, latent_dim, head)
            self.dec_t = DecoderHead(spec_t, latent_dim, head)
            self.bank_s = PseudoBank(self.n_pseudo, spec_s.input_shape)
            self.bank_t = PseudoBank(self.n_pseudo, spec_t.input_shape)
        self.to(_DTYPES[self.dtype_name])

    # -- role map -----------------------------------------------------------

    @property
    def param_dtype(self):
        return next(self.parameters()).dtype

    def resolve(self, modality) -> str:
        if modality in MODALITIES:
            return modality
        if modality == self.spec_s.name:
            return "s"
        if modality == self.spec_t.name:
            return "t"
        raise ValueError(f"unknown modality {modality!r}")

    @staticmethod
    def other(modality) -> str:
        return "t" if modality == "s" else "s"

    def spec(self, modality) -> ModalitySpec:
        return self.spec_s if self.resolve(modality) == "s" else self.spec_t

    def encoder(self, modality) -> EncoderHead:
        return self.enc_s if self.resolve(modality) == "s" else self.enc_t

    def decoder(self, modality) -> DecoderHead:
        return self.dec_s if self.resolve(modality) == "s" else self.dec_t

    def bank(self, modality) -> PseudoBank:
        return self.bank_s if self.resolve(modality) == "s" else self.bank_t

    def mirrored(self) -> "MemeModel":
        """Same parameters with the roles of ``s`` and ``t`` exchanged."""
        m = MemeModel.__new__(MemeModel)
        nn.Module.__init__(m)
        m.spec_s, m.spec_t = self.spec_t, self.spec_s
        m.latent_dim, m.head, m.n_pseudo = self.latent_dim, self.head, self.n_pseudo
        m.seed, m.dtype_name = self.seed, self.dtype_name
        m.enc_s, m.enc_t = self.enc_t, self.enc_s
        m.dec_s, m.dec_t = self.dec_t, self.dec_s
        m.bank_s, m.bank_t = self.bank_t, self.bank_s
        return m

    # -- densities ----------------------------------------------------------

    def encode(self, modality, payload) -> DiagGaussian:
        """Posterior q(z|payload) of the given modality."""
        spec = self.spec(modality)
        return self.encoder(modality)(spec.to_input(payload, self.param_dtype))

    def encode_inputs(self, modality, inputs) -> DiagGaussian:
        """Encode tensors already in encoder-input space (e.g. pseudo-inputs)."""
        return self.encoder(modality)(inputs)

    def decode(self, modality, z):
        """Likelihood p(payload|z) of the given modality."""
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent has {z.shape[-1]} entries, model expects {self.latent_dim}")
        return self.decoder(modality).likelihood(z)

    def pseudo_components(self, modality) -> DiagGaussian:
        """Encodings of the pseudo-inputs of ``modality`` (shape ``(N, D)``)."""
        return self.encode_inputs(modality, self.bank(modality).points)

    def pseudo_prior_log_prob(self, modality, z) -> torch.Tensor:
        """log (1/N) sum_i N(z; enc(u_i)) using the bank of ``modality``."""
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent has {z.shape[-1]} entries, model expects {self.latent_dim}")
        comps = self.pseudo_components(modality)
        if comps.mean.shape[0] == 0:
            raise ConfigError("pseudo bank is empty")
        lp = gauss_log_prob(comps, z.unsqueeze(-2))
        return torch.logsumexp(lp, dim=-1) - math.log(comps.mean.shape[0])

    # -- initialisation -----------------------------------------------------

    @torch.no_grad()
    def init_pseudo_inputs(self, modality, payloads, seed=0):
        """Copy ``N`` randomly chosen training payloads into the bank."""
        spec = self.spec(modality)
        payloads = torch.as_tensor(np.asarray(payloads))
        n = payloads.shape[0]
        if n == 0:
            raise ConfigError(f"no payloads available to initialise bank of {spec.name!r}")
        rng = np.random.default_rng(seed)
        idx = rng.choice(n, size=self.n_pseudo, replace=n < self.n_pseudo)
        self.bank(modality).points.copy_(spec.to_input(payloads[idx], self.param_dtype))
        return self

    # -- persistence --------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "spec_s": self.spec_s.to_dict(),
            "spec_t": self.spec_t.to_dict(),
            "head": self.head.to_dict(),
            "n_pseudo": self.n_pseudo,
            "seed": self.seed,
            "dtype": self.dtype_name,
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "MemeModel":
        return cls(
            ModalitySpec(**manifest["spec_s"]),
            ModalitySpec(**manifest["spec_t"]),
            manifest["latent_dim"],
            HeadConfig(**manifest["head"]),
            manifest["n_pseudo"],
            manifest["seed"],
            manifest["dtype"],
        )


def parameter_census(model: MemeModel) -> dict:
    """Map each top-level child to its parameter count."""
    return {name: sum(p.numel() for p in child.parameters()) for name, child in model.named_children()}


def save_checkpoint(model: MemeModel, path, extra: Optional[dict] = None):
    """Write manifest plus named parameter arrays into one ``.npz`` archive."""
    manifest = dict(model.manifest())
    if extra:
        manifest["extra"] = extra
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["manifest"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Tuple[MemeModel, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(model, manifest)``."""
    with np.load(path, allow_pickle=False) as z:
        manifest = json.loads(bytes(z["manifest"]).decode())
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
    model = MemeModel.from_manifest(manifest)
    model.load_state_dict(state)
    return model, manifest

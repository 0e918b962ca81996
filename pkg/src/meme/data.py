"""Dataset construction for two-modality training.

Pairs are built by class identity, then partially unpaired by an
:class:`ObservationScheme`. A linear two-view generator provides a cheap
dataset with known structure for tests and quick runs.
"""

import enum
import gzip
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from .exceptions import ConfigError, DataError
from .objective import BOTH, S_ONLY, T_ONLY, Batch


class Mask(str, enum.Enum):
    BOTH = "both"
    S_ONLY = "s-only"
    T_ONLY = "t-only"

    @property
    def code(self):
        return {Mask.BOTH: BOTH, Mask.S_ONLY: S_ONLY, Mask.T_ONLY: T_ONLY}[self]


@dataclass
class PairedSample:
    s: Optional[np.ndarray]
    t: Optional[np.ndarray]
    mask: Mask = Mask.BOTH
    label: Optional[int] = None

    def __post_init__(self):
        self.mask = Mask(self.mask)
        has_s, has_t = self.s is not None, self.t is not None
        if not (has_s or has_t):
            raise DataError("sample has no observed modality")
        expected = {Mask.BOTH: (True, True), Mask.S_ONLY: (True, False), Mask.T_ONLY: (False, True)}[self.mask]
        if (has_s, has_t) != expected:
            raise DataError(f"mask {self.mask.value!r} inconsistent with payload presence (s={has_s}, t={has_t})")


class SchemeMode(str, enum.Enum):
    KEEP_S = "keep_s"
    KEEP_T = "keep_t"
    SPLIT = "split"


@dataclass(frozen=True)
class ObservationScheme:
    """Keep ``ceil(fraction * n)`` pairs; demote the rest per ``mode``."""

    fraction: float = 1.0
    mode: SchemeMode = SchemeMode.KEEP_S
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", SchemeMode(self.mode))
        if not (0.0 < self.fraction <= 1.0):
            raise ConfigError(f"observation fraction must lie in (0, 1], got {self.fraction}")


def pair_by_class(corpus_a, corpus_b, multiplicity=1, seed=0) -> List[PairedSample]:
    """Pair every item of ``corpus_a`` with same-class items of ``corpus_b``.

    Each corpus is ``(payloads, labels)``. Every ``a`` item is paired with
    ``multiplicity`` ``b`` items drawn uniformly (with replacement) from its
    class.
    """
    xa, ya = corpus_a
    xb, yb = corpus_b
    ya, yb = np.asarray(ya), np.asarray(yb)
    if multiplicity < 1:
        raise ConfigError("multiplicity must be >= 1")
    only_a = sorted(set(ya.tolist()) - set(yb.tolist()))
    only_b = sorted(set(yb.tolist()) - set(ya.tolist()))
    if only_a or only_b:
        raise DataError(f"classes present in one corpus only: a-only={only_a}, b-only={only_b}")
    rng = np.random.default_rng(seed)
    by_class = {c: np.flatnonzero(yb == c) for c in np.unique(yb)}
    pairs = []
    for i, c in enumerate(ya.tolist()):
        for j in rng.choice(by_class[c], size=multiplicity, replace=True):
            pairs.append(PairedSample(np.asarray(xa[i]), np.asarray(xb[j]), Mask.BOTH, int(c)))
    return pairs


def apply_observation_scheme(pairs: Sequence[PairedSample], scheme: ObservationScheme) -> List[PairedSample]:
    """Demote all but ``ceil(f * n)`` pairs to single-modality rows.

    The kept set is a seeded permutation prefix, so re-applying the same
    scheme to its own output is a no-op. Under ``SPLIT`` the remainder
    alternates ``s``-only / ``t``-only in permutation order.
    """
    n = len(pairs)
    n_keep = math.ceil(scheme.fraction * n)
    order = np.random.default_rng(scheme.seed).permutation(n)
    out = list(pairs)
    for rank, i in enumerate(order[n_keep:]):
        p = pairs[i]
        if scheme.mode == SchemeMode.KEEP_S or (scheme.mode == SchemeMode.SPLIT and rank % 2 == 0):
            if p.s is None:
                raise DataError(f"row {i} has no s payload to keep")
            out[i] = PairedSample(p.s, None, Mask.S_ONLY, p.label)
        else:
            if p.t is None:
                raise DataError(f"row {i} has no t payload to keep")
            out[i] = PairedSample(None, p.t, Mask.T_ONLY, p.label)
    return out


def synth_two_view(n, latent_dim=2, noise_scale=0.05, seed=0, n_classes=5, s_dim=8, t_dim=8,
                   class_sep=3.0, within_scale=1.0, private_dim=0, private_scale=0.0) -> List[PairedSample]:
    """Linear two-view data sharing a class and a continuous factor.

    Each row draws a class ``c`` and ``w = m_c + within_scale * e`` with
    ``e ~ N(0, I)``; it then emits ``s = A_c w + eps_s`` and
    ``t = B_c w + eps_t`` where ``A_c``, ``B_c`` are fixed random maps per
    class and ``m_c`` are random class centres scaled by ``class_sep``.

    ``eps`` is white noise of std ``noise_scale`` plus, when ``private_dim``
    is positive, a view-private factor ``private_scale * P v`` with
    ``v ~ N(0, I)`` not shared between the views. With both scales at zero
    the views are exact linear images of the same ``w``.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    if noise_scale < 0:
        raise ConfigError("noise_scale must be >= 0")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((n_classes, latent_dim)) * class_sep
    a_maps = rng.standard_normal((n_classes, s_dim, latent_dim)) / math.sqrt(latent_dim)
    b_maps = rng.standard_normal((n_classes, t_dim, latent_dim)) / math.sqrt(latent_dim)
    labels = rng.integers(0, n_classes, size=n)
    w = centres[labels] + within_scale * rng.standard_normal((n, latent_dim))
    s = np.einsum("nij,nj->ni", a_maps[labels], w) + noise_scale * rng.standard_normal((n, s_dim))
    t = np.einsum("nij,nj->ni", b_maps[labels], w) + noise_scale * rng.standard_normal((n, t_dim))
    if private_dim > 0:
        p_s = rng.standard_normal((s_dim, private_dim)) / math.sqrt(private_dim)
        p_t = rng.standard_normal((t_dim, private_dim)) / math.sqrt(private_dim)
        s = s + private_scale * rng.standard_normal((n, private_dim)) @ p_s.T
        t = t + private_scale * rng.standard_normal((n, private_dim)) @ p_t.T
    return [PairedSample(s[i], t[i], Mask.BOTH, int(labels[i])) for i in range(n)]


# -- columnar view --------------------------------------------------------


@dataclass
class PairedDataset:
    """Column-stacked storage of a list of :class:`PairedSample`."""

    s: np.ndarray
    t: np.ndarray
    mask: np.ndarray
    labels: np.ndarray  # -1 where unlabeled

    def __len__(self):
        return len(self.mask)

    @classmethod
    def from_samples(cls, samples: Sequence[PairedSample], s_shape=None, t_shape=None, s_dtype=None, t_dtype=None):
        if not samples:
            raise DataError("empty dataset")
        ref_s = next((p.s for p in samples if p.s is not None), None)
        ref_t = next((p.t for p in samples if p.t is not None), None)
        s_shape = tuple(s_shape) if s_shape is not None else np.shape(ref_s)
        t_shape = tuple(t_shape) if t_shape is not None else np.shape(ref_t)
        s_dtype = s_dtype or (np.asarray(ref_s).dtype if ref_s is not None else np.float32)
        t_dtype = t_dtype or (np.asarray(ref_t).dtype if ref_t is not None else np.float32)
        s = np.zeros((len(samples),) + tuple(s_shape), dtype=s_dtype)
        t = np.zeros((len(samples),) + tuple(t_shape), dtype=t_dtype)
        for i, p in enumerate(samples):
            if p.s is not None:
                s[i] = p.s
            if p.t is not None:
                t[i] = p.t
        mask = np.array([p.mask.code for p in samples], dtype=np.int64)
        labels = np.array([-1 if p.label is None else p.label for p in samples], dtype=np.int64)
        return cls(s, t, mask, labels)

    def to_samples(self) -> List[PairedSample]:
        out = []
        for i in range(len(self)):
            m = int(self.mask[i])
            out.append(PairedSample(
                self.s[i] if m != T_ONLY else None,
                self.t[i] if m != S_ONLY else None,
                {BOTH: Mask.BOTH, S_ONLY: Mask.S_ONLY, T_ONLY: Mask.T_ONLY}[m],
                None if self.labels[i] < 0 else int(self.labels[i]),
            ))
        return out

    def subset(self, idx):
        return PairedDataset(self.s[idx], self.t[idx], self.mask[idx], self.labels[idx])

    def batch(self, idx=None, dtype=torch.float32) -> Batch:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        return Batch(_as_tensor(self.s[idx], dtype), _as_tensor(self.t[idx], dtype),
                     torch.from_numpy(self.mask[idx]), torch.from_numpy(self.labels[idx]))


def _as_tensor(a, dtype):
    t = torch.from_numpy(np.ascontiguousarray(a))
    return t if not t.is_floating_point() else t.to(dtype)


def collate(samples: Sequence[PairedSample], dtype=torch.float32) -> Batch:
    return PairedDataset.from_samples(samples).batch(dtype=dtype)


def mask_checksum(samples_or_mask) -> str:
    """SHA-256 over the emitted mask sequence."""
    if isinstance(samples_or_mask, np.ndarray):
        codes = samples_or_mask.astype(np.int64)
    else:
        codes = np.array([p.mask.code for p in samples_or_mask], dtype=np.int64)
    return hashlib.sha256(codes.tobytes()).hexdigest()


def mask_counts(mask) -> dict:
    mask = np.asarray(mask)
    return {"both": int(np.sum(mask == BOTH)), "s-only": int(np.sum(mask == S_ONLY)),
            "t-only": int(np.sum(mask == T_ONLY))}


# -- raw corpora ----------------------------------------------------------


def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (the MNIST binary format), optionally gzipped."""
    with _open(path) as fh:
        zero, dtype_code, ndim = struct.unpack(">HBB", fh.read(4))
        if zero != 0 or dtype_code != 0x08:
            raise DataError(f"{path}: not an unsigned-byte IDX file")
        shape = struct.unpack(">" + "I" * ndim, fh.read(4 * ndim))
        return np.frombuffer(fh.read(), dtype=np.uint8).reshape(shape)


def _find(directory, names):
    for name in names:
        for cand in (name, name + ".gz"):
            p = os.path.join(directory, cand)
            if os.path.exists(p):
                return p
    raise DataError(f"none of {names} found in {directory!r}; download the corpus there first")


def load_mnist(directory, split="train", limit=None, seed=0):
    """Load MNIST as ``(images (n, 1, 28, 28) float32 in [0, 1], labels)``."""
    prefix = "train" if split == "train" else "t10k"
    x = read_idx(_find(directory, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"]))
    y = read_idx(_find(directory, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"]))
    x = x.astype(np.float32)[:, None] / 255.0
    return _limit(x, y.astype(np.int64), limit, seed)


def load_svhn(directory, split="train", limit=None, seed=0):
    """Load SVHN ``{split}_32x32.mat`` as ``(images (n, 3, 32, 32), labels)``.

    Label 10 encodes digit 0.
    """
    from scipy.io import loadmat

    path = _find(directory, [f"{split}_32x32.mat"])
    mat = loadmat(path)
    x = np.transpose(mat["X"], (3, 2, 0, 1)).astype(np.float32) / 255.0
    y = mat["y"].astype(np.int64).ravel() % 10
    return _limit(x, y, limit, seed)


def _limit(x, y, limit, seed):
    if limit is None or limit >= len(y):
        return x, y
    idx = np.sort(np.random.default_rng(seed).choice(len(y), size=limit, replace=False))
    return x[idx], y[idx]


# -- manifest -------------------------------------------------------------


def write_dataset(path_prefix, dataset: PairedDataset, manifest: dict) -> dict:
    """Write ``<prefix>.npz`` tensors and ``<prefix>.json`` manifest."""
    np.savez(path_prefix + ".npz", s=dataset.s, t=dataset.t, mask=dataset.mask, labels=dataset.labels)
    manifest = dict(manifest)
    manifest.update(
        tensors=os.path.basename(path_prefix + ".npz"),
        n=len(dataset),
        counts=mask_counts(dataset.mask),
        mask_checksum=mask_checksum(dataset.mask),
        s_shape=list(dataset.s.shape[1:]),
        t_shape=list(dataset.t.shape[1:]),
    )
    with open(path_prefix + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_dataset(manifest_path):
    """Return ``(train PairedDataset, test PairedDataset or None, manifest)``."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    with np.load(os.path.join(base, manifest["tensors"])) as z:
        train = PairedDataset(z["s"], z["t"], z["mask"], z["labels"])
    if mask_checksum(train.mask) != manifest["mask_checksum"]:
        raise DataError(f"{manifest_path}: mask checksum mismatch")
    test = None
    if manifest.get("test_tensors"):
        with np.load(os.path.join(base, manifest["test_tensors"])) as z:
            test = PairedDataset(z["s"], z["t"], z["mask"], z["labels"])
    return train, test, manifest

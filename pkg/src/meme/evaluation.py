"""Measurement suite: coherence, latent probes, relatedness, CCA, evidence.

Every function treats the model as read-only and runs under
``torch.no_grad()`` unless noted otherwise.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
from scipy.cluster.hierarchy import linkage
from scipy.spatial.distance import squareform
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from .data import PairedDataset
from .distributions import DiagGaussian, gauss_log_prob, gauss_rsample, w2_gaussian_diag
from .exceptions import ConfigError, DataError, ShapeError
from .objective import S_ONLY, T_ONLY


def _tensor(x, dtype):
    if isinstance(x, torch.Tensor):
        return x if not x.is_floating_point() else x.to(dtype)
    a = np.asarray(x)
    t = torch.from_numpy(np.ascontiguousarray(a))
    return t.to(dtype) if t.is_floating_point() else t


def _as_dataset(pairs):
    return pairs if isinstance(pairs, PairedDataset) else PairedDataset.from_samples(list(pairs))


# -- cross generation -----------------------------------------------------


@torch.no_grad()
def cross_generate(model, source, payload, noise=None, generator=None, sample=True):
    """Encode with ``source``, draw ``z``, decode with the other modality.

    Returns the target likelihood's mean (continuous) or mode (categorical).
    With ``sample=False`` (or all-zero ``noise``) the posterior mean is used.
    """
    src = model.resolve(source)
    q = model.encode(src, _tensor(payload, model.param_dtype))
    if not sample:
        z = q.mean
    else:
        if noise is None:
            noise = torch.randn(q.mean.shape, generator=generator, dtype=q.mean.dtype)
        if noise.shape != q.mean.shape:
            raise ShapeError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(q.mean.shape)}")
        z = gauss_rsample(q, noise.to(q.mean.dtype))
    return model.decode(model.other(src), z).mean


def _source_rows(ds: PairedDataset, source):
    keep = ds.mask != (T_ONLY if source == "s" else S_ONLY)
    payload = ds.s if source == "s" else ds.t
    return payload[keep], ds.labels[keep]


def coherence_score(model, pairs, classifier, source="s", generator=None, sample=True, batch_size=512):
    """Fraction of cross-generations classified as the source's label.

    ``classifier`` is any object with ``predict`` over target payloads; it
    must have been trained independently of ``model``.
    """
    if classifier is None:
        raise ConfigError("coherence needs a classifier for the target modality")
    src = model.resolve(source)
    x, y = _source_rows(_as_dataset(pairs), src)
    if len(y) == 0:
        raise DataError("no rows with the source modality observed")
    if np.any(y < 0):
        raise DataError("coherence requires labeled data")
    preds = []
    for i in range(0, len(y), batch_size):
        gen = cross_generate(model, src, x[i:i + batch_size], generator=generator, sample=sample)
        preds.append(np.asarray(classifier.predict(gen.cpu().numpy())))
    return float(np.mean(np.concatenate(preds) == y))


# -- latent probes --------------------------------------------------------


@torch.no_grad()
def encode_latents(model, modality, payloads, use_samples=False, generator=None, batch_size=1024):
    m = model.resolve(modality)
    out = []
    for i in range(0, len(payloads), batch_size):
        q = model.encode(m, _tensor(payloads[i:i + batch_size], model.param_dtype))
        z = q.mean
        if use_samples:
            z = gauss_rsample(q, torch.randn(q.mean.shape, generator=generator, dtype=q.mean.dtype))
        out.append(z.cpu().numpy())
    return np.concatenate(out)


def linear_probe():
    """Single affine classifier (standardisation folds into the same map)."""
    return make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000))


def probe_accuracy_on_latents(latents, labels, test_size=0.5, seed=0):
    """Held-out accuracy of :func:`linear_probe` fitted on ``latents``."""
    latents, labels = np.asarray(latents), np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise DataError("linear probe needs at least two classes")
    # canonical row order makes the split independent of how the test set is ordered
    order = np.lexsort(np.column_stack([latents.reshape(len(latents), -1), labels]).T[::-1])
    latents, labels = latents[order], labels[order]
    strat = labels if np.unique(labels, return_counts=True)[1].min() >= 2 else None
    ztr, zte, ytr, yte = train_test_split(latents, labels, test_size=test_size, random_state=seed, stratify=strat)
    if len(np.unique(ytr)) < 2:
        raise DataError("training split of the probe contains a single class")
    return float(linear_probe().fit(ztr, ytr).score(zte, yte))


def latent_probe_accuracy(model, modality, pairs, test_size=0.5, seed=0, use_samples=False, generator=None):
    """Fit a linear classifier on posterior means of ``modality``; held-out accuracy.

    ``use_samples=True`` probes reparameterised draws instead of means.
    """
    m = model.resolve(modality)
    x, y = _source_rows(_as_dataset(pairs), m)
    if np.any(y < 0):
        raise DataError("latent probe requires labeled data")
    z = encode_latents(model, m, x, use_samples=use_samples, generator=generator)
    return probe_accuracy_on_latents(z, y, test_size, seed)


# -- relatedness ----------------------------------------------------------


@dataclass
class RelatednessReport:
    """Cross-modal W2 structure of a paired batch.

    ``distances[i, j]`` is the squared W2 between ``q(z|s_i)`` and
    ``q(z|t_j)``. ``class_matrix[u, v]`` averages it over ``s`` of class
    ``u`` and ``t`` of class ``v`` (NaN where a class is absent).
    ``merges`` is the scipy linkage matrix over ``dendrogram_classes``.
    """

    distances: np.ndarray
    auc: Optional[float]
    classes: np.ndarray
    class_matrix: np.ndarray
    missing_s: List[int] = field(default_factory=list)
    missing_t: List[int] = field(default_factory=list)
    dendrogram_classes: Optional[np.ndarray] = None
    merges: Optional[np.ndarray] = None

    @property
    def merge_heights(self):
        return None if self.merges is None else self.merges[:, 2]

    def paired_unpaired(self):
        """Split ``distances`` into diagonal (paired) and off-diagonal values."""
        d = self.distances
        off = ~np.eye(d.shape[0], dtype=bool)
        return np.diag(d).copy(), d[off]

    def records(self):
        paired, unpaired = self.paired_unpaired()
        recs = [
            {"metric": "relatedness_auc", "value": self.auc},
            {"metric": "w2sq_paired_mean", "value": float(np.mean(paired))},
        ]
        if unpaired.size:
            recs.append({"metric": "w2sq_unpaired_mean", "value": float(np.mean(unpaired))})
        recs.append({"metric": "class_matrix", "value": np.where(np.isnan(self.class_matrix), None,
                                                                self.class_matrix).tolist(),
                     "classes": self.classes.tolist(), "missing_s": self.missing_s, "missing_t": self.missing_t})
        if self.merges is not None:
            recs.append({"metric": "dendrogram", "value": self.merges.tolist(),
                         "classes": self.dendrogram_classes.tolist()})
        return recs


def pairwise_w2(qa: DiagGaussian, qb: DiagGaussian) -> torch.Tensor:
    """``(M, M')`` matrix of squared W2 distances between two encoding batches."""
    return w2_gaussian_diag(DiagGaussian(qa.mean[:, None], qa.scale[:, None]),
                            DiagGaussian(qb.mean[None], qb.scale[None]))


@torch.no_grad()
def relatedness(model, s, t, labels=None, labels_t=None, classes=None) -> RelatednessReport:
    """Pairwise W2 between the ``s`` and ``t`` encodings of a paired batch.

    Row ``i`` of ``s`` and row ``i`` of ``t`` form the same underlying pair;
    the AUC scores ``-d_ij`` as a predictor of ``i == j`` and is ``None``
    when the batch has a single element. ``labels_t`` defaults to
    ``labels``. A class absent from ``s`` (``t``) leaves its row (column)
    of the class matrix NaN; the dendrogram uses classes present in both.
    """
    dtype = model.param_dtype
    s, t = _tensor(s, dtype), _tensor(t, dtype)
    if s.shape[0] != t.shape[0]:
        raise ShapeError("s and t batches must have equal length")
    d = pairwise_w2(model.encode("s", s), model.encode("t", t)).cpu().numpy().astype(np.float64)
    m = d.shape[0]
    auc = None
    if m > 1:
        auc = float(roc_auc_score(np.eye(m, dtype=int).ravel(), -d.ravel()))
    if labels is None:
        return RelatednessReport(d, auc, np.array([], dtype=int), np.zeros((0, 0)))
    ls = np.asarray(labels)
    lt = ls if labels_t is None else np.asarray(labels_t)
    classes = np.union1d(np.unique(ls), np.unique(lt)) if classes is None else np.asarray(classes)
    c = len(classes)
    in_s = [ls == u for u in classes]
    in_t = [lt == u for u in classes]
    km = np.full((c, c), np.nan)
    for a in range(c):
        for b in range(c):
            if in_s[a].any() and in_t[b].any():
                km[a, b] = d[np.ix_(in_s[a], in_t[b])].mean()
    missing_s = [int(u) for u, p in zip(classes, in_s) if not p.any()]
    missing_t = [int(u) for u, p in zip(classes, in_t) if not p.any()]
    ok = np.array([ps.any() and pt.any() for ps, pt in zip(in_s, in_t)])
    dendro_classes, merges = None, None
    if ok.sum() >= 2:
        sub = km[np.ix_(ok, ok)]
        sym = 0.5 * (sub + sub.T)
        np.fill_diagonal(sym, 0.0)
        merges = linkage(squareform(sym, checks=False), method="average")
        dendro_classes = classes[ok]
    return RelatednessReport(d, auc, classes, km, missing_s, missing_t, dendro_classes, merges)


# -- CCA ------------------------------------------------------------------


def _inv_sqrt(c):
    w, v = np.linalg.eigh(c)
    w = np.clip(w, np.finfo(float).tiny, None)
    return (v / np.sqrt(w)) @ v.T


def cca_correlation(features_a, features_b, reg=1e-8):
    """Leading canonical correlation of two feature sets (ridge-regularised).

    ``reg`` is added to each covariance diagonal relative to its mean
    variance, so the result is invariant to rescaling of either input.
    """
    a = np.asarray(features_a, dtype=np.float64).reshape(len(features_a), -1)
    b = np.asarray(features_b, dtype=np.float64).reshape(len(features_b), -1)
    if a.shape[0] != b.shape[0]:
        raise ShapeError("feature sets need equal row counts")
    n = a.shape[0]
    if n < 2:
        raise DataError("CCA needs at least two rows")
    a = a - a.mean(0)
    b = b - b.mean(0)
    caa = a.T @ a / (n - 1)
    cbb = b.T @ b / (n - 1)
    cab = a.T @ b / (n - 1)
    caa += reg * max(np.trace(caa) / caa.shape[0], np.finfo(float).tiny) * np.eye(caa.shape[0])
    cbb += reg * max(np.trace(cbb) / cbb.shape[0], np.finfo(float).tiny) * np.eye(cbb.shape[0])
    m = _inv_sqrt(caa) @ cab @ _inv_sqrt(cbb)
    top = np.linalg.svd(m, compute_uv=False)[0]
    return float(np.clip(top, 0.0, 1.0))


# -- marginal likelihood --------------------------------------------------


@torch.no_grad()
def marginal_loglik(model, s, t, direction="s->t", n_importance=1000, generator=None, noise=None):
    """Importance-sampled ``log p(x|y)`` per row with ``q(z|x)`` as proposal.

    For ``direction="s->t"``, ``x = s`` and ``y = t``::

        log (1/n) sum_i p(s|z_i) p(z_i|t) / q(z_i|s),   z_i ~ q(z|s)

    The additive ``log p(t)`` is parameter-free and omitted. Returns a
    tensor of shape ``(B,)``.
    """
    if n_importance < 1:
        raise ConfigError("n_importance must be >= 1")
    x_id, y_id = ("s", "t") if direction == "s->t" else ("t", "s")
    dtype = model.param_dtype
    s, t = _tensor(s, dtype), _tensor(t, dtype)
    x, y = (s, t) if x_id == "s" else (t, s)
    q = model.encode(x_id, x)
    prior = model.encode(y_id, y)
    if noise is None:
        noise = torch.randn((n_importance,) + tuple(q.mean.shape), generator=generator, dtype=dtype)
    z = gauss_rsample(q, noise.to(dtype))
    log_w = model.decode(x_id, z).log_prob(x) + gauss_log_prob(prior, z) - gauss_log_prob(q, z)
    return torch.logsumexp(log_w, dim=0) - math.log(z.shape[0])


# -- coherence classifiers ------------------------------------------------


class PayloadClassifier(ClassifierMixin, BaseEstimator):
    """Small classifier over raw payloads, used to score cross-generations.

    ``arch="conv"`` expects ``(C, H, W)`` payloads; ``"mlp"`` flattens.
    """

    def __init__(self, arch="mlp", hidden=128, epochs=5, batch_size=128, learning_rate=1e-3, seed=0):
        self.arch = arch
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def _build(self, input_shape, n_classes):
        from torch import nn

        if self.arch == "conv":
            c, h, w = input_shape
            return nn.Sequential(
                nn.Conv2d(c, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
                nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
                nn.Flatten(), nn.Linear(64 * (h // 4) * (w // 4), self.hidden), nn.ReLU(),
                nn.Linear(self.hidden, n_classes),
            )
        return nn.Sequential(nn.Flatten(), nn.Linear(int(np.prod(input_shape)), self.hidden), nn.ReLU(),
                             nn.Linear(self.hidden, n_classes))

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        self.input_shape_ = tuple(X.shape[1:])
        y_idx = np.searchsorted(self.classes_, y)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.net_ = self._build(self.input_shape_, len(self.classes_))
        gen = torch.Generator().manual_seed(self.seed)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
        xt, yt = torch.from_numpy(X), torch.from_numpy(y_idx)
        self.net_.train()
        for _ in range(self.epochs):
            perm = torch.randperm(len(yt), generator=gen)
            for i in range(0, len(yt), self.batch_size):
                idx = perm[i:i + self.batch_size]
                opt.zero_grad()
                loss = torch.nn.functional.cross_entropy(self.net_(xt[idx]), yt[idx])
                loss.backward()
                opt.step()
        self.net_.eval()
        return self

    @torch.no_grad()
    def predict(self, X):
        check_is_fitted(self, "net_")
        X = torch.from_numpy(np.asarray(X, dtype=np.float32).reshape((-1,) + self.input_shape_))
        out = [self.net_(X[i:i + 1024]).argmax(-1) for i in range(0, len(X), 1024)]
        return self.classes_[torch.cat(out).numpy()]

    def save(self, path):
        check_is_fitted(self, "net_")
        arrays = {f"param/{k}": v.numpy() for k, v in self.net_.state_dict().items()}
        meta = dict(self.get_params(), input_shape=list(self.input_shape_), classes=self.classes_.tolist())
        arrays["manifest"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            meta = json.loads(bytes(z["manifest"]).decode())
            state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
        shape, classes = tuple(meta.pop("input_shape")), np.asarray(meta.pop("classes"))
        clf = cls(**meta)
        clf.classes_, clf.input_shape_ = classes, shape
        clf.net_ = clf._build(shape, len(classes))
        clf.net_.load_state_dict(state)
        clf.net_.eval()
        return clf


# -- reports and figures --------------------------------------------------


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_report(records, path, config=None):
    digest = config_digest(config or {})
    with open(path, "w") as fh:
        for rec in records:
            rec = dict(rec)
            rec.setdefault("stderr", None)
            rec["config_digest"] = digest
            fh.write(json.dumps(rec) + "\n")
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_relatedness_histogram(report: RelatednessReport, path, bins=40):
    """Histogram of W2 distances (square root of the stored squared values)."""
    plt = _pyplot()
    paired, unpaired = report.paired_unpaired()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(np.sqrt(unpaired), bins=bins, density=True, alpha=0.6, label="unpaired")
    ax.hist(np.sqrt(paired), bins=bins, density=True, alpha=0.6, label="paired")
    ax.set_xlabel("W2 distance (sqrt of stored d2)")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Description": "plotted value = sqrt(squared W2)"})
    plt.close(fig)
    return path


def plot_class_matrix(report: RelatednessReport, path, s_name="s", t_name="t"):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(np.ma.masked_invalid(report.class_matrix), cmap="viridis")
    ax.set_xticks(range(len(report.classes)), [str(c) for c in report.classes])
    ax.set_yticks(range(len(report.classes)), [str(c) for c in report.classes])
    ax.set_xlabel(f"class of {t_name}")
    ax.set_ylabel(f"class of {s_name}")
    fig.colorbar(im, ax=ax, label="mean squared W2")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_dendrogram(report: RelatednessReport, path):
    from scipy.cluster.hierarchy import dendrogram

    if report.merges is None:
        raise DataError("dendrogram needs at least two classes present in both modalities")
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    dendrogram(report.merges, labels=[str(c) for c in report.dendrogram_classes], ax=ax)
    ax.set_ylabel("average squared W2")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path

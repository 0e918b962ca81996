"""Optimisation loop over the overall objective.

Batches are homogeneous by observation mask. On an ``s``-only batch the
decoder of ``t`` is outside the computation graph, so its gradients stay
``None`` and Adam leaves both the parameters and their optimiser state
untouched (symmetrically for ``t``-only batches).
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np
import torch

from .data import PairedDataset
from .exceptions import ConfigError, DataError, NumericalError
from .model import MemeModel, save_checkpoint
from .objective import BOTH, S_ONLY, T_ONLY, ObjectiveConfig, batch_objective

logger = logging.getLogger(__name__)

_FROZEN = {S_ONLY: "dec_t", T_ONLY: "dec_s"}


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    checkpoint_interval: int = 0  # epochs; 0 keeps only the final checkpoint
    grad_clip: Optional[float] = 10.0

    def __post_init__(self):
        if isinstance(self.objective, dict):
            self.objective = ObjectiveConfig(**self.objective)
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or None")

    def to_dict(self):
        return asdict(self)


def homogeneous_batches(mask, batch_size, generator):
    """Shuffle each mask pool, chunk it, then shuffle the chunk order."""
    chunks = []
    for code in (BOTH, S_ONLY, T_ONLY):
        pool = np.flatnonzero(mask == code)
        if len(pool) == 0:
            continue
        perm = pool[torch.randperm(len(pool), generator=generator).numpy()]
        chunks.extend(perm[i:i + batch_size] for i in range(0, len(perm), batch_size))
    order = torch.randperm(len(chunks), generator=generator).tolist()
    return [chunks[i] for i in order]


def train(model: MemeModel, dataset, cfg: TrainConfig, *, run_dir=None,
          eval_hook: Optional[Callable[[int, MemeModel], dict]] = None,
          on_step: Optional[Callable[[dict], None]] = None):
    """Ascend the overall objective with Adam.

    Parameters
    ----------
    dataset : PairedDataset or list of PairedSample
    run_dir : str, optional
        When given, step records go to ``metrics.jsonl`` and checkpoints to
        ``checkpoints/``.
    eval_hook : callable, optional
        Called as ``eval_hook(epoch, model)`` after every epoch; the returned
        dict is appended to the history as an ``"eval"`` record.

    Returns
    -------
    model, history
        ``history`` is a list of plain dict records.

    Raises
    ------
    NumericalError
        On a non-finite objective; the last good parameters are checkpointed
        as ``checkpoints/last_good.npz`` when ``run_dir`` is set.
    """
    if not isinstance(dataset, PairedDataset):
        dataset = PairedDataset.from_samples(list(dataset))
    if len(dataset) == 0:
        raise DataError("empty dataset")
    if bool(np.any((dataset.mask < BOTH) | (dataset.mask > T_ONLY))):
        raise DataError("dataset contains rows with invalid masks")
    dtype = model.param_dtype
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history: List[dict] = []
    ckpt_dir = None
    sink = None
    if run_dir is not None:
        ckpt_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        sink = open(os.path.join(run_dir, "metrics.jsonl"), "w")
        save_checkpoint(model, os.path.join(ckpt_dir, "epoch_0000.npz"), {"epoch": 0})

    def emit(rec):
        history.append(rec)
        if sink is not None:
            sink.write(json.dumps(rec) + "\n")
        if on_step is not None:
            on_step(rec)

    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            for b, idx in enumerate(homogeneous_batches(dataset.mask, cfg.batch_size, gen)):
                batch = dataset.batch(idx, dtype)
                opt.zero_grad(set_to_none=True)
                try:
                    terms = batch_objective(model, batch, cfg.objective, generator=gen)
                    if not math.isfinite(float(terms.total.detach())):
                        raise NumericalError("non-finite objective", term="total")
                except NumericalError as err:
                    err.batch_index = b
                    if ckpt_dir is not None:
                        save_checkpoint(model, os.path.join(ckpt_dir, "last_good.npz"),
                                        {"epoch": epoch, "step": step})
                    raise NumericalError(
                        f"epoch {epoch} batch {b}: {err}", term=err.term, batch_index=b
                    ) from err
                (-terms.total).backward()
                frozen = _FROZEN.get(int(batch.mask[0])) if batch.kind() != "mixed" else None
                if frozen is not None:
                    for p in getattr(model, frozen).parameters():
                        p.grad = None
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(
                        [p for p in model.parameters() if p.grad is not None], cfg.grad_clip)
                opt.step()
                step += 1
                emit(terms.record(kind="step", step=step, epoch=epoch, batch=batch.kind(), size=len(batch)))
            model.eval()
            if eval_hook is not None:
                rec = {"kind": "eval", "epoch": epoch, "step": step}
                rec.update(eval_hook(epoch, model) or {})
                emit(rec)
            if ckpt_dir is not None and cfg.checkpoint_interval and epoch % cfg.checkpoint_interval == 0:
                save_checkpoint(model, os.path.join(ckpt_dir, f"epoch_{epoch:04d}.npz"), {"epoch": epoch})
        if ckpt_dir is not None and cfg.epochs > 0:
            save_checkpoint(model, os.path.join(ckpt_dir, "final.npz"), {"epoch": cfg.epochs, "step": step})
    finally:
        if sink is not None:
            sink.close()
    logger.info("trained %d steps over %d epochs", step, cfg.epochs)
    return model, history


def init_pseudo_banks(model: MemeModel, dataset: PairedDataset, seed=0):
    """Initialise each bank from observed payloads of its modality."""
    s_rows = dataset.s[dataset.mask != T_ONLY]
    t_rows = dataset.t[dataset.mask != S_ONLY]
    if len(s_rows):
        model.init_pseudo_inputs("s", s_rows, seed)
    if len(t_rows):
        model.init_pseudo_inputs("t", t_rows, seed + 1)
    return model

"""Batch commands: ``prepare``, ``train``, ``eval`` and ``classifier``.

``train`` reads a flat JSON config; any config key can be overridden on the
command line as ``--key value`` (values are parsed as JSON when possible).
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

import argparse
import copy
import json
import logging
import math
import os
import sys

import numpy as np
import torch

from . import evaluation as ev
from .data import (
    ObservationScheme, PairedDataset, apply_observation_scheme, load_mnist, load_svhn,
    pair_by_class, read_dataset, synth_two_view, write_dataset,
)
from .exceptions import ConfigError, DataError, MemeError, ShapeError
from .model import HeadConfig, MemeModel, ModalitySpec, load_checkpoint
from .objective import BOTH, S_ONLY, T_ONLY, ObjectiveConfig
from .training import TrainConfig, init_pseudo_banks, train

logger = logging.getLogger("meme")

METRICS = ("coherence_st", "coherence_ts", "probe_s", "probe_t", "relatedness", "marginal_st", "marginal_ts")

SYNTH_KEYS = dict(
    synth_n_train=4000, synth_n_test=3000, synth_seed=100, synth_latent_dim=2, synth_noise_scale=0.05,
    synth_n_classes=5, synth_s_dim=8, synth_t_dim=8, synth_class_sep=3.0, synth_private_dim=4,
    synth_private_scale=2.0,
)

TRAIN_DEFAULTS = dict(
    dataset="synthetic",
    out_dir="runs/default",
    fraction=None,
    mode=None,
    scheme_seed=0,
    latent_dim=2,
    hidden=[64, 64],
    arch="mlp",
    conv_channels=[32, 64],
    decoder_output="identity",
    likelihood_scale=0.1,
    n_pseudo=50,
    mc_samples=16,
    classifier_weight=10.0,
    epochs=10,
    batch_size=64,
    learning_rate=1e-3,
    seed=0,
    checkpoint_interval=0,
    grad_clip=10.0,
    dtype="float32",
    eval_metrics=["relatedness", "probe_s", "probe_t"],
    eval_seed=0,
    eval_rows=1000,
    n_importance=64,
    classifier_s=None,
    classifier_t=None,
    auto_classifiers=False,
    **SYNTH_KEYS,
)


# -- config handling ------------------------------------------------------


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(tokens):
    """Turn ``["--epochs", "3", "--hidden", "[8,8]"]`` into a dict."""
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"expected a --key, got {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            raw = next(it, None)
            if raw is None:
                raise ConfigError(f"--{key} needs a value")
        out[key] = _parse_value(raw)
    return out


def resolve_config(path=None, overrides=None):
    """Defaults, then the file, then overrides; unknown keys are rejected."""
    cfg = copy.deepcopy(TRAIN_DEFAULTS)
    layers = []
    if path is not None:
        try:
            with open(path) as fh:
                layers.append(json.load(fh))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(layers[-1], dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    layers.append(overrides or {})
    for layer in layers:
        unknown = sorted(set(layer) - set(TRAIN_DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(layer)
    bad = sorted(set(cfg["eval_metrics"]) - set(METRICS))
    if bad:
        raise ConfigError(f"unknown metrics {bad}; choose from {list(METRICS)}")
    if cfg["dataset"] != "synthetic" and (cfg["fraction"] is not None or cfg["mode"] is not None):
        raise ConfigError("fraction/mode apply to the synthetic dataset only; "
                          "bake the scheme into the manifest with `meme prepare`")
    # construct once so that value errors surface before any computation
    _train_config(cfg)
    _head_config(cfg)
    if cfg["fraction"] is not None or cfg["mode"] is not None:
        _scheme(cfg)
    return cfg


def _scheme(cfg):
    try:
        return ObservationScheme(1.0 if cfg["fraction"] is None else cfg["fraction"],
                                 cfg["mode"] or "keep_s", cfg["scheme_seed"])
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _train_config(cfg):
    try:
        obj = ObjectiveConfig(cfg["mc_samples"], cfg["classifier_weight"], cfg["n_pseudo"])
        return TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["learning_rate"], cfg["seed"], obj,
                           cfg["checkpoint_interval"], cfg["grad_clip"])
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def _head_config(cfg):
    try:
        return HeadConfig(cfg["arch"], tuple(cfg["hidden"]), tuple(cfg["conv_channels"]), cfg["decoder_output"])
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


# -- datasets -------------------------------------------------------------


def synthetic_split(cfg):
    """Train/test rows of the synthetic generator described by ``cfg``."""
    n_train, n_test = cfg["synth_n_train"], cfg["synth_n_test"]
    rows = synth_two_view(
        n_train + n_test, latent_dim=cfg["synth_latent_dim"], noise_scale=cfg["synth_noise_scale"],
        seed=cfg["synth_seed"], n_classes=cfg["synth_n_classes"], s_dim=cfg["synth_s_dim"],
        t_dim=cfg["synth_t_dim"], class_sep=cfg["synth_class_sep"], private_dim=cfg["synth_private_dim"],
        private_scale=cfg["synth_private_scale"],
    )
    return rows[:n_train], rows[n_train:]


def _load_training_data(cfg):
    if cfg["dataset"] == "synthetic":
        train_rows, test_rows = synthetic_split(cfg)
        full = PairedDataset.from_samples(train_rows)
        if cfg["fraction"] is not None or cfg["mode"] is not None:
            train_rows = apply_observation_scheme(train_rows, _scheme(cfg))
        return PairedDataset.from_samples(train_rows), PairedDataset.from_samples(test_rows), full
    train_ds, test_ds, _ = read_dataset(cfg["dataset"])
    return train_ds, test_ds, None


def _spec_from_data(name, payloads, scale):
    return ModalitySpec(name, tuple(payloads.shape[1:]), likelihood_scale=scale)


def check_compatible(model, ds):
    for m, arr in (("s", ds.s), ("t", ds.t)):
        want = tuple(model.spec(m).payload_shape)
        if tuple(arr.shape[1:]) != want:
            raise ShapeError(f"modality {m} ({model.spec(m).name}): checkpoint expects payload shape "
                             f"{want}, dataset has {tuple(arr.shape[1:])}")


# -- evaluation -----------------------------------------------------------


def _binomial_se(p, n):
    return math.sqrt(max(p * (1 - p), 0.0) / n) if n else None


def evaluate(model, ds, metrics, *, seed=0, classifiers=None, rows=1000, n_importance=64, fig_dir=None):
    """Compute ``metrics`` on ``ds``; returns a list of report records.

    Each metric draws its noise from a fresh generator seeded by ``seed``, so
    a record equals the matching library call made with that seed.
    """
    classifiers = classifiers or {}
    records = []
    for name in metrics:
        gen = torch.Generator().manual_seed(seed)
        if name.startswith("coherence_"):
            src, tgt = ("s", "t") if name == "coherence_st" else ("t", "s")
            clf = classifiers.get(tgt)
            if clf is None:
                raise ConfigError(f"{name} needs a classifier for modality {tgt}: "
                                  f"set classifier_{tgt} (train one with `meme classifier`)")
            value = ev.coherence_score(model, ds, clf, source=src, generator=gen)
            n = int(np.sum(ds.mask != (T_ONLY if src == "s" else S_ONLY)))
            records.append({"metric": name, "value": value, "stderr": _binomial_se(value, n)})
        elif name.startswith("probe_"):
            m = name[-1]
            value = ev.latent_probe_accuracy(model, m, ds, seed=seed)
            n = int(np.sum(ds.mask != (T_ONLY if m == "s" else S_ONLY)))
            records.append({"metric": name, "value": value, "stderr": _binomial_se(value, n - n // 2)})
        elif name == "relatedness":
            paired = np.flatnonzero(ds.mask == BOTH)[:rows]
            if len(paired) == 0:
                raise DataError("relatedness needs paired rows")
            labels = ds.labels[paired] if np.all(ds.labels[paired] >= 0) else None
            rep = ev.relatedness(model, ds.s[paired], ds.t[paired], labels)
            records.extend(rep.records())
            if fig_dir is not None:
                os.makedirs(fig_dir, exist_ok=True)
                ev.plot_relatedness_histogram(rep, os.path.join(fig_dir, "relatedness_hist.png"))
                if labels is not None:
                    ev.plot_class_matrix(rep, os.path.join(fig_dir, "class_matrix.png"))
                    if rep.merges is not None:
                        ev.plot_dendrogram(rep, os.path.join(fig_dir, "dendrogram.png"))
        elif name.startswith("marginal_"):
            direction = "s->t" if name == "marginal_st" else "t->s"
            paired = np.flatnonzero(ds.mask == BOTH)[:rows]
            if len(paired) == 0:
                raise DataError(f"{name} needs paired rows")
            ll = ev.marginal_loglik(model, ds.s[paired], ds.t[paired], direction, n_importance, gen)
            ll = ll.double().numpy()
            se = float(ll.std(ddof=1) / math.sqrt(len(ll))) if len(ll) > 1 else None
            records.append({"metric": name, "value": float(ll.mean()), "stderr": se})
        else:
            raise ConfigError(f"unknown metric {name!r}")
    return records


def _load_classifiers(paths):
    out = {}
    for m, path in paths.items():
        if path is None:
            continue
        if not os.path.exists(path):
            raise DataError(f"classifier artifact for modality {m} not found: {path}")
        out[m] = ev.PayloadClassifier.load(path)
    return out


# -- commands -------------------------------------------------------------


def cmd_prepare(args):
    scheme = ObservationScheme(args.fraction, args.mode, args.seed)
    if args.dataset == "synthetic":
        cfg = dict(SYNTH_KEYS, synth_seed=args.seed)
        for k in SYNTH_KEYS:
            v = getattr(args, k)
            if v is not None:
                cfg[k] = v
        train_rows, test_rows = synthetic_split(cfg)
        source = {k: cfg[k] for k in SYNTH_KEYS}
    else:
        for flag in ("mnist_dir", "svhn_dir"):
            if getattr(args, flag) is None:
                raise DataError(f"--{flag.replace('_', '-')} is required for mnist_svhn "
                                "(directory holding the raw corpus files)")
        mnist_tr = load_mnist(args.mnist_dir, "train", args.limit, args.seed)
        svhn_tr = load_svhn(args.svhn_dir, "train", None, args.seed)
        train_rows = pair_by_class(mnist_tr, svhn_tr, args.multiplicity, args.seed)
        mnist_te = load_mnist(args.mnist_dir, "test", args.test_limit, args.seed)
        svhn_te = load_svhn(args.svhn_dir, "test", None, args.seed)
        test_rows = pair_by_class(mnist_te, svhn_te, 1, args.seed + 1)
        source = {"mnist_dir": os.path.abspath(args.mnist_dir), "svhn_dir": os.path.abspath(args.svhn_dir),
                  "limit": args.limit, "test_limit": args.test_limit, "s": "mnist", "t": "svhn"}
    train_rows = apply_observation_scheme(train_rows, scheme)
    train_ds = PairedDataset.from_samples(train_rows)
    test_ds = PairedDataset.from_samples(test_rows)
    prefix = os.path.splitext(args.out)[0]
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    test_file = prefix + "_test.npz"
    np.savez(test_file, s=test_ds.s, t=test_ds.t, mask=test_ds.mask, labels=test_ds.labels)
    manifest = write_dataset(prefix, train_ds, {
        "dataset": args.dataset, "multiplicity": args.multiplicity, "seed": args.seed,
        "scheme": {"fraction": scheme.fraction, "mode": scheme.mode.value, "seed": scheme.seed},
        "demoted": int(np.sum(train_ds.mask != BOTH)), "source": source,
        "test_tensors": os.path.basename(test_file), "test_n": len(test_ds),
    })
    print(json.dumps({"manifest": prefix + ".json", "counts": manifest["counts"],
                      "demoted": manifest["demoted"], "mask_checksum": manifest["mask_checksum"]}))
    return 0


def cmd_train(args, extra):
    cfg = resolve_config(args.config, parse_overrides(extra))
    train_ds, test_ds, full = _load_training_data(cfg)
    run_dir = cfg["out_dir"]
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    model = MemeModel(
        _spec_from_data("s", train_ds.s, cfg["likelihood_scale"]),
        _spec_from_data("t", train_ds.t, cfg["likelihood_scale"]),
        cfg["latent_dim"], _head_config(cfg), cfg["n_pseudo"], seed=cfg["seed"], dtype=cfg["dtype"],
    )
    init_pseudo_banks(model, train_ds, seed=cfg["seed"])
    paths = {"s": cfg["classifier_s"], "t": cfg["classifier_t"]}
    if cfg["auto_classifiers"]:
        ref = full if full is not None else train_ds
        for m in ("s", "t"):
            if paths[m] is None:
                keep = ref.mask != (T_ONLY if m == "s" else S_ONLY)
                clf = ev.PayloadClassifier(seed=cfg["seed"], epochs=20)
                clf.fit((ref.s if m == "s" else ref.t)[keep], ref.labels[keep])
                paths[m] = os.path.join(run_dir, f"classifier_{m}.npz")
                clf.save(paths[m])
    classifiers = _load_classifiers(paths)
    model, history = train(model, train_ds, _train_config(cfg), run_dir=run_dir)
    eval_ds = test_ds if test_ds is not None else train_ds
    records = evaluate(model, eval_ds, cfg["eval_metrics"], seed=cfg["eval_seed"], classifiers=classifiers,
                       rows=cfg["eval_rows"], n_importance=cfg["n_importance"],
                       fig_dir=os.path.join(run_dir, "figures"))
    steps = [r for r in history if r["kind"] == "step"]
    if steps:
        records.append({"metric": "final_objective", "value": steps[-1]["total"], "step": steps[-1]["step"]})
    # the output location does not change results, so it stays out of the digest
    ev.write_report(records, os.path.join(run_dir, "report.jsonl"), {k: v for k, v in cfg.items() if k != "out_dir"})
    print(json.dumps({"run_dir": run_dir, "steps": len(steps)}))
    return 0


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    train_ds, test_ds, manifest = read_dataset(args.manifest)
    ds = test_ds if (test_ds is not None and not args.train_split) else train_ds
    check_compatible(model, ds)
    metrics = [m for m in (args.metrics or "").split(",") if m]
    bad = sorted(set(metrics) - set(METRICS))
    if bad:
        raise ConfigError(f"unknown metrics {bad}; choose from {list(METRICS)}")
    classifiers = _load_classifiers({"s": args.classifier_s, "t": args.classifier_t})
    os.makedirs(args.out_dir, exist_ok=True)
    records = evaluate(model, ds, metrics, seed=args.seed, classifiers=classifiers, rows=args.rows,
                       n_importance=args.n_importance, fig_dir=os.path.join(args.out_dir, "figures"))
    config = {"checkpoint": os.path.abspath(args.checkpoint), "manifest": os.path.abspath(args.manifest),
              "metrics": metrics, "seed": args.seed, "rows": args.rows, "n_importance": args.n_importance,
              "train_split": args.train_split}
    path = ev.write_report(records, os.path.join(args.out_dir, "report.jsonl"), config)
    print(json.dumps({"report": path, "records": len(records)}))
    return 0


def cmd_classifier(args):
    train_ds, test_ds, _ = read_dataset(args.manifest)
    m = args.modality
    code_missing = T_ONLY if m == "s" else S_ONLY

    def rows(ds):
        keep = ds.mask != code_missing
        return (ds.s if m == "s" else ds.t)[keep], ds.labels[keep]

    x, y = rows(train_ds)
    if np.any(y < 0):
        raise DataError("classifier training needs labeled rows")
    clf = ev.PayloadClassifier(arch=args.arch, epochs=args.epochs, seed=args.seed).fit(x, y)
    acc = None
    if test_ds is not None:
        xt, yt = rows(test_ds)
        acc = float(clf.score(xt, yt))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    clf.save(args.out)
    if acc is not None and acc < args.min_accuracy:
        logger.warning("classifier accuracy %.4f is below %.2f", acc, args.min_accuracy)
    print(json.dumps({"classifier": args.out, "modality": m, "test_accuracy": acc}))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="meme", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("prepare", help="build a dataset manifest")
    pr.add_argument("--dataset", choices=["synthetic", "mnist_svhn"], default="synthetic")
    pr.add_argument("--multiplicity", type=int, default=1)
    pr.add_argument("--mode", choices=["keep_s", "keep_t", "split"], default="keep_s")
    pr.add_argument("--fraction", type=float, default=1.0)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True, help="manifest path (.json)")
    pr.add_argument("--mnist-dir")
    pr.add_argument("--svhn-dir")
    pr.add_argument("--limit", type=int, default=5000, help="MNIST training images to pair")
    pr.add_argument("--test-limit", type=int, default=2000)
    for k, v in SYNTH_KEYS.items():
        pr.add_argument("--" + k.replace("_", "-"), dest=k, type=type(v), default=None)

    tr = sub.add_parser("train", help="train from a flat JSON config; extra --key value pairs override it")
    tr.add_argument("--config")

    ev_ = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    ev_.add_argument("--checkpoint", required=True)
    ev_.add_argument("--manifest", required=True)
    ev_.add_argument("--metrics", default="", help=f"comma-separated subset of {','.join(METRICS)}")
    ev_.add_argument("--out-dir", required=True)
    ev_.add_argument("--classifier-s")
    ev_.add_argument("--classifier-t")
    ev_.add_argument("--seed", type=int, default=0)
    ev_.add_argument("--rows", type=int, default=1000)
    ev_.add_argument("--n-importance", type=int, default=64)
    ev_.add_argument("--train-split", action="store_true", help="evaluate on the training rows")

    cl = sub.add_parser("classifier", help="train a payload classifier used for coherence")
    cl.add_argument("--manifest", required=True)
    cl.add_argument("--modality", choices=["s", "t"], required=True)
    cl.add_argument("--arch", choices=["mlp", "conv"], default="mlp")
    cl.add_argument("--epochs", type=int, default=5)
    cl.add_argument("--seed", type=int, default=0)
    cl.add_argument("--min-accuracy", type=float, default=0.98)
    cl.add_argument("--out", required=True)
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if extra and args.command != "train":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        if args.command == "prepare":
            return cmd_prepare(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_classifier(args)
    except MemeError as err:
        print(f"meme {args.command}: error: {err}", file=sys.stderr)
        return err.exit_code
    except FileNotFoundError as err:
        print(f"meme {args.command}: error: {err}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

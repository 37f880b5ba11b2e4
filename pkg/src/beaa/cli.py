"""Command-line entry points.

Every command resolves its options as defaults < ``--config`` JSON file <
explicit flags, and writes the resolved options next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import benchmark as bench
from .data import Dataset, DatasetError, load_cifar10, load_image_dir, synthetic_dataset
from .he import make_backend, preset
from .he.params import HeParams, ParamError
from .he.serialize import load_ciphertexts, load_keys, save_ciphertexts, save_keys, \
    save_params
from .inference import compile_plan, decrypt_logits, execute
from .model import (
    build_sequential,
    build_squeezenet_opt,
    fold_batchnorm,
    load_model,
    load_topology_config,
    save_model,
)
from .packing import CHANNELWISE, ELEMENTWISE, PackedTensor, encrypt_packed, pack_elementwise, \
    slot_utilization
from .activation import GRANULARITIES, count_params
from .training import TrainConfig, predict, train_student, train_teacher

MANIFEST_FORMAT = "beaa-encrypted-batch"
MANIFEST_VERSION = 1


class CliError(Exception):
    pass


DATA_OPTIONS = {
    "dataset": "synthetic",
    "image_size": 112,
    "train_count": None,
    "val_count": 0,
    "test_count": None,
    "synthetic_classes": 4,
    "synthetic_shape": [3, 8, 8],
    "synthetic_noise": 1.5,
    "synthetic_train": 512,
    "seed": 0,
}

MODEL_OPTIONS = {"topology": "squeezenet", "num_classes": None}

COMMAND_DEFAULTS = {
    "train-teacher": {**DATA_OPTIONS, **MODEL_OPTIONS, **TrainConfig().to_dict(),
                      "out": "teacher.beaa", "metrics": None},
    "train-student": {**DATA_OPTIONS, **MODEL_OPTIONS, **TrainConfig().to_dict(),
                      "activation": "element", "teacher": None, "coeff_noise": 0.0,
                      "out": "student.beaa", "metrics": None},
    "keygen": {"preset": "desk", "backend": "ckks", "rotation_steps": [], "seed": 0,
               "out_dir": "keys"},
    "encrypt": {**DATA_OPTIONS, "keys": "keys", "model": None, "input": None, "count": 64,
                "offset": 0, "out_dir": "encrypted"},
    "infer": {"keys": "keys", "model": None, "input": "encrypted", "out": "logits.ct"},
    "decrypt": {"keys": "keys", "input": "logits.ct", "labels": None, "out": "predictions.csv"},
    "eval-plain": {**DATA_OPTIONS, "model": None, "input": None, "count": None, "offset": 0,
                   "compare": None, "out": "plain_predictions.csv"},
    "benchmark": {"model": None, "topology": None, "activation": "element", "num_classes": 2,
                  "input_shape": [1, 4, 4], "preset": "desk", "backend": "ckks",
                  "batch_sizes": [64, 256, 1024], "repeats": 3, "channelwise": True, "seed": 0,
                  "out": "benchmark.csv"},
    "report": {"preset": "full", "image_shape": [3, 32, 32], "benchmark": None,
               "accuracy": None, "out": "report.json"},
}

# options whose flags accept several values
LIST_OPTIONS = {"synthetic_shape", "rotation_steps", "batch_sizes", "input_shape", "image_shape"}


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    return value


def resolve_config(command: str, config_path=None, overrides: dict | None = None) -> dict:
    cfg = dict(COMMAND_DEFAULTS[command])
    if config_path:
        with open(config_path) as fh:
            file_cfg = json.load(fh)
        section = file_cfg.get(command, file_cfg)
        unknown = set(section) - set(cfg)
        if unknown:
            raise CliError(f"unknown options for {command}: {sorted(unknown)}")
        cfg.update(section)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    return cfg


def write_resolved(cfg: dict, command: str, anchor: str) -> str:
    """Store the resolved options as ``<anchor>.config.json`` (or inside a directory)."""
    path = os.path.join(anchor, "config.json") if os.path.isdir(anchor) else anchor + ".config.json"
    with open(path, "w") as fh:
        json.dump({"command": command, "options": cfg}, fh, indent=2, sort_keys=True)
    return path


# -- helpers --------------------------------------------------------------
def load_dataset(cfg) -> Dataset:
    spec = cfg["dataset"]
    seed = int(cfg["seed"])
    if spec == "synthetic":
        ds = synthetic_dataset(int(cfg["synthetic_train"]), 64, 256,
                               int(cfg["synthetic_classes"]), tuple(cfg["synthetic_shape"]),
                               float(cfg["synthetic_noise"]), seed)
    elif spec.startswith("cifar10:"):
        ds = load_cifar10(spec.split(":", 1)[1], val_count=int(cfg["val_count"]), seed=seed)
    elif spec.startswith("images:"):
        size = int(cfg["image_size"])
        ds = load_image_dir(spec.split(":", 1)[1], (size, size), seed=seed)
    else:
        raise CliError(f"dataset must be 'synthetic', 'cifar10:<dir>' or 'images:<dir>', got {spec!r}")
    return ds.subset(cfg.get("train_count"), None, cfg.get("test_count"), seed=seed)


def build_network(cfg, dataset: Dataset, activation: str):
    topo = cfg["topology"]
    num_classes = int(cfg["num_classes"] or dataset.num_classes)
    shape = dataset.image_shape
    if topo in (None, "squeezenet"):
        return build_squeezenet_opt(num_classes, shape, activation, seed=int(cfg["seed"]),
                                    coeff_noise=float(cfg.get("coeff_noise") or 0.0))
    spec = load_topology_config(topo)
    if "blocks" in spec:
        return build_sequential(shape, num_classes, _blocks(spec, num_classes),
                                activation, seed=int(cfg["seed"]),
                                coeff_noise=float(cfg.get("coeff_noise") or 0.0))
    return build_squeezenet_opt(num_classes, shape, activation, spec, seed=int(cfg["seed"]),
                                coeff_noise=float(cfg.get("coeff_noise") or 0.0))


def _blocks(spec, num_classes):
    return [tuple(num_classes if v == "num_classes" else v for v in b) for b in spec["blocks"]]


def _train_config(cfg) -> TrainConfig:
    names = TrainConfig().to_dict().keys()
    return TrainConfig.from_dict({k: cfg[k] for k in names})


def _select_images(cfg):
    """Images (and labels, when known) named by ``input`` or the dataset test split."""
    if cfg.get("input"):
        x = np.load(cfg["input"])
        labels = None
    else:
        ds = load_dataset(cfg)
        x, labels = ds.x_test, ds.y_test
    off = int(cfg.get("offset") or 0)
    count = cfg.get("count")
    end = None if count is None else off + int(count)
    x = x[off:end]
    labels = None if labels is None else labels[off:end]
    if len(x) == 0:
        raise CliError("no images selected")
    return np.asarray(x, dtype=np.float64), labels


def _key_paths(key_dir):
    return (os.path.join(key_dir, "params.beaa"), os.path.join(key_dir, "public.keys"),
            os.path.join(key_dir, "secret.keys"))


def _load_keys(key_dir, secret=False):
    _, pub, sec = _key_paths(key_dir)
    if not os.path.exists(pub):
        raise CliError(f"no public keys in {key_dir!r}; run keygen first")
    if secret and not os.path.exists(sec):
        raise CliError(f"no secret key in {key_dir!r}")
    return load_keys(pub, sec if secret else None)


def _folded_model(path):
    if not path:
        raise CliError("a --model is required")
    return fold_batchnorm(load_model(path))


def _write_predictions(path, logits, labels=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "pred"] + (["label"] if labels is not None else [])
                   + [f"logit{j}" for j in range(logits.shape[1])])
        for i, row in enumerate(logits):
            extra = [int(labels[i])] if labels is not None else []
            w.writerow([i, int(np.argmax(row))] + extra + [repr(float(v)) for v in row])


def read_predictions(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([int(r["pred"]) for r in csv.DictReader(fh)])


# -- commands -------------------------------------------------------------
def cmd_train(cfg, command, out=print):
    ds = load_dataset(cfg)
    tcfg = _train_config(cfg)
    metrics = cfg["metrics"] or cfg["out"] + ".metrics.csv"
    if command == "train-teacher":
        net = build_network(cfg, ds, "relu")
        net, rows = train_teacher(net, ds, tcfg, metrics, log=None)
    else:
        if cfg["activation"] not in GRANULARITIES:
            raise CliError(f"activation must be one of {GRANULARITIES}")
        net = build_network(cfg, ds, cfg["activation"])
        teacher = load_model(cfg["teacher"]) if cfg["teacher"] else None
        net, rows = train_student(net, ds, tcfg, teacher, metrics, log=None)
    test_acc = float(np.mean(np.argmax(predict(net, ds.x_test), 1) == ds.y_test)) \
        if len(ds.x_test) else float("nan")
    save_model(cfg["out"], net, {"dataset": cfg["dataset"], "mean": ds.mean.tolist(),
                                 "std": ds.std.tolist(), "test_acc": test_acc,
                                 "seed": int(cfg["seed"])})
    write_resolved(cfg, command, cfg["out"])
    out(f"saved {cfg['out']} (test accuracy {test_acc:.4f}); metrics in {metrics}")


def cmd_keygen(cfg, out=print):
    try:
        params = preset(cfg["preset"])
    except ParamError as exc:
        raise CliError(str(exc)) from None
    be = make_backend(cfg["backend"], params)
    keys = be.keygen(cfg["rotation_steps"] or (), seed=int(cfg["seed"]))
    os.makedirs(cfg["out_dir"], exist_ok=True)
    p_path, pub, sec = _key_paths(cfg["out_dir"])
    save_params(p_path, params)
    save_keys(pub, keys, params, "public")
    save_keys(sec, keys, params, "secret")
    write_resolved(cfg, "keygen", cfg["out_dir"])
    out(f"wrote {p_path}, {pub}, {sec}")


def cmd_encrypt(cfg, out=print):
    keys, params = _load_keys(cfg["keys"])
    be = make_backend(keys.backend, params)
    x, labels = _select_images(cfg)
    level = None
    scale = None
    if cfg["model"]:
        plan = compile_plan(_folded_model(cfg["model"]), params)
        level, scale = plan.input_level, plan.input_scale
    packed = pack_elementwise(x, be, level=level, scale=scale)
    enc = encrypt_packed(packed, be, keys, seed=int(cfg.get("seed") or 0))
    d = cfg["out_dir"]
    os.makedirs(d, exist_ok=True)
    shards = []
    for c in range(enc.grid.shape[0]):
        name = f"channel_{c:04d}.ct"
        save_ciphertexts(os.path.join(d, name), enc.grid[c].ravel(), params,
                         {"channel": c, "cell_shape": list(enc.grid.shape[1:])})
        shards.append({"channel": c, "file": name})
    manifest = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "layout": ELEMENTWISE,
                "batch_size": int(len(x)), "grid_shape": list(enc.grid.shape),
                "backend": keys.backend, "params_fingerprint": keys.params_fingerprint,
                "shards": shards}
    with open(os.path.join(d, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    if labels is not None:
        np.save(os.path.join(d, "labels.npy"), labels)
    write_resolved(cfg, "encrypt", d)
    out(f"encrypted {len(x)} images into {len(shards)} shards under {d}")


def load_encrypted_dir(d):
    path = os.path.join(d, "manifest.json")
    if not os.path.exists(path):
        raise CliError(f"no manifest.json in {d!r}")
    with open(path) as fh:
        man = json.load(fh)
    if man.get("format") != MANIFEST_FORMAT or man.get("version") != MANIFEST_VERSION:
        raise CliError(f"{path} is not a version-{MANIFEST_VERSION} {MANIFEST_FORMAT} manifest")
    shape = tuple(man["grid_shape"])
    grid = np.empty(shape, dtype=object)
    params = None
    for sh in man["shards"]:
        cts, params, _ = load_ciphertexts(os.path.join(d, sh["file"]))
        block = np.empty(len(cts), dtype=object)
        block[:] = cts
        grid[sh["channel"]] = block.reshape(shape[1:])
    return PackedTensor(grid, int(man["batch_size"]), man["layout"]), params, man


def cmd_infer(cfg, out=print):
    keys, params = _load_keys(cfg["keys"])
    packed, ct_params, man = load_encrypted_dir(cfg["input"])
    if man["params_fingerprint"] != keys.params_fingerprint:
        raise CliError("ciphertexts and keys were made with different parameters")
    be = make_backend(keys.backend, params)
    plan = compile_plan(_folded_model(cfg["model"]), params)
    result = execute(plan, packed, be, keys)
    save_ciphertexts(cfg["out"], result.grid.ravel(), params,
                     {"layout": ELEMENTWISE, "grid_shape": list(result.grid.shape),
                      "batch_size": result.batch_size})
    write_resolved(cfg, "infer", cfg["out"])
    out(f"wrote {result.grid.size} logit ciphertexts to {cfg['out']} (plan depth {plan.depth})")


def cmd_decrypt(cfg, out=print):
    keys, params = _load_keys(cfg["keys"], secret=True)
    cts, ct_params, meta = load_ciphertexts(cfg["input"])
    be = make_backend(keys.backend, params)
    grid = np.empty(len(cts), dtype=object)
    grid[:] = cts
    result = PackedTensor(grid.reshape(meta["grid_shape"]), int(meta["batch_size"]))
    logits = decrypt_logits(result, be, keys)
    labels = np.load(cfg["labels"]) if cfg["labels"] else None
    _write_predictions(cfg["out"], logits, labels)
    write_resolved(cfg, "decrypt", cfg["out"])
    msg = f"wrote {len(logits)} predictions to {cfg['out']}"
    if labels is not None:
        msg += f" (accuracy {np.mean(np.argmax(logits, 1) == labels):.4f})"
    out(msg)


def cmd_eval_plain(cfg, out=print):
    net = _folded_model(cfg["model"])
    x, labels = _select_images(cfg)
    logits = predict(net, x)
    _write_predictions(cfg["out"], logits, labels)
    write_resolved(cfg, "eval-plain", cfg["out"])
    preds = np.argmax(logits, 1)
    msg = f"wrote {len(preds)} plaintext predictions to {cfg['out']}"
    if labels is not None:
        msg += f" (accuracy {np.mean(preds == labels):.4f})"
    if cfg["compare"]:
        other = read_predictions(cfg["compare"])
        if len(other) != len(preds):
            raise CliError("comparison file has a different number of predictions")
        msg += f"; argmax agreement with {cfg['compare']}: {np.mean(other == preds):.4f}"
    out(msg)


def cmd_benchmark(cfg, out=print):
    params = preset(cfg["preset"])
    if cfg["model"]:
        net = _folded_model(cfg["model"])
    else:
        shape = tuple(cfg["input_shape"])
        if cfg["topology"]:
            spec = load_topology_config(cfg["topology"])
            blocks = _blocks(spec, int(cfg["num_classes"]))
        else:
            blocks = [("conv", 2, 3, 1), ("act",), ("gap",)]
        net = fold_batchnorm(build_sequential(shape, int(cfg["num_classes"]), blocks,
                                              cfg["activation"], seed=int(cfg["seed"]),
                                              coeff_noise=0.1))
    be = make_backend(cfg["backend"], params)
    keys = be.keygen([1], seed=int(cfg["seed"]))
    rows = bench.run_benchmark(net, be, keys, cfg["batch_sizes"], int(cfg["repeats"]),
                               int(cfg["seed"]), bool(cfg["channelwise"]))
    bench.write_benchmark_csv(cfg["out"], rows)
    write_resolved(cfg, "benchmark", cfg["out"])
    s = bench.scaling_summary(rows)
    out(f"wrote {cfg['out']}: total-time variation {s['total_variation']:.1%}, "
        f"amortized ratio M={s['batch_sizes'][-1]} vs M={s['batch_sizes'][0]}: "
        f"{s['amortized_ratio']:.4f}")


def build_report(cfg) -> dict:
    params: HeParams = preset(cfg["preset"])
    n, h, w = cfg["image_shape"]
    rep = {
        "preset": cfg["preset"], "ring_degree": params.ring_degree,
        "slot_count": params.slot_count, "modulus_bits": params.total_bits,
        "slot_utilization": {
            CHANNELWISE: slot_utilization(h * w, params),
            ELEMENTWISE + " (M = N/2)": slot_utilization(params.slot_count, params),
        },
        "activation_counts": {
            f"n={c}": {g: dict(zip(("coefficients", "activations"), count_params(g, c, h, w)))
                       for g in GRANULARITIES}
            for c in sorted({n, 64})},
    }
    if cfg["benchmark"]:
        rows = bench.read_benchmark_csv(cfg["benchmark"])
        rep["benchmark"] = {"rows": rows, "summary": bench.scaling_summary(rows)}
    if cfg["accuracy"]:
        with open(cfg["accuracy"]) as fh:
            rep["accuracy"] = json.load(fh)
    return rep


def cmd_report(cfg, out=print):
    rep = build_report(cfg)
    with open(cfg["out"], "w") as fh:
        json.dump(rep, fh, indent=2)
    write_resolved(cfg, "report", cfg["out"])
    util = rep["slot_utilization"][CHANNELWISE]
    out(f"channel-wise slot utilization at N={rep['ring_degree']}: {util:.2%}; "
        f"report written to {cfg['out']}")


# -- argument parsing -----------------------------------------------------
def _add_options(sp, command):
    sp.add_argument("--config", help="JSON file of options (top level or keyed by command)")
    for key, default in COMMAND_DEFAULTS[command].items():
        flag = "--" + key.replace("_", "-")
        if key in LIST_OPTIONS:
            sp.add_argument(flag, dest=key, nargs="*", type=_coerce, default=None)
        elif isinstance(default, bool):
            sp.add_argument(flag, dest=key, type=lambda v: v.lower() in ("1", "true", "yes"),
                            default=None, metavar="BOOL")
        else:
            sp.add_argument(flag, dest=key, type=_coerce, default=None)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beaa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "train-teacher": "train the ReLU teacher network",
        "train-student": "train a polynomial-activation student (optionally distilled)",
        "keygen": "generate HE parameters and key files",
        "encrypt": "pack and encrypt images element-wise into per-channel shards",
        "infer": "run a trained model over encrypted shards",
        "decrypt": "decrypt logit ciphertexts into predictions",
        "eval-plain": "plaintext predictions of the same model and images",
        "benchmark": "encrypted-inference time over batch sizes",
        "report": "slot utilization, activation counts and collected results",
    }
    for name in COMMAND_DEFAULTS:
        _add_options(sub.add_parser(name, help=helps[name]), name)
    return p


COMMANDS = {
    "train-teacher": lambda c, o: cmd_train(c, "train-teacher", o),
    "train-student": lambda c, o: cmd_train(c, "train-student", o),
    "keygen": cmd_keygen,
    "encrypt": cmd_encrypt,
    "infer": cmd_infer,
    "decrypt": cmd_decrypt,
    "eval-plain": cmd_eval_plain,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = resolve_config(args.command, args.config, overrides)
        COMMANDS[args.command](cfg, print)
    except (CliError, DatasetError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

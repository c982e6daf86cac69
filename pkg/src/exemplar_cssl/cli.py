"""Command-line front end: one subcommand per training stage.

Every command reads a JSON config, fills in defaults, validates the result
against a schema and writes a run manifest next to its outputs. Exit codes:
0 success, 2 usage or config error, 3 missing or unreadable input,
4 numeric abort.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import cil as cil_mod
from . import data
from . import evaluation as ev
from .diffcore import NonFiniteError
from .encoder import embed
from .pipelines import (
    CheckpointError,
    CheckpointNotFoundError,
    NonFiniteLossError,
    TrainConfig,
    config_hash,
    fewshot_base,
    finetune_supervised,
    load_checkpoint,
    ncl_pipeline,
    new_encoder,
    predict_labeled,
    pretrain_cssl,
    save_checkpoint,
    train_config_from_dict,
    train_config_to_dict,
    write_history_csv,
)

log = logging.getLogger("exemplar_cssl")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# defaults and schemas


def _train_defaults() -> dict:
    d = train_config_to_dict(TrainConfig())
    del d["seed"], d["stage"]
    return d


def _cil_defaults() -> dict:
    d = asdict(cil_mod.CilConfig())
    d["augment"]["scale_range"] = list(d["augment"]["scale_range"])
    del d["seed"]
    return d


ENCODER_DEFAULTS = {"hidden_dims": [128], "embed_dim": 32}
SPLIT_DEFAULTS = {"test_fraction": 0.2, "seed": 0}


def defaults(command: str) -> dict:
    common = {"seed": 0}
    if command == "gen-data":
        spec = asdict(data.SyntheticSpec())
        del spec["seed"]
        return {**common, "source": "synthetic", "synthetic": spec, "idx": {"images": None, "labels": None}}
    base = {**common, "dataset": None}
    if command == "pretrain":
        return {**base, "encoder": ENCODER_DEFAULTS, "train": _train_defaults(), "split": SPLIT_DEFAULTS, "labeled_fraction": 0.0}
    if command == "finetune":
        return {**base, "checkpoint": None, "mode": "linear-probe", "labels_per_class": None, "train": _train_defaults(), "split": SPLIT_DEFAULTS}
    if command == "ncl":
        return {**base, "checkpoint": None, "encoder": ENCODER_DEFAULTS, "known_classes": None, "num_novel": None, "train": _train_defaults()}
    if command == "fewshot":
        return {
            **base, "checkpoint": None, "encoder": ENCODER_DEFAULTS, "labeled_fraction": 1.0, "supervised": True,
            "train": _train_defaults(), "split": SPLIT_DEFAULTS,
        }
    if command == "cil":
        protocol = {"base_classes": None, "sessions": None, "shots": 5, "test_per_class": 50, "base_train_per_class": None}
        return {
            **base, "checkpoint": None, "encoder": ENCODER_DEFAULTS, "protocol": protocol,
            "base_train": _train_defaults(), "cil": _cil_defaults(),
        }
    if command == "eval":
        return {
            **base, "checkpoint": None, "metrics": list(ev.METRICS), "split": SPLIT_DEFAULTS,
            "knn_k": 5, "probe_epochs": 200, "probe_lr": 1e-2,
        }
    raise KeyError(command)


def _obj(props: dict, required=None) -> dict:
    return {"type": "object", "properties": props, "required": list(required or props), "additionalProperties": False}


POS_INT = {"type": "integer", "minimum": 1}
NONNEG = {"type": "number", "minimum": 0}
POS = {"type": "number", "exclusiveMinimum": 0}
PATH = {"type": "string", "minLength": 1}
OPT_PATH = {"type": ["string", "null"], "minLength": 1}
INT_LIST = {"type": "array", "items": {"type": "integer"}, "minItems": 1}
FRACTION = {"type": "number", "minimum": 0, "maximum": 1}

AUGMENT = _obj({
    "jitter_std": NONNEG,
    "mask_prob": FRACTION,
    "scale_range": {"type": "array", "items": POS, "minItems": 2, "maxItems": 2},
})
TRAIN = _obj({
    "epochs": POS_INT,
    "batch_size": POS_INT,
    "lr": POS,
    "optimizer": {"enum": ["sgd", "sgd-momentum", "adam"]},
    "loss": _obj({
        "tau": POS,
        "lambda_self": NONNEG,
        "rho": {"type": "number", "minimum": -1, "maximum": 1},
        "k_pseudo": POS_INT,
        "use_label_aware": {"type": "boolean"},
    }),
    "augment": AUGMENT,
    "support_capacity": POS_INT,
})
ENCODER = _obj({"hidden_dims": {"type": "array", "items": POS_INT}, "embed_dim": POS_INT})
SPLIT = _obj({"test_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}, "seed": {"type": "integer"}})
SEED = {"type": "integer", "minimum": 0}


def schema(command: str) -> dict:
    if command == "gen-data":
        return _obj({
            "seed": SEED,
            "source": {"enum": ["synthetic", "idx"]},
            "synthetic": _obj({
                "num_classes": {"type": "integer", "minimum": 2},
                "dim": POS_INT,
                "per_class_count": POS_INT,
                "cluster_std": NONNEG,
                "centroid_scale": POS,
            }),
            "idx": _obj({"images": OPT_PATH, "labels": OPT_PATH}),
        })
    if command == "pretrain":
        return _obj({"seed": SEED, "dataset": PATH, "encoder": ENCODER, "train": TRAIN, "split": SPLIT, "labeled_fraction": FRACTION})
    if command == "finetune":
        return _obj({
            "seed": SEED, "dataset": PATH, "checkpoint": PATH, "mode": {"enum": ["linear-probe", "full"]},
            "labels_per_class": {"type": ["integer", "null"], "minimum": 1}, "train": TRAIN, "split": SPLIT,
        })
    if command == "ncl":
        return _obj({
            "seed": SEED, "dataset": PATH, "checkpoint": OPT_PATH, "encoder": ENCODER, "known_classes": INT_LIST,
            "num_novel": {"type": ["integer", "null"], "minimum": 1}, "train": TRAIN,
        })
    if command == "fewshot":
        return _obj({
            "seed": SEED, "dataset": PATH, "checkpoint": OPT_PATH, "encoder": ENCODER, "labeled_fraction": FRACTION,
            "supervised": {"type": "boolean"}, "train": TRAIN, "split": SPLIT,
        })
    if command == "cil":
        cil_props = {
            "distill": {"enum": ["none", "ng", "erg"]},
            "mu": NONNEG,
            "k_exemplars": POS_INT,
            "session_epochs": {"type": "integer", "minimum": 0},
            "session_lr": POS,
            "ce_tau": POS,
            "delta_pull": NONNEG,
            "delta_push": NONNEG,
            "ng_vertices_per_class": POS_INT,
            "ng_epochs": POS_INT,
            "ng_insert_per_class": POS_INT,
            "max_cross_triplets": {"type": "integer", "minimum": 0},
            "augment": AUGMENT,
        }
        protocol = _obj({
            "base_classes": INT_LIST,
            "sessions": {"type": "array", "items": INT_LIST, "minItems": 1},
            "shots": POS_INT,
            "test_per_class": POS_INT,
            "base_train_per_class": {"type": ["integer", "null"], "minimum": 1},
        })
        return _obj({
            "seed": SEED, "dataset": PATH, "checkpoint": OPT_PATH, "encoder": ENCODER, "protocol": protocol,
            "base_train": TRAIN, "cil": _obj(cil_props),
        })
    if command == "eval":
        return _obj({
            "seed": SEED, "dataset": PATH, "checkpoint": PATH,
            "metrics": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            "split": SPLIT, "knn_k": POS_INT, "probe_epochs": POS_INT, "probe_lr": POS,
        })
    raise KeyError(command)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(command: str, user: dict, seed: int | None = None) -> dict:
    """Defaults overlaid with ``user`` (and ``seed``), validated."""
    if not isinstance(user, dict):
        raise CliError(EXIT_USAGE, "config must be a JSON object")
    resolved = _merge(defaults(command), user)
    if seed is not None:
        resolved["seed"] = seed
    try:
        jsonschema.validate(resolved, schema(command))
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise CliError(EXIT_USAGE, f"invalid config at {where}: {err.message}") from None
    if command == "eval":
        unknown = [m for m in resolved["metrics"] if m not in ev.METRICS]
        if unknown:
            raise CliError(EXIT_USAGE, f"unknown metric(s) {unknown}; valid names: {', '.join(ev.METRICS)}")
    return resolved


def read_config(path: str | None, command: str) -> dict:
    """User config from ``path``; a run manifest is accepted and unwrapped."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise CliError(EXIT_USAGE, f"cannot parse config {path}: {err}") from None
    if isinstance(doc, dict) and {"command", "config", "config_hash"} <= set(doc):
        if doc["command"] != command:
            raise CliError(EXIT_USAGE, f"manifest is for {doc['command']!r}, not {command!r}")
        return doc["config"]
    return doc


# ---------------------------------------------------------------------------
# shared helpers


def _load_samples(path: str) -> list[data.Sample]:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"dataset not found: {path}")
    try:
        return data.load_dataset(p)[1]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        raise CliError(EXIT_MISSING, f"cannot read dataset {path}: {err}") from None


def _load_params(path: str):
    try:
        return load_checkpoint(path)
    except CheckpointNotFoundError as err:
        raise CliError(EXIT_MISSING, str(err)) from None
    except CheckpointError as err:
        raise CliError(EXIT_MISSING, f"unreadable checkpoint: {err}") from None


def _start_params(cfg: dict, input_dim: int):
    if cfg.get("checkpoint"):
        return _load_params(cfg["checkpoint"]).params
    enc = cfg["encoder"]
    return new_encoder(input_dim, cfg["seed"], tuple(enc["hidden_dims"]), enc["embed_dim"])


def _train(cfg: dict, stage: str, key: str = "train") -> TrainConfig:
    return train_config_from_dict({**cfg[key], "seed": cfg["seed"], "stage": stage})


def _arrays(samples):
    x = np.stack([s.x for s in samples])
    ids = np.array([s.id for s in samples], dtype=np.int64)
    y = np.array([-1 if s.label is None else s.label for s in samples], dtype=np.int64)
    return x, ids, y


def _split(cfg: dict, samples):
    train, test = data.holdout(samples, cfg["split"]["test_fraction"], cfg["split"]["seed"])
    if not train:
        raise CliError(EXIT_USAGE, "split leaves no training samples")
    return train, test


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _checkpoint(out: Path, params, command: str, cfg: dict, epochs: int, metrics: dict, classes=None) -> Path:
    manifest = {"stage": command, "config": cfg, "seed": cfg["seed"], "epoch": epochs, "metrics": metrics}
    if classes is not None:
        manifest["classes"] = [int(c) for c in classes]
    return save_checkpoint(params, manifest, out / "checkpoint.json")


# ---------------------------------------------------------------------------
# commands; each returns {artifact name: path}


def cmd_gen_data(cfg: dict, out: Path) -> dict:
    if cfg["source"] == "synthetic":
        spec = data.SyntheticSpec(**cfg["synthetic"], seed=cfg["seed"])
        samples = data.gen_clusters(spec)
    else:
        images, labels = cfg["idx"]["images"], cfg["idx"]["labels"]
        if not images or not labels:
            raise CliError(EXIT_USAGE, "idx source needs idx.images and idx.labels")
        for p in (images, labels):
            if not Path(p).exists():
                raise CliError(EXIT_MISSING, f"IDX file not found: {p}")
        try:
            samples = data.load_idx(images, labels)
        except data.IdxError as err:
            raise CliError(EXIT_MISSING, f"unreadable IDX input: {err}") from None
        spec = None
    path = out / "dataset.json"
    data.save_dataset(path, spec, samples)
    log.info("wrote %d samples to %s", len(samples), path)
    return {"dataset": str(path)}


def cmd_pretrain(cfg: dict, out: Path) -> dict:
    samples = _load_samples(cfg["dataset"])
    train, _ = _split(cfg, samples)
    visible = data.split(train, cfg["labeled_fraction"], seed=cfg["seed"])
    labeled_ids = set(visible.labeled.ids.tolist())
    x, ids, y = _arrays(train)
    y = np.where(np.isin(ids, list(labeled_ids)), y, -1)
    params = _start_params(cfg, x.shape[1])
    tc = _train(cfg, "pretrain")
    params, history = pretrain_cssl(x, ids, y, tc, params)
    metrics = {"final_loss": history[-1], "first_loss": history[0]}
    write_history_csv(out / "history.csv", [("pretrain", e, "nnclr", v) for e, v in enumerate(history)])
    _write_json(out / "metrics.json", metrics)
    ckpt = _checkpoint(out, params, "pretrain", cfg, tc.epochs, metrics)
    return {"checkpoint": str(ckpt), "history": str(out / "history.csv"), "metrics": str(out / "metrics.json")}


def cmd_finetune(cfg: dict, out: Path) -> dict:
    samples = _load_samples(cfg["dataset"])
    params = _load_params(cfg["checkpoint"]).params
    train, test = _split(cfg, samples)
    if cfg["labels_per_class"] is not None:
        train = data.take_per_class(train, cfg["labels_per_class"], seed=cfg["seed"])
    x, _, y = _arrays(train)
    tc = _train(cfg, "finetune")
    params, classes, history = finetune_supervised(params, x, y, tc, mode=cfg["mode"])
    metrics = {"final_loss": history[-1], "train_size": len(train)}
    if test:
        tx, _, ty = _arrays(test)
        metrics["test_accuracy"] = float(np.mean(predict_labeled(params, classes, tx) == ty))
    write_history_csv(out / "history.csv", [("finetune", e, "ce", v) for e, v in enumerate(history)])
    _write_json(out / "metrics.json", metrics)
    ckpt = _checkpoint(out, params, "finetune", cfg, tc.epochs, metrics, classes)
    return {"checkpoint": str(ckpt), "history": str(out / "history.csv"), "metrics": str(out / "metrics.json")}


def cmd_ncl(cfg: dict, out: Path) -> dict:
    samples = _load_samples(cfg["dataset"])
    try:
        sp = data.split(samples, ncd_mode=True, known_classes=cfg["known_classes"])
    except ValueError as err:
        raise CliError(EXIT_USAGE, str(err)) from None
    params = _start_params(cfg, len(samples[0].x))
    tc = _train(cfg, "ncl")
    result = ncl_pipeline(sp, tc, params, num_novel=cfg["num_novel"])
    truth = sp.unlabeled.eval_labels()
    metrics = {
        "cluster_accuracy": ev.cluster_accuracy(result.cluster_ids(sp.unlabeled.x), truth),
        "num_novel": int(cfg["num_novel"] or sp.num_novel),
    }
    names = {"stage1": "ce+cs", "stage2": "ncl+scl", "stage3": "bce+cs"}
    rows = [(stage, e, names[stage], v) for stage, hist in result.history.items() for e, v in enumerate(hist)]
    write_history_csv(out / "history.csv", rows)
    _write_json(out / "metrics.json", metrics)
    ckpt = _checkpoint(out, result.params, "ncl", cfg, tc.epochs, metrics, result.known_classes)
    return {"checkpoint": str(ckpt), "history": str(out / "history.csv"), "metrics": str(out / "metrics.json")}


def cmd_fewshot(cfg: dict, out: Path) -> dict:
    samples = _load_samples(cfg["dataset"])
    train, test = _split(cfg, samples)
    visible = data.split(train, cfg["labeled_fraction"], seed=cfg["seed"])
    x, ids, y = _arrays(train)
    y = np.where(np.isin(ids, visible.labeled.ids), y, -1)
    params = _start_params(cfg, x.shape[1])
    tc = _train(cfg, "fewshot")
    params, classes, history = fewshot_base(x, ids, y, tc, params, supervised=cfg["supervised"])
    metrics = {"final_loss": history[-1]}
    if cfg["supervised"] and test:
        tx, _, ty = _arrays(test)
        metrics["test_accuracy"] = float(np.mean(predict_labeled(params, classes, tx) == ty))
    write_history_csv(out / "history.csv", [("fewshot", e, "ce+lambda*nnclr", v) for e, v in enumerate(history)])
    _write_json(out / "metrics.json", metrics)
    ckpt = _checkpoint(out, params, "fewshot", cfg, tc.epochs, metrics, classes)
    return {"checkpoint": str(ckpt), "history": str(out / "history.csv"), "metrics": str(out / "metrics.json")}


def cmd_cil(cfg: dict, out: Path) -> dict:
    samples = _load_samples(cfg["dataset"])
    pc = cfg["protocol"]
    protocol = data.CilProtocol(
        tuple(pc["base_classes"]), tuple(tuple(s) for s in pc["sessions"]),
        pc["shots"], pc["test_per_class"], pc["base_train_per_class"],
    )
    try:
        cd = data.make_sessions(samples, protocol, seed=cfg["seed"])
    except (ValueError, data.InsufficientSamplesError) as err:
        raise CliError(EXIT_USAGE, str(err)) from None
    cc = dict(cfg["cil"])
    cc["augment"] = data.AugmentSpec(**{**cc["augment"], "scale_range": tuple(cc["augment"]["scale_range"])})
    config = cil_mod.CilConfig(**cc, seed=cfg["seed"])
    params = _start_params(cfg, len(samples[0].x))
    state, rows = cil_mod.run_protocol(cd.base, cd.sessions, cd.test, _train(cfg, "cil-base", "base_train"), params, config)
    base = list(protocol.base_classes)
    metrics: dict = {"distill": config.distill, "base_forgetting": cil_mod.base_forgetting(rows, base)}
    for t, row in enumerate(rows):
        metrics[f"session_{t}_acc"] = float(np.mean(list(row.values())))
        metrics[f"session_{t}_base_acc"] = float(np.mean([row[c] for c in base]))
    cil_mod.write_session_csv(out / "sessions.csv", rows)
    _write_json(out / "metrics.json", metrics)
    ckpt = _checkpoint(out, state.params, "cil", cfg, config.session_epochs, metrics, state.classes)
    return {"checkpoint": str(ckpt), "sessions": str(out / "sessions.csv"), "metrics": str(out / "metrics.json")}


def cmd_eval(cfg: dict, out: Path) -> dict:
    samples = _load_samples(cfg["dataset"])
    params = _load_params(cfg["checkpoint"]).params
    train, test = _split(cfg, samples)
    if not test:
        raise CliError(EXIT_USAGE, "evaluation needs a non-empty test split")
    x, _, y = _arrays(train)
    tx, _, ty = _arrays(test)
    zx, zt = embed(params, x), embed(params, tx)
    metrics = {}
    for name in cfg["metrics"]:
        if name == "linear_probe":
            metrics[name] = ev.linear_probe(zx, y, zt, ty, cfg["probe_epochs"], cfg["probe_lr"], seed=cfg["seed"])
        elif name == "knn_accuracy":
            metrics[name] = ev.knn_accuracy(zx, y, zt, ty, k=cfg["knn_k"])
        elif name == "separation_ratio":
            metrics[name] = ev.separation_ratio(zt, ty)
    _write_json(out / "metrics.json", metrics)
    return {"metrics": str(out / "metrics.json")}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "ncl": cmd_ncl,
    "fewshot": cmd_fewshot,
    "cil": cmd_cil,
    "eval": cmd_eval,
}


def report(paths: list[str], stream=None) -> None:
    """One CSV row per metrics file; columns are the union of keys."""
    stream = stream or sys.stdout
    runs = []
    for p in paths:
        try:
            doc = json.loads(Path(p).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise CliError(EXIT_MISSING, f"cannot read metrics file {p}: {err}") from None
        if not isinstance(doc, dict):
            raise CliError(EXIT_MISSING, f"{p} is not a metrics object")
        runs.append((p, doc))
    columns: list[str] = []
    for _, doc in runs:
        columns += [k for k in sorted(doc) if k not in columns]
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["run", *columns])
    for p, doc in runs:
        w.writerow([p, *[_cell(doc[c]) if c in doc else "" for c in columns]])


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True)
    return str(v)


def run(command: str, config_path: str | None, out_dir: str, seed: int | None = None) -> dict:
    """Resolve the config, run ``command`` and write its manifest; returns the manifest."""
    cfg = resolve_config(command, read_config(config_path, command), seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        artifacts = COMMANDS[command](cfg, out)
    except NonFiniteLossError as err:
        raise CliError(EXIT_NUMERIC, f"numeric abort: {err} (batch id {err.batch})") from None
    except NonFiniteError as err:
        raise CliError(EXIT_NUMERIC, f"numeric abort: {err}") from None
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        "artifacts": artifacts,
        "duration_s": time.perf_counter() - t0,
        "version": __version__,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exemplar-cssl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="JSON config or a previous run manifest")
        p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--quiet", action="store_true")
    p = sub.add_parser("report", help="compare metrics files as CSV on stdout")
    p.add_argument("files", nargs="*", metavar="METRICS")
    p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            if not args.files:
                parser.error("report needs at least one metrics file")
            report(args.files)
            return EXIT_OK
        if args.seed is not None and args.seed < 0:
            parser.error("--seed must be non-negative")
        manifest = run(args.command, args.config, args.out, args.seed)
        log.info("done in %.2fs; manifest at %s", manifest["duration_s"], Path(args.out) / "manifest.json")
        return EXIT_OK
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

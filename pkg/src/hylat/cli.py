"""Command line entry points: gen-data, train-stage1, train-stage2, eval, probe.

Every subcommand takes ``--config FILE`` (JSON) plus ``--key value``
overrides; precedence is command line > file > built-in defaults and
unknown keys are rejected.  Each run writes ``resolved_config.json`` with
the tool version and SHA-256 hashes of its inputs.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The environment variable ``HYLAT_OUTPUT_ROOT`` changes the default output
root (``runs``); it never overrides any other setting.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .errors import HylatError, InputError, IoError, NumericError
from .evaluation import EvalConfig, metrics_csv, metrics_json, run_mad
from .model import ModelConfig, TinyTransformer, load_checkpoint, save_checkpoint
from .probe import (attention_csv, attention_report, cluster_separation, collect_final_latents,
                    pca, projections_csv, variance_csv)
from .stage1 import Stage1Config, train_stage1
from .stage2 import Stage2Config, train_stage2
from .tasks import (ChainArithmetic, MultiHopLookup, Stage1Sample, Stage2Dialogue, dumps_dataset,
                    gen_decomposition, gen_refinement, gen_stage1, loads_dataset)
from .vocab import VOCAB

OUTPUT_ROOT_ENV = "HYLAT_OUTPUT_ROOT"


class UsageError(Exception):
    pass


_MODEL_KEYS = {f.name: f.default for f in fields(ModelConfig) if f.name != "vocab_size"}
_MODEL_KEYS["model_seed"] = _MODEL_KEYS.pop("seed")


def _train_keys(cls):
    return {f.name: f.default for f in fields(cls)}


DEFAULTS = {
    "gen-data": {
        "family": "chain", "count": 1000, "seed": 0, "steps": 2, "modulus": 10, "ops": "+-*",
        "hops": 3, "kb_size": 32, "error_rate": 0.8, "wrong_value": "shift", "num_agents": 2, "base_family": "chain",
        "out": None,
    },
    "train-stage1": {"data": None, "init_from": None, "checkpoint_every": 0, "out": None,
                     **_MODEL_KEYS, **_train_keys(Stage1Config)},
    "train-stage2": {"data": None, "init_from": None, "no_stage1_init": False,
                     "checkpoint_every": 0, "out": None, **_MODEL_KEYS, **_train_keys(Stage2Config)},
    "eval": {"checkpoint": None, "data": None, "max_questions": None, "name": "eval",
             "compositions": ["hybrid"], "sigma_grid": [0.0], "out": None,
             **{k: v for k, v in _train_keys(EvalConfig).items()
                if k not in ("composition", "sigma", "capture_attention")}},
    "probe": {"checkpoint": None, "data": [], "max_questions": 200, "num_agents": 1,
              "num_rounds": 1, "k": 6, "num_components": 2, "batch_size": 64, "out": None},
}


# --- config resolution ---------------------------------------------------------------------
def _coerce(key, value, default):
    """Parse a command-line string according to the default's type."""
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise UsageError(f"--{key} expects a boolean, got {value!r}")
    if isinstance(default, str):
        return value
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        if default is None:
            return value
        raise UsageError(f"--{key}: cannot parse {value!r}") from None


def _check_type(key, value, default):
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise UsageError(f"config key {key!r} expects {type(default).__name__}, got {value!r}")


def parse_overrides(tokens, defaults):
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        key = key.replace("-", "_")
        if key not in defaults:
            raise UsageError(f"unknown config key {key!r}")
        if not eq:
            nxt = tokens[i + 1] if i + 1 < len(tokens) else None
            if isinstance(defaults[key], bool) and (nxt is None or nxt.startswith("--")):
                val = "true"
            elif nxt is None:
                raise UsageError(f"--{key} needs a value")
            else:
                val = nxt
                i += 1
        out[key] = _coerce(key, val, defaults[key])
        i += 1
    return out


def resolve_config(command, config_path, overrides):
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    if config_path:
        try:
            with open(config_path) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {config_path}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        for key in file_cfg:
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r} in {config_path}")
        cfg.update(file_cfg)
    cfg.update(overrides)
    for key, value in cfg.items():
        _check_type(key, value, defaults[key])
    if cfg.get("out") is None:
        cfg["out"] = os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), command)
    return cfg


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_resolved(cfg, command, inputs):
    try:
        os.makedirs(cfg["out"], exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {cfg['out']}: {exc}") from exc
    hashes = {p: _sha256(p) for p in inputs if p}
    doc = {"command": command, "tool_version": __version__, "config": cfg, "input_hashes": hashes}
    with open(os.path.join(cfg["out"], "resolved_config.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_dataset(path):
    if not path:
        raise UsageError("a dataset path is required (--data)")
    try:
        with open(path) as fh:
            return loads_dataset(fh.read())
    except OSError as exc:
        raise HylatError(f"cannot read dataset {path}: {exc}") from exc


def _model_config(cfg):
    return ModelConfig(num_layers=cfg["num_layers"], num_heads=cfg["num_heads"],
                       d_model=cfg["d_model"], d_ff=cfg["d_ff"], vocab_size=len(VOCAB),
                       max_seq_len=cfg["max_seq_len"], seed=cfg["model_seed"])


def _subset(cls, cfg):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in cfg.items() if k in names})


# --- subcommands ----------------------------------------------------------------------------------
def cmd_gen_data(cfg):
    fam_name = cfg["family"]

    def base(name):
        if name == "chain":
            return ChainArithmetic(cfg["steps"], cfg["modulus"], cfg["ops"])
        if name == "multihop":
            return MultiHopLookup(cfg["hops"], cfg["kb_size"])
        raise UsageError(f"unknown task family {name!r}")

    if fam_name not in ("chain", "multihop", "refinement", "decomposition"):
        raise UsageError(f"unknown task family {fam_name!r}")
    if cfg["count"] < 0:
        raise UsageError("count must be >= 0")
    try:
        if fam_name in ("chain", "multihop"):
            fam = base(fam_name)
            samples = gen_stage1(fam, cfg["seed"], cfg["count"])
            params = asdict(fam)
            kind = "stage1"
        elif fam_name == "refinement":
            fam = base(cfg["base_family"])
            samples = gen_refinement(fam, cfg["seed"], cfg["count"], cfg["error_rate"],
                                     cfg["num_agents"], cfg["wrong_value"])
            params = {**asdict(fam), "base_family": cfg["base_family"],
                      "error_rate": cfg["error_rate"], "num_agents": cfg["num_agents"],
                      "wrong_value": cfg["wrong_value"]}
            kind = "stage2"
        else:
            samples = gen_decomposition(cfg["seed"], cfg["count"], cfg["kb_size"])
            params = {"kb_size": cfg["kb_size"]}
            kind = "stage2"
    except InputError as exc:
        raise UsageError(str(exc)) from None
    _write_resolved(cfg, "gen-data", [])
    header = {"kind": kind, "family": fam_name, "params": params, "seed": cfg["seed"]}
    text = dumps_dataset(samples, header)
    path = os.path.join(cfg["out"], "dataset.jsonl")
    with open(path, "w") as fh:
        fh.write(text)
    digest = hashlib.sha256(text.encode()).hexdigest()
    print(f"wrote {len(samples)} {kind} samples to {path} sha256={digest}")
    with open(os.path.join(cfg["out"], "vocab.json"), "w") as fh:
        fh.write(VOCAB.to_json() + "\n")
    return 0


def _init_model(cfg, required):
    """Model to train plus the extras stored with its checkpoint."""
    if cfg["init_from"]:
        return load_checkpoint(cfg["init_from"])
    if required:
        raise UsageError("--init-from is required (or pass --no-stage1-init)")
    return TinyTransformer(_model_config(cfg)), {}


def _resume_state(extra, stage):
    """Step count and optimizer moments saved by an earlier run of ``stage``."""
    key = f"{stage}.step"
    if key not in extra:
        return 0, None
    prefix = f"{stage}.opt."
    opt = {k[len(prefix):]: v for k, v in extra.items() if k.startswith(prefix)}
    opt["t"] = opt["t"].astype(np.int64)
    return int(extra[key][0]), opt


def _save(path, model, stage, step, opt):
    extra = {f"{stage}.step": np.array([step], dtype=np.float32)}
    if opt is not None:
        extra.update({f"{stage}.opt.{k}": v for k, v in opt.state_arrays().items()})
    save_checkpoint(path, model, extra)


def _run_training(cfg, model, stage, start_step, train):
    """Run ``train(progress)``; on divergence keep the last good weights and re-raise."""
    every = cfg["checkpoint_every"]
    last = {"step": start_step, "opt": None}

    def progress(step, _bd, opt):
        last["step"], last["opt"] = step, opt
        if every and step % every == 0:
            _save(os.path.join(cfg["out"], f"checkpoint_step{step}.hylt"), model, stage, step, opt)

    try:
        _, opt = train(progress)
    except NumericError:
        # the failed step applied no update, so the weights are the last good ones
        _save(os.path.join(cfg["out"], "checkpoint_last_good.hylt"), model, stage,
              last["step"], last["opt"])
        raise
    _save(os.path.join(cfg["out"], "checkpoint.hylt"), model, stage, last["step"], opt)


def cmd_train_stage1(cfg):
    _, samples = _read_dataset(cfg["data"])
    if not all(isinstance(s, Stage1Sample) for s in samples):
        raise UsageError("train-stage1 needs a stage-1 dataset")
    model, extra = _init_model(cfg, required=False)
    start, opt_state = _resume_state(extra, "stage1")
    _write_resolved(cfg, "train-stage1", [cfg["data"], cfg["init_from"]])
    tcfg = _subset(Stage1Config, cfg)
    with open(os.path.join(cfg["out"], "train_log.jsonl"), "w") as log:
        _run_training(cfg, model, "stage1", start, lambda cb: train_stage1(
            model, samples, tcfg, log=log, progress=cb, start_step=start, opt_state=opt_state))
    return 0


def cmd_train_stage2(cfg):
    _, dialogues = _read_dataset(cfg["data"])
    if not all(isinstance(d, Stage2Dialogue) for d in dialogues):
        raise UsageError("train-stage2 needs a stage-2 dataset")
    model, extra = _init_model(cfg, required=not cfg["no_stage1_init"])
    start, opt_state = _resume_state(extra, "stage2")
    _write_resolved(cfg, "train-stage2", [cfg["data"], cfg["init_from"]])
    tcfg = _subset(Stage2Config, cfg)
    with open(os.path.join(cfg["out"], "train_log.jsonl"), "w") as log:
        _run_training(cfg, model, "stage2", start, lambda cb: train_stage2(
            [model], dialogues, tcfg, log=log, progress=cb, start_step=start, opt_state=opt_state))
    return 0


def _eval_one(args):
    ckpt, questions, ecfg_dict = args
    model, _ = load_checkpoint(ckpt)
    return run_mad(model, questions, EvalConfig(**ecfg_dict))


def cmd_eval(cfg, jobs=1):
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    _, questions = _read_dataset(cfg["data"])
    if cfg["max_questions"] is not None:
        questions = questions[: cfg["max_questions"]]
    load_checkpoint(cfg["checkpoint"])  # fail early on a bad file
    _write_resolved(cfg, "eval", [cfg["data"], cfg["checkpoint"]])
    base = {k: v for k, v in cfg.items() if k in {f.name for f in fields(EvalConfig)}}
    grid = []
    for comp in cfg["compositions"]:
        for sigma in cfg["sigma_grid"]:
            try:
                ecfg = EvalConfig(**{**base, "composition": comp, "sigma": float(sigma)})
            except InputError as exc:
                raise UsageError(str(exc)) from None
            grid.append((comp, float(sigma), asdict(ecfg)))
    tasks = [(cfg["checkpoint"], questions, e) for _, _, e in grid]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_eval_one, tasks))
    else:
        results = [_eval_one(t) for t in tasks]
    entries, rows, timing = [], [], []
    tdir = os.path.join(cfg["out"], "transcripts")
    os.makedirs(tdir, exist_ok=True)
    for (comp, sigma, _), res in zip(grid, results):
        entries.append({"config": cfg["name"], "composition": comp, "sigma": sigma,
                        "metrics": res.metrics.to_dict()})
        rows.append((cfg["name"], comp, sigma, res.metrics))
        timing.append({"composition": comp, "sigma": sigma,
                       "seconds_per_question": res.metrics.seconds_per_question})
        with open(os.path.join(tdir, f"{comp}_sigma{sigma}.jsonl"), "w") as fh:
            for rec in res.transcript:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(os.path.join(cfg["out"], "metrics.json"), "w") as fh:
        fh.write(metrics_json(entries))
    with open(os.path.join(cfg["out"], "metrics.csv"), "w") as fh:
        fh.write(metrics_csv(rows))
    with open(os.path.join(cfg["out"], "timing.json"), "w") as fh:
        json.dump(timing, fh, indent=1)
    return 0


def cmd_probe(cfg):
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    paths = cfg["data"] if isinstance(cfg["data"], list) else [cfg["data"]]
    if not paths:
        raise UsageError("--data needs at least one dataset path")
    model, _ = load_checkpoint(cfg["checkpoint"])
    _write_resolved(cfg, "probe", [cfg["checkpoint"], *paths])
    ecfg = EvalConfig(num_agents=cfg["num_agents"], num_rounds=cfg["num_rounds"], k=cfg["k"],
                      batch_size=cfg["batch_size"], include_latents=True, capture_attention=True)
    X, labels, traces = [], [], []
    for path in paths:
        header, questions = _read_dataset(path)
        questions = questions[: cfg["max_questions"]]
        res = run_mad(model, questions, ecfg)
        xs, ls = collect_final_latents(res.transcript, label=header.get("family", path))
        if len(xs):
            X.append(xs)
            labels += ls
        traces += res.traces
    summary = {"num_latents": len(labels)}
    if X:
        X = np.concatenate(X)
        result = pca(X, min(cfg["num_components"], X.shape[1]))
        with open(os.path.join(cfg["out"], "pca_projections.csv"), "w") as fh:
            fh.write(projections_csv(result, labels))
        with open(os.path.join(cfg["out"], "pca_variance.csv"), "w") as fh:
            fh.write(variance_csv(result))
        if len(set(labels)) >= 2:
            summary["cluster_separation"] = cluster_separation(X, labels)
    with open(os.path.join(cfg["out"], "attention_mass.csv"), "w") as fh:
        fh.write(attention_csv(attention_report(traces)))
    with open(os.path.join(cfg["out"], "probe_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train-stage1": cmd_train_stage1,
            "train-stage2": cmd_train_stage2, "eval": cmd_eval, "probe": cmd_probe}


def build_parser():
    parser = argparse.ArgumentParser(prog="hylat", description=__doc__.split("\n")[0],
                                     allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"hylat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, allow_abbrev=False,
                           help=f"{name} (config keys: {', '.join(sorted(DEFAULTS[name]))})")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return parser


def main(argv=None):
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(rest, DEFAULTS[args.command])
        cfg = resolve_config(args.command, args.config, overrides)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        if args.command == "eval":
            return cmd_eval(cfg, args.jobs)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"hylat {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (HylatError, OSError) as exc:
        print(f"hylat {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

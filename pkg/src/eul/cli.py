"""Command-line entry point: ``eul {gen,train,unlearn,fuse,eval,sequence}``.

Every command accepts ``--config FILE`` (JSON). Flags override file values
and the effective configuration is embedded in each written report.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys

from . import checkpoint
from .baselines import (FinetuneConfig, SisaEnsemble, finetune_retain, retrain, reverse_gradient,
                        sisa_lite)
from .data import DeletionRequest, generate_corpus, load_corpus, resolve_request, save_corpus
from .errors import ConfigError, EULError, FormatError, NumericError, UnknownEntityError
from .fusion import fuse, load_gram, save_gram
from .metrics import format_table, full_report
from .model import BackboneConfig
from .training import TrainConfig, backbone_for, train_original
from .unlearn import UnlearnConfig
from .workflows import MODES, run_sequence, unlearn_request

log = logging.getLogger("eul")

STRATEGIES = ("eul", "retrain", "finetune", "revgrad", "sisa")

CORPUS_KEYS = ("seed", "n_records", "n_entities", "n_classes", "label_noise_rate", "n_dev",
               "n_test", "vocab_size", "cues_per_class", "ambiguous_rate", "min_len", "max_len")


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    corpus: dict = dataclasses.field(default_factory=dict)
    backbone: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    unlearn: dict = dataclasses.field(default_factory=dict)
    finetune: dict = dataclasses.field(default_factory=dict)
    sisa: dict = dataclasses.field(default_factory=lambda: {"n_shards": 4, "n_slices": 4})
    fusion: dict = dataclasses.field(default_factory=lambda: {"ridge_scale": 1e-6})

    SECTIONS = {
        "corpus": CORPUS_KEYS,
        "backbone": tuple(f.name for f in dataclasses.fields(BackboneConfig)),
        "train": tuple(f.name for f in dataclasses.fields(TrainConfig)),
        "unlearn": tuple(f.name for f in dataclasses.fields(UnlearnConfig)),
        "finetune": tuple(f.name for f in dataclasses.fields(FinetuneConfig)),
        "sisa": ("n_shards", "n_slices"),
        "fusion": ("ridge_scale",),
    }

    @classmethod
    def from_dict(cls, obj: dict) -> RunConfig:
        if not isinstance(obj, dict):
            raise ConfigError("config root must be an object")
        allowed = {"seed", *cls.SECTIONS}
        unknown = sorted(set(obj) - allowed)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; allowed: {sorted(allowed)}")
        cfg = cls()
        for name, keys in cls.SECTIONS.items():
            section = obj.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            bad = sorted(set(section) - set(keys))
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {bad}; allowed: {sorted(keys)}")
            merged = {**getattr(cfg, name), **section}
            setattr(cfg, name, merged)
        if "seed" in obj:
            if not isinstance(obj["seed"], int):
                raise ConfigError("seed must be an integer")
            cfg.seed = obj["seed"]
        return cfg

    def to_dict(self) -> dict:
        return {"seed": self.seed, **{k: getattr(self, k) for k in self.SECTIONS}}

    def build(self, name, factory):
        try:
            return factory(**{"seed": self.seed, **getattr(self, name)}
                           if "seed" in self.SECTIONS[name] else getattr(self, name))
        except TypeError as exc:
            raise ConfigError(f"config section {name!r}: {exc}") from None


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(obj)


def _apply_flags(cfg: RunConfig, args):
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for flag, section, key in (("epochs", "train", "epochs"), ("unlearn_epochs", "unlearn", "epochs"),
                               ("n_records", "corpus", "n_records"),
                               ("n_entities", "corpus", "n_entities"),
                               ("label_noise_rate", "corpus", "label_noise_rate"),
                               ("ridge_scale", "fusion", "ridge_scale")):
        value = getattr(args, flag, None)
        if value is not None:
            getattr(cfg, section)[key] = value
    return cfg


def _require(path, what):
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _request(args) -> DeletionRequest:
    if not args.request_id or not args.entities:
        raise ConfigError("--request-id and --entities are required")
    keys = {e.strip() for e in args.entities.split(",") if e.strip()}
    return DeletionRequest(args.request_id, keys)


def _parse_request(text) -> DeletionRequest:
    rid, sep, ents = text.partition(":")
    if not sep or not rid:
        raise ConfigError(f"request {text!r} must look like ID:entity[,entity...]")
    return DeletionRequest(rid, {e for e in ents.split(",") if e})


class OutputGuard:
    """Remove whatever a failed command created under ``directory``."""

    def __init__(self, directory):
        self.directory = directory
        self.existed = os.path.exists(directory)
        self.before = set(os.listdir(directory)) if self.existed else set()

    def __enter__(self):
        os.makedirs(self.directory, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            return False
        if not self.existed:
            shutil.rmtree(self.directory, ignore_errors=True)
        else:
            for name in set(os.listdir(self.directory)) - self.before:
                path = os.path.join(self.directory, name)
                shutil.rmtree(path) if os.path.isdir(path) else os.unlink(path)
        return False


def _write_json(path, obj):
    checkpoint.atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# -------------------------------------------------------------------- commands

def cmd_gen(args, cfg: RunConfig):
    params = {"seed": cfg.seed, **cfg.corpus}
    corpus = generate_corpus(**params)
    with OutputGuard(args.out):
        save_corpus(corpus, args.out)
    print(f"gen: {len(corpus.train)} train / {len(corpus.dev)} dev / {len(corpus.test)} test "
          f"records -> {args.out}")


def _backbone(cfg, corpus):
    return backbone_for(corpus, **cfg.backbone)


def cmd_train(args, cfg: RunConfig):
    corpus = load_corpus(_require(args.corpus, "corpus"))
    tcfg = cfg.build("train", TrainConfig)
    model, history = train_original(corpus.train, _backbone(cfg, corpus), tcfg)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    checkpoint.save_model(args.out, model, {"kind": "original", "config": cfg.to_dict(),
                                            "history": history})
    print(f"train: {len(history)} epochs, final loss {history[-1] if history else float('nan'):.4f}"
          f" -> {args.out}")


def cmd_unlearn(args, cfg: RunConfig):
    corpus = load_corpus(_require(args.corpus, "corpus"))
    request = _request(args)
    split = resolve_request(corpus, request)
    meta = {"strategy": args.strategy, "request": {"request_id": request.request_id,
            "entity_keys": sorted(request.entity_keys)}, "config": cfg.to_dict()}
    with OutputGuard(args.out):
        if args.strategy == "retrain":
            res = retrain(split, _backbone(cfg, corpus), cfg.build("train", TrainConfig))
            checkpoint.save_model(os.path.join(args.out, "model.ckpt"), res.model, meta)
            files = ["model.ckpt"]
        elif args.strategy == "sisa":
            res = sisa_lite(corpus, request, config=cfg.build("train", TrainConfig),
                            backbone=_backbone(cfg, corpus), **cfg.sisa)
            files = []
            for k, m in enumerate(res.model.models):
                name = f"shard{k}.ckpt"
                checkpoint.save_model(os.path.join(args.out, name), m, {**meta, "shard": k})
                files.append(name)
            meta["touched_shards"] = res.extra["touched"]
        else:
            model, _, _ = checkpoint.load_model(_require(args.model, "model checkpoint"))
            if args.strategy == "eul":
                art = unlearn_request(model, corpus, request, cfg.build("unlearn", UnlearnConfig))
                checkpoint.save_adapters(os.path.join(args.out, "adapters.ckpt"),
                                         {request.request_id: art.adapters}, meta)
                save_gram(art.gram, os.path.join(args.out, "gram.bin"))
                meta["unlearn_report"] = art.report.to_json()
                files = ["adapters.ckpt", "gram.bin"]
                update_time = art.report.update_time_s
            else:
                fcfg = cfg.build("finetune", FinetuneConfig)
                fn = finetune_retain if args.strategy == "finetune" else reverse_gradient
                res = fn(model, split, fcfg)
                checkpoint.save_model(os.path.join(args.out, "model.ckpt"), res.model, meta)
                files = ["model.ckpt"]
        if args.strategy != "eul":
            update_time = res.update_time_s
        result = {**meta, "update_time_s": update_time, "files": files,
                  "base_model": os.path.abspath(args.model) if args.model else None,
                  "corpus": os.path.abspath(args.corpus)}
        _write_json(os.path.join(args.out, "result.json"), result)
    print(f"unlearn: strategy={args.strategy} request={request.request_id} "
          f"forget={len(split.forget)} retain={len(split.retain)} "
          f"update_time={update_time:.2f}s -> {args.out}")


def cmd_fuse(args, cfg: RunConfig):
    if len(args.adapters) != len(args.grams):
        raise ConfigError("--adapters and --grams need the same number of files")
    sets, grams = {}, []
    for a_path, g_path in zip(args.adapters, args.grams):
        loaded, _ = checkpoint.load_adapters(_require(a_path, "adapter file"))
        gram = load_gram(_require(g_path, "gram file"))
        if gram.request_id not in loaded:
            raise ConfigError(f"{a_path} holds no adapter set for request {gram.request_id!r}")
        sets[gram.request_id] = loaded[gram.request_id]
        grams.append(gram)
    fused = fuse(grams, sets, float(cfg.fusion.get("ridge_scale", 1e-6)))
    name = "+".join(fused.request_ids)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    checkpoint.save_adapters(args.out, {name: fused.adapters},
                             {"kind": "fused", "request_ids": fused.request_ids,
                              "ridge": fused.ridge, "config": cfg.to_dict()})
    print(f"fuse: merged {len(grams)} adapter sets ({name}) -> {args.out}")


def _load_evaluated(args):
    """Model (or ensemble) to evaluate plus strategy name and update time."""
    if args.run:
        with open(os.path.join(_require(args.run, "run directory"), "result.json")) as fh:
            result = json.load(fh)
        files = [os.path.join(args.run, f) for f in result["files"]]
        strategy, update_time = result["strategy"], result["update_time_s"]
        if strategy == "eul":
            model, _, _ = checkpoint.load_model(result["base_model"])
            sets, _ = checkpoint.load_adapters(files[0])
            model.set_adapters(sets[result["request"]["request_id"]])
        elif strategy == "sisa":
            model = SisaEnsemble([checkpoint.load_model(f)[0] for f in files])
        else:
            model = checkpoint.load_model(files[0])[0]
        return model, strategy, update_time
    model, _, _ = checkpoint.load_model(_require(args.model, "model checkpoint"))
    strategy = "original"
    if args.adapters:
        sets, meta = checkpoint.load_adapters(_require(args.adapters, "adapter file"))
        name = args.adapter_set or (sorted(sets)[0] if len(sets) == 1 else None)
        if name not in sets:
            raise ConfigError(f"choose an adapter set with --adapter-set from {sorted(sets)}")
        model.set_adapters(sets[name])
        strategy = meta.get("kind", "eul")
    return model, strategy, 0.0


def cmd_eval(args, cfg: RunConfig):
    corpus = load_corpus(_require(args.corpus, "corpus"))
    split = resolve_request(corpus, _request(args))
    model, strategy, update_time = _load_evaluated(args)
    report = full_report(model, split, corpus.test, strategy, update_time, corpus.table,
                         seeds={"probe": cfg.seed, "mask": cfg.seed}, config=cfg.to_dict())
    if args.out:
        out_dir = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(out_dir, exist_ok=True)
        _write_json(args.out, report.to_json())
    print(format_table([report]))


def cmd_sequence(args, cfg: RunConfig):
    corpus = load_corpus(_require(args.corpus, "corpus"))
    model, _, _ = checkpoint.load_model(_require(args.model, "model checkpoint"))
    requests = [_parse_request(r) for r in args.request]
    result = run_sequence(model, corpus, requests, args.mode, cfg.build("unlearn", UnlearnConfig),
                          float(cfg.fusion.get("ridge_scale", 1e-6)))
    with OutputGuard(args.out):
        checkpoint.save_adapters(os.path.join(args.out, "adapters.ckpt"),
                                 {"final": result.adapters},
                                 {"kind": args.mode, "requests": [r.request_id for r in requests]})
        _write_json(os.path.join(args.out, "reports.json"),
                    {"mode": args.mode, "config": cfg.to_dict(),
                     "steps": [s.to_json() for s in result.steps]})
    print(format_table(result.steps))


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eul", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("gen", help="generate a synthetic corpus"))
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n-records", type=int)
    sp.add_argument("--n-entities", type=int)
    sp.add_argument("--label-noise-rate", type=float)

    sp = common(sub.add_parser("train", help="train the original model"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--epochs", type=int)

    sp = common(sub.add_parser("unlearn", help="serve one deletion request"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--model", help="original model checkpoint (eul, finetune, revgrad)")
    sp.add_argument("--strategy", choices=STRATEGIES, default="eul")
    sp.add_argument("--request-id", required=True)
    sp.add_argument("--entities", required=True, help="comma-separated entity keys")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--unlearn-epochs", type=int)
    sp.add_argument("--epochs", type=int, help="training epochs for retrain and sisa")

    sp = common(sub.add_parser("fuse", help="merge adapter sets"))
    sp.add_argument("--adapters", nargs="+", required=True)
    sp.add_argument("--grams", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ridge-scale", type=float)

    sp = common(sub.add_parser("eval", help="compute forgetting metrics"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--request-id", required=True)
    sp.add_argument("--entities", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--run", help="output directory of an unlearn command")
    src.add_argument("--model", help="model checkpoint")
    sp.add_argument("--adapters", help="adapter file to insert into --model")
    sp.add_argument("--adapter-set")
    sp.add_argument("--out", help="write the report as JSON")

    sp = common(sub.add_parser("sequence", help="serve several requests in order"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--mode", choices=MODES, required=True)
    sp.add_argument("--request", action="append", required=True, metavar="ID:ENTITY[,ENTITY]")
    sp.add_argument("--out", required=True)
    sp.add_argument("--unlearn-epochs", type=int)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "unlearn": cmd_unlearn, "fuse": cmd_fuse,
            "eval": cmd_eval, "sequence": cmd_sequence}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("EUL_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_flags(load_config(args.config), args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, UnknownEntityError, FormatError) as exc:
        print(f"eul {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"eul {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except EULError as exc:
        print(f"eul {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``cgg {synth,preprocess,train,evaluate,explain,gradcheck}``.

Every command reads one JSON run config (``--config``); flags override
single keys. All artefacts live under the output directory::

    data/         synthetic recordings + manifest.json      (synth)
    processed/    train/val/test.jsonl, norm_stats.json,
                  split.json, summary.json, graph.txt       (preprocess)
    checkpoint.cgg, best.cgg, history.json                  (train)
    metrics_<split>.json                                    (evaluate)
    importance.jsonl, importance_groups.json                (explain)
    gradcheck.json                                          (gradcheck)

Exit status: 0 on success, 1 when a validation fails (gradcheck), 2 on
configuration or input errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from . import gaitdata, preprocess as prep
from .evaluation import evaluate, group_importance, node_importance
from .neuralcore import gradcheck
from .neuralcore.model import ModelConfig, init_params, param_count
from .training import (CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint,
                       save_checkpoint, train)

log = logging.getLogger("cgg")

SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    data_root: Optional[str] = None
    manifest: Optional[str] = None
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class PreprocessConfig:
    window: int = prep.WINDOW
    ratios: tuple = prep.DEFAULT_RATIOS
    split_mode: str = "sample_level"
    seed: int = 0
    adjacency: Optional[str] = None
    normalize_on: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(self.ratios))
        if self.split_mode not in prep.SPLIT_MODES:
            raise ConfigError(f"split_mode must be one of {prep.SPLIT_MODES}")


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    split: str = "test"
    batch_size: int = 256


@dataclass(frozen=True)
class ExplainConfig:
    split: str = "test"
    max_samples: int = 32
    with_embeddings: bool = False


@dataclass(frozen=True)
class GradcheckConfig:
    seeds: int = 10
    layers: Optional[tuple] = None


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: gaitdata.SynthConfig = field(default_factory=gaitdata.SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(cls, d, "config")
        sections = {}
        for f in fields(cls):
            sub = d.get(f.name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {f.name!r} must be an object")
            section_cls = f.default_factory
            _reject_unknown(section_cls, sub, f.name)
            try:
                sections[f.name] = section_cls(**sub)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {f.name} config: {exc}") from None
        return cls(**sections)

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    def with_overrides(self, section, **values):
        current = asdict(getattr(self, section))
        current.update(values)
        d = self.to_dict()
        d[section] = current
        return RunConfig.from_dict(d)

    @property
    def out(self) -> Path:
        return Path(self.paths.out_dir)


def _reject_unknown(cls, d, where):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            return RunConfig.from_dict(json.load(fh))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None


def apply_flags(cfg: RunConfig, args) -> RunConfig:
    if args.out is not None:
        cfg = cfg.with_overrides("paths", out_dir=args.out)
    if args.seed is not None:
        cfg = cfg.with_overrides("synth", seed=args.seed)
        cfg = cfg.with_overrides("preprocess", seed=args.seed)
        cfg = cfg.with_overrides("model", seed=args.seed)
        cfg = cfg.with_overrides("train", seed=args.seed, dropout_seed=args.seed + 1)
    if args.adjacency is not None:
        cfg = cfg.with_overrides("preprocess", adjacency=args.adjacency)
    if args.split_mode is not None:
        cfg = cfg.with_overrides("preprocess", split_mode=f"{args.split_mode}_level")
    if args.threshold is not None:
        cfg = cfg.with_overrides("evaluate", threshold=args.threshold)
    return cfg


# ---------------------------------------------------------------- helpers

def _require(*paths):
    missing = [str(p) for p in paths if p is not None and not Path(p).exists()]
    if missing:
        raise ConfigError("missing input(s): " + ", ".join(missing))


def _echo_config(cfg: RunConfig, command):
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / f"config.{command}.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _data_paths(cfg):
    root = Path(cfg.paths.data_root) if cfg.paths.data_root else cfg.out / "data"
    manifest = Path(cfg.paths.manifest) if cfg.paths.manifest else root / "manifest.json"
    return root, manifest


def _processed(cfg) -> Path:
    return cfg.out / "processed"


def _graph(cfg):
    if cfg.preprocess.adjacency:
        return prep.default_sensor_graph(cfg.preprocess.adjacency)
    stored = _processed(cfg) / "graph.txt"
    if stored.exists():
        return prep.parse_edge_list(stored.read_text())
    return prep.default_sensor_graph()


def _checkpoint_path(cfg, args):
    return Path(args.checkpoint) if args.checkpoint else cfg.out / "checkpoint.cgg"


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig, args):
    out = cfg.out / "data"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    _echo_config(cfg, "synth")
    recs = gaitdata.generate_synthetic(cfg.synth)
    manifest = gaitdata.write_synthetic(recs, out)
    counts = {"CO": sum(r.label == 0 for r in recs), "PD": sum(r.label == 1 for r in recs)}
    print(json.dumps({"manifest": str(manifest), "subjects": counts}))
    return 0


def cmd_preprocess(cfg: RunConfig, args):
    root, manifest = _data_paths(cfg)
    _require(root, manifest, cfg.preprocess.adjacency)
    graph = _graph(cfg) if cfg.preprocess.adjacency else prep.default_sensor_graph()
    _echo_config(cfg, "preprocess")
    recs = gaitdata.load_catalog(root, manifest)
    pc = cfg.preprocess
    result = prep.build_dataset(recs, window=pc.window, ratios=pc.ratios, seed=pc.seed,
                                mode=pc.split_mode, normalize_on=pc.normalize_on)
    out = _processed(cfg)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(SPLITS, (result.split.train, result.split.val, result.split.test)):
        prep.write_samples(part, out / f"{name}.jsonl")
    _write_json(out / "norm_stats.json", result.stats.to_dict())
    _write_json(out / "split.json", result.split.membership())
    _write_json(out / "summary.json", result.counts)
    (out / "graph.txt").write_text(graph.to_edge_list())
    print(json.dumps(result.counts))
    return 0


def _load_split(cfg, names=SPLITS):
    out = _processed(cfg)
    _require(*(out / f"{n}.jsonl" for n in names))
    return {n: prep.read_samples(out / f"{n}.jsonl") for n in names}


def cmd_train(cfg: RunConfig, args):
    out = _processed(cfg)
    _require(out / "train.jsonl", out / "val.jsonl", out / "norm_stats.json")
    graph = _graph(cfg)
    _echo_config(cfg, "train")
    parts = _load_split(cfg, ("train", "val"))
    stats = prep.NormStats.from_dict(json.loads((out / "norm_stats.json").read_text()))
    split = prep.DatasetSplit(parts["train"], parts["val"], [])
    params = init_params(cfg.model)
    log.info("model has %d parameters", param_count(params))
    best = {"acc": -1.0}

    def on_epoch_end(rec, p, state):
        if rec.val_accuracy > best["acc"]:
            best["acc"] = rec.val_accuracy
            save_checkpoint(p, cfg.out / "best.cgg", stats, graph, cfg.train,
                            meta={"epoch": rec.epoch})
        every = cfg.train.checkpoint_every
        if every and rec.epoch % every == 0:
            save_checkpoint(p, cfg.out / "checkpoints" / f"epoch_{rec.epoch:03d}.cgg",
                            stats, graph, cfg.train, meta={"epoch": rec.epoch})

    try:
        params, history = train(params, split, graph, cfg.train, on_epoch_end=on_epoch_end)
    except TrainingDiverged as exc:
        save_checkpoint(exc.params, cfg.out / "checkpoint.cgg", stats, graph, cfg.train,
                        meta={"epoch": len(exc.history), "diverged": True})
        (cfg.out / "history.json").write_text(exc.history.to_json())
        log.error("training diverged: %s (last good parameters saved)", exc)
        return 2
    save_checkpoint(params, cfg.out / "checkpoint.cgg", stats, graph, cfg.train,
                    meta={"epoch": len(history)})
    (cfg.out / "history.json").write_text(history.to_json())
    last = history.records[-1] if history.records else None
    print(json.dumps({"epochs": len(history), "final": asdict(last) if last else None,
                      "best_epoch": history.best_epoch()}))
    return 0


def _load_model(cfg, args):
    path = _checkpoint_path(cfg, args)
    _require(path)
    return load_checkpoint(path, expected_config=cfg.model)


def cmd_evaluate(cfg: RunConfig, args):
    split = cfg.evaluate.split
    _require(_checkpoint_path(cfg, args), _processed(cfg) / f"{split}.jsonl")
    _echo_config(cfg, "evaluate")
    ckpt = _load_model(cfg, args)
    samples = _load_split(cfg, (split,))[split]
    report = evaluate(ckpt.params, samples, ckpt.graph, cfg.evaluate.threshold,
                      cfg.evaluate.batch_size)
    _write_json(cfg.out / f"metrics_{split}.json", report.to_dict())
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "roc"}))
    return 0


def cmd_explain(cfg: RunConfig, args):
    split = cfg.explain.split
    _require(_checkpoint_path(cfg, args), _processed(cfg) / f"{split}.jsonl")
    _echo_config(cfg, "explain")
    ckpt = _load_model(cfg, args)
    samples = _load_split(cfg, (split,))[split][:cfg.explain.max_samples]
    if not samples:
        raise ConfigError(f"split {split!r} has no samples to explain")
    items = node_importance(ckpt.params, samples, ckpt.graph, cfg.explain.with_embeddings)
    with open(cfg.out / "importance.jsonl", "w") as fh:
        for it in items:
            fh.write(json.dumps(it.to_dict(cfg.explain.with_embeddings)) + "\n")
    groups = group_importance(items)
    _write_json(cfg.out / "importance_groups.json", groups)
    print(json.dumps({"explained": len(items), "groups": groups}))
    return 0


def cmd_gradcheck(cfg: RunConfig, args):
    _echo_config(cfg, "gradcheck")
    gc = cfg.gradcheck
    reports = gradcheck.run_suite(range(gc.seeds), list(gc.layers) if gc.layers else None)
    (cfg.out / "gradcheck.json").write_text(gradcheck.reports_to_json(reports) + "\n")
    failed = [r for r in reports if not r.passed]
    summary = {}
    for r in reports:
        summary[r.layer] = max(summary.get(r.layer, 0.0), r.max_rel_err)
    print(json.dumps({"max_rel_err": summary, "failed": len(failed)}))
    return 1 if failed else 0


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="cgg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="output directory (overrides paths.out_dir)")
        p.add_argument("--checkpoint", help="checkpoint file (default <out>/checkpoint.cgg)")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--adjacency", help="edge-list file replacing the default sensor graph")
        p.add_argument("--split-mode", choices=("sample", "subject"))
        p.add_argument("--threshold", type=float, help="decision threshold for PD")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CGG_LOG", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_flags(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, gaitdata.CatalogError, gaitdata.ParseError,
            prep.GraphValidationError, CheckpointError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""``diffkillr`` command line: one config schema, one run directory per invocation.

Every command writes ``config.yaml`` (the resolved config), ``seeds.json``,
``checkpoints.json`` and ``metrics.json`` into
``<output.dir>/<timestamp>-<config hash>-<command>/``.  ``metrics.json`` holds
only seed-determined values, so reruns reproduce it byte for byte; wall-clock
timings go to ``timing.json``.

Config overrides come from ``DIFFKILLR_<SECTION>__<KEY>`` environment
variables (values parsed as YAML), applied after the config file.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from . import benchmarks
from .diffeo_gen import AugmentationConfig, save_warp, warp_array
from .errors import ConfigError, DimensionError, FormatError, NumericError, ParameterError, TrainingError
from .invariant_net import EncoderModel, InvariantTrainConfig, embed_bank, match, train_invariant
from .mapping_net import ARCHITECTURES, MapperModel, MappingTrainConfig, register, train_mapping
from .patch_bank import (BankEntry, CellBank, CellPatch, WholeImage, build_augmented_bank, extract_labels,
                         extract_patch, load_bank, read_centroids, read_image, sample_background, save_bank,
                         select_archetypes, write_image)
from .pipeline import Detection, PipelineConfig, predict_orientation, scan_count, segment_few_shot
from .rng import substream_seed
from .synth import default_archetypes, gen_scene
from .theory import density_study, rotation_queries, spearman

log = logging.getLogger("diffkillr")

ENV_PREFIX = "DIFFKILLR_"
EXIT_USAGE, EXIT_IO, EXIT_RUNTIME = 2, 3, 4


def _train_defaults(cls) -> dict:
    d = cls().to_dict()
    for k in ("seed", "augmentation"):
        d.pop(k, None)
    return d


def default_config() -> Dict[str, Dict[str, Any]]:
    pipe = PipelineConfig().to_dict()
    for k in ("seed", "workers"):
        pipe.pop(k)
    return {
        "data": {"image": None, "centroids": None, "instances": None, "shapes": "default", "archetypes": 4,
                 "patch_size": 32, "annotation_fraction": 0.1, "queries": 40},
        "bank": {"path": None, "m": 16, "background": 16},
        "augmentation": AugmentationConfig().to_dict(),
        "invariant_net": {**_train_defaults(InvariantTrainConfig), "checkpoint": None},
        "mapping_net": {**_train_defaults(MappingTrainConfig), "checkpoint": None},
        "pipeline": pipe,
        "synth": {"architectures": list(ARCHITECTURES), "pairs": 50},
        "theory": {"ms": [2, 4, 8, 16], "queries": 256, "seeds": 1},
        "output": {"dir": "runs"},
    }


# --------------------------------------------------------------------------
# Config handling
# --------------------------------------------------------------------------


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and k != "kinds":
            if not isinstance(v, dict):
                raise ConfigError(f"config section {where + k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: Optional[str], environ: Optional[Dict[str, str]] = None) -> dict:
    """Defaults, then the YAML/JSON file, then environment overrides; unknown keys are errors."""
    cfg = default_config()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping of sections")
        cfg = _merge(cfg, doc)
    environ = os.environ if environ is None else environ
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        if len(parts) != 2:
            raise ConfigError(f"environment override {key} must look like {ENV_PREFIX}SECTION__KEY")
        cfg = _merge(cfg, {parts[0]: {parts[1]: yaml.safe_load(environ[key])}})
    return cfg


def config_hash(cfg: dict, seed: int) -> str:
    blob = json.dumps({"config": cfg, "seed": seed}, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _dataclass_from(cls, section: dict, **extra):
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in section.items() if k in names}
    kw.update(extra)
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _round(obj):
    """Canonical floats for byte-stable JSON."""
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if not math.isfinite(v) else float(f"{v:.12g}")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


# --------------------------------------------------------------------------
# Run context
# --------------------------------------------------------------------------


class Run:
    def __init__(self, command: str, cfg: dict, seed: int, workers: int, out: Optional[str]):
        self.command, self.cfg, self.seed, self.workers = command, cfg, seed, workers
        self.hash = config_hash(cfg, seed)
        root = Path(out or cfg["output"]["dir"])
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
        base = root / f"{stamp}-{self.hash}-{command}"
        path, k = base, 1
        while path.exists():
            path = Path(f"{base}-{k}")
            k += 1
        path.mkdir(parents=True)
        self.dir = path
        self.checkpoints: Dict[str, str] = {}
        self.timing: Dict[str, float] = {}
        (path / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
        self._write_json("seeds.json", {"root_seed": seed, "config_hash": self.hash, "substreams": {
            name: substream_seed(seed, name) for name in ("bank", "invariant", "mapping", "augment", "background",
                                                          "pipeline", "synth", "theory")}})

    def sub(self, name: str) -> int:
        return substream_seed(self.seed, name)

    def _write_json(self, name: str, obj) -> None:
        (self.dir / name).write_text(json.dumps(_round(obj), indent=2, sort_keys=True) + "\n")

    def record_checkpoint(self, name: str, digest: str) -> None:
        self.checkpoints[name] = digest

    def finish(self, metrics: dict) -> Path:
        self._write_json("metrics.json", metrics)
        self._write_json("checkpoints.json", self.checkpoints)
        self._write_json("timing.json", self.timing)
        return self.dir


def _required(value, what: str) -> str:
    if not value:
        raise ConfigError(f"missing {what}")
    return value


def _load_encoder(run: Run, path: Optional[str]) -> EncoderModel:
    path = _required(path or run.cfg["invariant_net"]["checkpoint"], "encoder checkpoint (--encoder)")
    if not Path(path).exists():
        raise FileNotFoundError(f"encoder checkpoint {path} not found")
    model = EncoderModel.load(path)
    run.record_checkpoint("encoder", model.digest())
    return model


def _load_mapper(run: Run, path: Optional[str]) -> MapperModel:
    path = _required(path or run.cfg["mapping_net"]["checkpoint"], "mapper checkpoint (--mapper)")
    if not Path(path).exists():
        raise FileNotFoundError(f"mapper checkpoint {path} not found")
    model = MapperModel.load(path)
    run.record_checkpoint("mapper", model.digest())
    return model


def _load_bank(run: Run, path: Optional[str]) -> CellBank:
    path = _required(path or run.cfg["bank"]["path"], "bank directory (--bank)")
    if not Path(path).is_dir():
        raise FileNotFoundError(f"bank directory {path} not found")
    bank = load_bank(path)
    manifest = (Path(path) / "manifest.json").read_bytes()
    run.record_checkpoint("bank", hashlib.sha256(manifest).hexdigest()[:16])
    return bank


def _read_labels(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise FormatError(f"{path}: instance labels must be a single-channel image")
    return arr.astype(np.int64)


def _write_labels(path: Path, labels: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(labels, np.uint16)).save(path)


def _whole_image(run: Run, args) -> WholeImage:
    data = run.cfg["data"]
    image = _required(getattr(args, "image", None) or data["image"], "input image (--image)")
    cents = getattr(args, "centroids", None) or data["centroids"]
    inst = getattr(args, "instances", None) or data["instances"]
    return WholeImage(read_image(image), None if not cents else read_centroids(cents),
                      None if not inst else _read_labels(inst))


def _shapes(cfg: dict):
    data = cfg["data"]
    if data["shapes"] == "ellipses":
        return benchmarks.ellipse_archetypes()
    if data["shapes"] != "default":
        raise ConfigError(f"data.shapes must be 'default' or 'ellipses', got {data['shapes']!r}")
    return default_archetypes(int(data["archetypes"]))


def _pipeline_cfg(run: Run) -> PipelineConfig:
    return _dataclass_from(PipelineConfig, run.cfg["pipeline"], seed=run.sub("pipeline"), workers=run.workers)


def _write_csv(path: Path, header: List[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, (float, np.floating)) else str(v)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_bank_build(run: Run, args) -> dict:
    data, size = run.cfg["data"], int(run.cfg["data"]["patch_size"])
    n_bg = int(run.cfg["bank"]["background"])
    if getattr(args, "image", None) or data["image"]:
        img = _whole_image(run, args)
        if img.centroids is None or img.instances is None:
            raise ConfigError("building a bank from an image needs --centroids and --instances")
        ids = [int(img.instances[int(round(y)), int(round(x))]) for x, y in img.centroids]
        chosen = select_archetypes(len(ids), float(data["annotation_fraction"]), run.sub("bank"))
        entries = [BankEntry(extract_patch(img, img.centroids[k], size, f"cell:{k}"),
                             extract_labels(img.instances, ids[k], img.centroids[k], size)) for k in chosen]
        background = sample_background(img, size, n_bg, run.sub("background"))
    else:
        shapes = _shapes(run.cfg)
        entries = benchmarks.archetype_entries(shapes, size)
        scene = gen_scene(shapes, 25, "random", seed=run.sub("background"), size=size)
        background = sample_background(scene.image, size, n_bg, run.sub("background"))
    bank = CellBank(entries, background=background)
    save_bank(bank, run.dir / "bank")
    return {"archetypes": len(entries), "background": len(background), "patch_size": size}


def cmd_augment(run: Run, args) -> dict:
    bank = _load_bank(run, args.bank)
    aug = AugmentationConfig.from_dict(run.cfg["augmentation"])
    out = build_augmented_bank(bank, int(run.cfg["bank"]["m"]), aug, seed=run.sub("augment"))
    save_bank(out, run.dir / "bank")
    return {"archetypes": out.n, "records": len(out.augmented), "m": out.augmentations_per_entry}


def cmd_train_invariant(run: Run, args) -> dict:
    bank = _load_bank(run, args.bank)
    cfg = _dataclass_from(InvariantTrainConfig, run.cfg["invariant_net"], seed=run.sub("invariant"),
                          augmentation=AugmentationConfig.from_dict(run.cfg["augmentation"]))
    start = time.perf_counter()
    model = train_invariant(bank, cfg)
    run.timing["train_seconds"] = time.perf_counter() - start
    model.save(run.dir / "encoder.pt")
    save_bank(embed_bank(model, bank), run.dir / "bank")
    run.record_checkpoint("encoder", model.digest())
    return {"epochs": cfg.epochs, "final_loss": model.loss_history[-1] if model.loss_history else None}


def cmd_train_mapping(run: Run, args) -> dict:
    bank = _load_bank(run, args.bank)
    cfg = _dataclass_from(MappingTrainConfig, run.cfg["mapping_net"], seed=run.sub("mapping"))
    start = time.perf_counter()
    model = train_mapping(bank, cfg)
    run.timing["train_seconds"] = time.perf_counter() - start
    model.save(run.dir / "mapper.pt")
    run.record_checkpoint("mapper", model.digest())
    cyc = model.fingerprint.get("cycle_history") or [None]
    return {"epochs": cfg.epochs, "architecture": cfg.architecture,
            "final_loss": model.loss_history[-1] if model.loss_history else None, "final_cycle": cyc[-1]}


def cmd_match(run: Run, args) -> dict:
    enc, bank = _load_encoder(run, args.encoder), _load_bank(run, args.bank)
    if not args.patch:
        raise ConfigError("match needs at least one --patch image")
    rows = []
    for p in args.patch:
        m = match(enc, CellPatch(read_image(p), source_id=Path(p).name), bank)
        rows.append([Path(p).name, m.j, m.i, m.l2_distance, m.cosine_distance])
    _write_csv(run.dir / "matches.csv", ["query", "archetype", "augmentation", "l2_distance", "cosine_distance"],
               [[_fmt(v) for v in r] for r in rows])
    return {"matches": [{"query": r[0], "archetype": r[1], "augmentation": r[2], "l2_distance": r[3],
                         "cosine_distance": r[4]} for r in rows]}


def cmd_register(run: Run, args) -> dict:
    mapper = _load_mapper(run, args.mapper)
    fixed = CellPatch(read_image(_required(args.fixed, "--fixed image")))
    moving = CellPatch(read_image(_required(args.moving, "--moving image")))
    res = register(mapper, fixed, moving)
    save_warp(run.dir / "forward.warp", res.forward)
    save_warp(run.dir / "inverse.warp", res.inverse)
    write_image(run.dir / "registered.png", warp_array(res.forward, moving.intensities))
    return res.to_dict()


def cmd_count(run: Run, args) -> dict:
    enc, bank = _load_encoder(run, args.encoder), _load_bank(run, args.bank)
    img = _whole_image(run, args)
    res = scan_count(img, enc, bank, _pipeline_cfg(run))
    _write_csv(run.dir / "detections.csv", ["x", "y", "score", "archetype"],
               [[_fmt(d.center[0]), _fmt(d.center[1]), _fmt(d.score), d.archetype] for d in res.detections])
    return res.metrics()


def cmd_orient(run: Run, args) -> dict:
    enc, mapper, bank = _load_encoder(run, args.encoder), _load_mapper(run, args.mapper), _load_bank(run, args.bank)
    size = bank.patch_size
    if getattr(args, "image", None) or run.cfg["data"]["image"]:
        img = _whole_image(run, args)
        if img.centroids is None:
            raise ConfigError("orient on an image needs --centroids")
        queries, truths = [extract_patch(img, c, size) for c in img.centroids], None
        names = [f"{x:g},{y:g}" for x, y in img.centroids]
    else:
        queries, truths = benchmarks.orientation_queries(benchmarks.ellipse_archetypes(),
                                                         int(run.cfg["data"]["queries"]), run.sub("synth"), size)
        names = [str(k) for k in range(len(queries))]
    res = predict_orientation(queries, enc, mapper, bank, _pipeline_cfg(run), truths=truths)
    _write_csv(run.dir / "orientations.csv", ["cell", "angle_deg", "baseline_angle_deg"],
               [[n, _fmt(math.degrees(a)), _fmt(math.degrees(b))]
                for n, a, b in zip(names, res.angles, res.baseline_angles)])
    return {"cells": len(queries), **res.metrics}


def cmd_segment(run: Run, args) -> dict:
    enc, mapper, bank = _load_encoder(run, args.encoder), _load_mapper(run, args.mapper), _load_bank(run, args.bank)
    img = _whole_image(run, args)
    cfg = _pipeline_cfg(run)
    dets = None
    if args.use_centroids:
        if img.centroids is None:
            raise ConfigError("--use-centroids needs --centroids")
        dets = [Detection((float(x), float(y)), 1.0, -1) for x, y in img.centroids]
    res = segment_few_shot(img, enc, mapper, bank, cfg, dets)
    _write_labels(run.dir / "instances.png", res.instances)
    _write_csv(run.dir / "detections.csv", ["x", "y", "score", "archetype"],
               [[_fmt(d.center[0]), _fmt(d.center[1]), _fmt(d.score), d.archetype] for d in res.detections])
    return {"instances": int(res.instances.max()), **res.metrics}


def cmd_synth_bench(run: Run, args) -> dict:
    syn = run.cfg["synth"]
    shapes = _shapes(run.cfg)
    size = int(run.cfg["data"]["patch_size"])
    bank = build_augmented_bank(CellBank(benchmarks.archetype_entries(shapes, size)), int(run.cfg["bank"]["m"]),
                                AugmentationConfig.from_dict(run.cfg["augmentation"]), seed=run.sub("augment"))
    pairs = benchmarks.registration_pairs(shapes, int(syn["pairs"]), run.sub("synth"), size)
    archs = list(syn["architectures"])
    unknown = set(archs) - set(ARCHITECTURES)
    if unknown:
        raise ConfigError(f"unknown architectures {sorted(unknown)}")
    table, metrics = {}, {}
    for arch in archs:
        if args.mapper and len(archs) == 1:
            mapper = _load_mapper(run, args.mapper)
        else:
            cfg = _dataclass_from(MappingTrainConfig, run.cfg["mapping_net"], seed=run.sub("mapping"),
                                  architecture=arch)
            mapper = train_mapping(bank, cfg)
            mapper.save(run.dir / f"mapper_{arch}.pt")
            run.record_checkpoint(f"mapper_{arch}", mapper.digest())
        values = benchmarks.evaluate_registration(mapper, pairs)
        summary = benchmarks.summarize(values)
        table[arch] = summary
        run.timing[f"{arch}_runtime_ms"] = summary["runtime_ms"]["mean"]
        metrics[arch] = {k: v for k, v in summary.items() if k != "runtime_ms"}
        metrics[arch]["beats_identity_fraction"] = float(np.mean(values["l1_image"] < values["l1_image_identity"]))
    rows = []
    for name in benchmarks.TABLE_METRICS + ("runtime_ms",):
        rows.append([name] + [f"{table[a][name]['mean']:.6g} +- {table[a][name]['std']:.6g}" for a in archs])
    _write_csv(run.dir / "table.csv", ["metric"] + archs, rows)
    return {"pairs": len(pairs), "architectures": metrics}


def cmd_verify_theory(run: Run, args) -> dict:
    th = run.cfg["theory"]
    shapes = _shapes(run.cfg)
    size = int(run.cfg["data"]["patch_size"])
    entries = benchmarks.archetype_entries(shapes, size)
    ms = [int(m) for m in th["ms"]]
    reports = []
    for s in range(int(th["seeds"])):
        seed = substream_seed(run.seed, f"theory-{s}")
        if args.encoder:
            enc = _load_encoder(run, args.encoder)
        else:
            train_bank = build_augmented_bank(CellBank(entries), int(run.cfg["bank"]["m"]),
                                              AugmentationConfig.from_dict(run.cfg["augmentation"]), seed=seed)
            cfg = _dataclass_from(InvariantTrainConfig, run.cfg["invariant_net"], seed=seed,
                                  augmentation=AugmentationConfig.from_dict(run.cfg["augmentation"]))
            enc = train_invariant(train_bank, cfg)
            run.record_checkpoint(f"encoder_{s}", enc.digest())
        queries = rotation_queries(entries, int(th["queries"]), seed)
        reports.append(density_study(enc, entries, queries, ms, seed=seed))
    eps = [p["epsilon_star"] for r in reports for p in r.per_m]
    med = [p["median_error"] for r in reports for p in r.per_m]
    last = reports[-1]
    return {**last.summary(), "seeds": [r.summary() for r in reports], "pooled_spearman": spearman(eps, med)}


HELP = {
    "bank-build": "annotate archetypes from an image (or synthetic shapes) into a bank",
    "augment": "add m deformed records per archetype",
    "train-invariant": "train the deformation-invariant encoder and embed the bank",
    "train-mapping": "train the registration network on bank records",
    "match": "nearest bank record for query patches",
    "register": "warp fields between a fixed and a moving patch",
    "count": "scan an image, detect and count cells",
    "orient": "orientation transfer (synthetic ellipses when no image is given)",
    "segment": "few-shot instance segmentation of an image",
    "synth-bench": "registration table on held-out synthetic pairs",
    "verify-theory": "covering radius vs matching error over nested banks",
}

COMMANDS = {
    "bank-build": cmd_bank_build,
    "augment": cmd_augment,
    "train-invariant": cmd_train_invariant,
    "train-mapping": cmd_train_mapping,
    "match": cmd_match,
    "register": cmd_register,
    "count": cmd_count,
    "orient": cmd_orient,
    "segment": cmd_segment,
    "synth-bench": cmd_synth_bench,
    "verify-theory": cmd_verify_theory,
}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"error[usage]: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    common.add_argument("--workers", type=int, default=1, help="worker threads for scan/registration fan-out")
    common.add_argument("--out", help="parent directory for the run directory (default: output.dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="diffkillr", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    model_args = {
        "bank": lambda p: p.add_argument("--bank", help="bank directory"),
        "encoder": lambda p: p.add_argument("--encoder", help="invariant-net checkpoint (.pt)"),
        "mapper": lambda p: p.add_argument("--mapper", help="mapping-net checkpoint (.pt)"),
        "image": lambda p: (p.add_argument("--image"), p.add_argument("--centroids", help="CSV with x,y header"),
                            p.add_argument("--instances", help="indexed-label PNG")),
    }
    needs = {
        "bank-build": ["image"],
        "augment": ["bank"],
        "train-invariant": ["bank"],
        "train-mapping": ["bank"],
        "match": ["bank", "encoder"],
        "register": ["mapper"],
        "count": ["bank", "encoder", "image"],
        "orient": ["bank", "encoder", "mapper", "image"],
        "segment": ["bank", "encoder", "mapper", "image"],
        "synth-bench": ["mapper"],
        "verify-theory": ["encoder"],
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HELP[name])
        for n in needs[name]:
            model_args[n](p)
        if name == "match":
            p.add_argument("--patch", action="append", help="query patch image (repeatable)")
        if name == "register":
            p.add_argument("--fixed")
            p.add_argument("--moving")
        if name == "segment":
            p.add_argument("--use-centroids", action="store_true", help="segment at the given centroids, no scan")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config)
        run = Run(args.command, cfg, args.seed, args.workers, args.out)
        metrics = COMMANDS[args.command](run, args)
        out = run.finish(metrics)
    except (ConfigError, ParameterError, DimensionError) as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, FormatError, OSError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, NumericError, FloatingPointError) as exc:
        print(f"error[runtime]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())

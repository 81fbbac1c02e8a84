"""Pipeline driver: subcommands over a JSON config with seeded determinism.

Usage: sketchforge <subcommand> --config cfg.json [--seed N] [--workers N]
[--set key.path=value ...]

Subcommands: sketch-gen (instance sketches from an image manifest plus
masks), curate-pretrain (head/tail pretraining selection), mix-build and
mix-audit (per-class sketch pools and their conformance report), instr-build
(instruction corpus), gallery-build (retrieval benchmark spec), score
(metrics over prediction files), report (merge score reports into tables).

The config is a JSON object with keys seed, workers, paths, params; --seed
and --workers override their fields, --set overrides any dotted path. Every
run writes a manifest with the config snapshot and content digests of inputs
and outputs. Worker count is excluded from snapshots and headers: it is a
throughput knob and output bytes never depend on it.

Exit codes: 0 success, 2 validation failure (machine-readable JSON on
stderr), 3 completed with a deficiency (shortfall or audit violations;
partial outputs carry a .partial suffix), 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .curation import (
    PoolSpec,
    assemble_class_pool,
    audit_pool,
    class_histogram,
    sample_pretrain_set,
)
from .datamodel import (
    BoundingBox,
    ImageRecord,
    InstructionSample,
    PredictionRecord,
    SketchRecord,
    SketchSource,
    TaskKind,
    parse_box_list,
    parse_count_answer,
    parse_yes_probability,
)
from .errors import SketchForgeError, UnparseableCountError, ValidationError
from .evalmetrics import (
    DetectionInstance,
    GallerySpec,
    MetricReport,
    build_sbir_gallery,
    counting_accuracy,
    detection_accuracy,
    mean_average_precision,
    rank_gallery,
    sbir_acc_at_k,
)
from .instructions import (
    CompositionSpec,
    CorpusSources,
    PromptPool,
    build_finetune_corpus,
    parse_prompt_pool,
)
from .sketchgen import (
    DEFAULT_CANVAS,
    DEFAULT_EPSILON,
    DEFAULT_GRADIENT_RADIUS,
    DEFAULT_K,
    DEFAULT_SIGMA,
    MaskRaster,
    StylizerKind,
    StylizerSpec,
    generate_instance_sketch,
)
from .util import (
    atomic_write_text,
    parallel_map,
    read_jsonl,
    sha256_file,
    write_jsonl,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DEFICIENT = 3
EXIT_INTERNAL = 4

CONFIG_DIR_ENV = "SKETCHFORGE_CONFIG_DIR"
PARTIAL_SUFFIX = ".partial"
MAX_SEED = 2**63

REPORT_DECIMALS = 1
# canonical column order for report tables; unknown metrics follow sorted
METRIC_ORDER = (
    "Acc",
    "Acc@0.5",
    "Acc@1",
    "Acc@5",
    "Acc@10",
    "Acc_S",
    "Acc_M",
    "Acc_L",
    "mAP",
    "mAP@0.5",
    "mAP_S",
    "mAP_M",
    "mAP_L",
)


@dataclass
class RunConfig:
    """Declarative run settings: seed, worker count, paths, stage params."""

    seed: int = 0
    workers: int = 1
    paths: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ValidationError(f"seed must be an integer, got {self.seed!r}")
        if not 0 <= self.seed < MAX_SEED:
            raise ValidationError(f"seed must be in [0, 2^63), got {self.seed}")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers!r}")
        if not isinstance(self.paths, dict) or not isinstance(self.params, dict):
            raise ValidationError("paths and params must be JSON objects")

    def snapshot(self) -> dict:
        # workers excluded: throughput only, never part of output identity
        return {
            "seed": self.seed,
            "paths": {k: str(v) for k, v in sorted(self.paths.items())},
            "params": self.params,
        }


def resolve_config_path(name: str) -> Path:
    p = Path(name)
    if p.is_file():
        return p
    base = os.environ.get(CONFIG_DIR_ENV)
    if base and not p.is_absolute():
        q = Path(base) / name
        if q.is_file():
            return q
    hint = f" (also tried ${CONFIG_DIR_ENV}={base})" if base else ""
    raise ValidationError(f"config file {name} not found{hint}")


def apply_override(doc: dict, item: str) -> None:
    """Apply one --set override, e.g. params.canvas=256 or paths.out=x.jsonl."""
    if "=" not in item:
        raise ValidationError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    parts = key.split(".")
    try:  # JSON literal when it parses, bare string otherwise
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValidationError(f"override {item!r} descends into a non-object")
    node[parts[-1]] = value


def load_config(
    name: str,
    seed: int | None = None,
    workers: int | None = None,
    overrides: tuple[str, ...] = (),
) -> RunConfig:
    path = resolve_config_path(name)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValidationError(f"config {path} is not valid JSON: {err}")
    if not isinstance(doc, dict):
        raise ValidationError(f"config {path} must be a JSON object")
    unknown = set(doc) - {"seed", "workers", "paths", "params"}
    if unknown:
        raise ValidationError(f"config {path}: unknown keys {sorted(unknown)}")
    for item in overrides:
        apply_override(doc, item)
    if seed is not None:
        doc["seed"] = seed
    if workers is not None:
        doc["workers"] = workers
    return RunConfig(
        seed=doc.get("seed", 0),
        workers=doc.get("workers", 1),
        paths=doc.get("paths", {}),
        params=doc.get("params", {}),
    )


def _input_path(config: RunConfig, key: str, directory: bool = False) -> Path:
    raw = config.paths.get(key)
    if raw is None:
        raise ValidationError(f"config is missing required path {key!r}")
    p = Path(raw)
    if directory:
        if not p.is_dir():
            raise ValidationError(f"paths.{key} {p} is not a directory")
    elif not p.is_file():
        raise ValidationError(f"paths.{key} {p} is not a file")
    return p


def _optional_input(
    config: RunConfig, key: str, directory: bool = False
) -> Path | None:
    if config.paths.get(key) is None:
        return None
    return _input_path(config, key, directory)


def _output_path(config: RunConfig, key: str) -> Path:
    raw = config.paths.get(key)
    if raw is None:
        raise ValidationError(f"config is missing required path {key!r}")
    p = Path(raw)
    if p.parent:
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _output_dir(config: RunConfig, key: str) -> Path:
    raw = config.paths.get(key)
    if raw is None:
        raise ValidationError(f"config is missing required path {key!r}")
    p = Path(raw)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _param(config: RunConfig, key: str, default):
    return config.params.get(key, default)


def _int_param(config: RunConfig, key: str, default: int | None) -> int:
    value = config.params.get(key, default)
    if value is None:
        raise ValidationError(f"config is missing required param {key!r}")
    if not isinstance(value, int) or isinstance(value, bool):
        raise ValidationError(f"param {key} must be an integer, got {value!r}")
    return value


def _float_param(config: RunConfig, key: str, default: float) -> float:
    value = config.params.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"param {key} must be a number, got {value!r}")
    return float(value)


def _header(config: RunConfig, subcommand: str) -> dict:
    snap = config.snapshot()
    return {
        "tool": "sketchforge",
        "version": __version__,
        "subcommand": subcommand,
        "seed": snap["seed"],
        "paths": snap["paths"],
        "params": snap["params"],
    }


def _dump_json(path: Path, doc: dict) -> None:
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _write_manifest(
    config: RunConfig,
    subcommand: str,
    inputs: dict[str, Path],
    outputs: dict[str, Path],
    summary: dict,
) -> Path:
    main_out = next(iter(outputs.values()))
    manifest = Path(config.paths.get("manifest") or f"{main_out}.manifest.json")
    doc = {
        "tool": "sketchforge",
        "version": __version__,
        "subcommand": subcommand,
        "config": config.snapshot(),
        "inputs": {
            k: {"path": str(p), "sha256": sha256_file(p) if p.is_file() else "(directory)"}
            for k, p in sorted(inputs.items())
        },
        "outputs": {
            k: {"path": str(p), "sha256": sha256_file(p) if p.is_file() else "(directory)"}
            for k, p in sorted(outputs.items())
        },
        "summary": summary,
    }
    _dump_json(manifest, doc)
    return manifest


def _partial(path: Path, deficient: bool) -> Path:
    return Path(str(path) + PARTIAL_SUFFIX) if deficient else path


def _parse_records(path: Path, parse):
    """Parse JSONL records, converting shape errors to validation failures."""
    out = []
    for i, d in enumerate(read_jsonl(path)):
        try:
            out.append(parse(d))
        except SketchForgeError:
            raise
        except (KeyError, ValueError, TypeError) as err:
            raise ValidationError(f"{path}, record {i}: {err}")
    return out


def _load_images(path: Path) -> list[ImageRecord]:
    return _parse_records(path, ImageRecord.from_json_dict)


def _load_sketches(path: Path) -> list[SketchRecord]:
    return _parse_records(path, SketchRecord.from_json_dict)


def _load_samples(path: Path) -> list[InstructionSample]:
    return _parse_records(path, InstructionSample.from_json_dict)


def _load_predictions(path: Path) -> dict[str, PredictionRecord]:
    out: dict[str, PredictionRecord] = {}
    for rec in _parse_records(path, PredictionRecord.from_json_dict):
        if rec.sample_id in out:
            raise ValidationError(f"duplicate prediction for sample {rec.sample_id!r}")
        out[rec.sample_id] = rec
    return out


def _pool_by_class(sketches: list[SketchRecord]) -> dict[int, list[SketchRecord]]:
    pool: dict[int, list[SketchRecord]] = {}
    for rec in sketches:
        pool.setdefault(rec.class_id, []).append(rec)
    return pool


def cmd_sketch_gen(config: RunConfig) -> tuple[int, dict]:
    images_manifest = _input_path(config, "images")
    images_dir = _input_path(config, "images_dir", directory=True)
    masks_dir = _input_path(config, "masks_dir", directory=True)
    out_dir = _output_dir(config, "out_dir")
    out = _output_path(config, "out")

    try:
        kind = StylizerKind(_param(config, "stylizer", StylizerKind.NATIVE_XDOG.value))
        source = SketchSource(_param(config, "source", SketchSource.SKETCHVCL_O365.value))
    except ValueError as err:
        raise ValidationError(str(err))
    spec = StylizerSpec(
        kind=kind,
        sigma=_float_param(config, "sigma", DEFAULT_SIGMA),
        k=_float_param(config, "k", DEFAULT_K),
        epsilon=_float_param(config, "epsilon", DEFAULT_EPSILON),
        raster_dir=_param(config, "raster_dir", None),
    )
    canvas = _int_param(config, "canvas", DEFAULT_CANVAS)
    gradient_radius = _int_param(config, "gradient_radius", DEFAULT_GRADIENT_RADIUS)

    records = _load_images(images_manifest)
    tasks = []
    missing_image = 0
    missing_mask = 0
    for rec in records:
        image_path = images_dir / f"{rec.id}.png"
        if not image_path.is_file():
            missing_image += 1
            continue
        for idx in range(len(rec.annotations)):
            mask_path = masks_dir / f"{rec.id}--{idx}.png"
            if mask_path.is_file():
                tasks.append((rec, idx, image_path, mask_path))
            else:
                missing_mask += 1

    def one(task) -> SketchRecord | str:
        rec, idx, image_path, mask_path = task
        image = np.asarray(Image.open(image_path).convert("RGB"))
        mask = MaskRaster.from_array(np.asarray(Image.open(mask_path).convert("L")))
        try:
            return generate_instance_sketch(
                rec,
                rec.annotations[idx],
                mask,
                image,
                str(out_dir),
                f"{rec.id}--{idx}",
                spec=spec,
                canvas=canvas,
                gradient_radius=gradient_radius,
                source=source,
            )
        except SketchForgeError as err:
            return f"{rec.id}--{idx}: {err}"

    results = parallel_map(one, tasks, config.workers)
    produced = [r for r in results if isinstance(r, SketchRecord)]
    rejected = [r for r in results if isinstance(r, str)]
    if not produced:
        raise ValidationError(
            "no sketches generated: "
            f"{missing_image} images and {missing_mask} masks missing, "
            f"{len(rejected)} rejected"
        )

    skipped = missing_image + missing_mask + len(rejected)
    deficient = skipped > 0
    out = _partial(out, deficient)
    write_jsonl(out, (r.to_json_dict() for r in produced), header=_header(config, "sketch-gen"))
    summary = {
        "produced": len(produced),
        "missing_image_files": missing_image,
        "missing_mask_files": missing_mask,
        "rejected": sorted(rejected),
    }
    _write_manifest(
        config,
        "sketch-gen",
        {"images": images_manifest},
        {"out": out, "out_dir": out_dir},
        summary,
    )
    return (EXIT_DEFICIENT if deficient else EXIT_OK), summary


def cmd_curate_pretrain(config: RunConfig) -> tuple[int, dict]:
    images_path = _input_path(config, "images")
    out = _output_path(config, "out")
    n_head = _int_param(config, "n_head", None)
    n_tail = _int_param(config, "n_tail", None)
    threshold = _int_param(config, "tail_threshold", 5000)

    records = _load_images(images_path)
    hist = class_histogram(records)
    selection = sample_pretrain_set(
        records, hist, n_head, n_tail, threshold=threshold, seed=config.seed
    )
    deficient = selection.tail_shortfall > 0
    out = _partial(out, deficient)
    write_jsonl(
        out,
        ({"image_id": i, "target_class": c} for i, c in selection.pairs),
        header=_header(config, "curate-pretrain"),
    )
    summary = {
        "selected": len(selection.pairs),
        "head": selection.head_count,
        "tail_counts": {str(k): v for k, v in sorted(selection.tail_counts.items())},
        "tail_shortfall": selection.tail_shortfall,
    }
    _write_manifest(config, "curate-pretrain", {"images": images_path}, {"out": out}, summary)
    return (EXIT_DEFICIENT if deficient else EXIT_OK), summary


def _pool_spec(config: RunConfig) -> PoolSpec:
    defaults = PoolSpec()
    return PoolSpec(
        min_per_class=_int_param(config, "min_per_class", defaults.min_per_class),
        exclusive_quota=_int_param(config, "exclusive_quota", defaults.exclusive_quota),
        shared_primary_quota=_int_param(
            config, "shared_primary_quota", defaults.shared_primary_quota
        ),
        shared_other_quota=_int_param(
            config, "shared_other_quota", defaults.shared_other_quota
        ),
    )


def cmd_mix_build(config: RunConfig) -> tuple[int, dict]:
    supply_path = _input_path(config, "sketches")
    out = _output_path(config, "out")
    spec = _pool_spec(config)

    supply = _load_sketches(supply_path)
    by_class: dict[int, dict[SketchSource, list[SketchRecord]]] = {}
    for rec in supply:
        by_class.setdefault(rec.class_id, {}).setdefault(rec.source, []).append(rec)
    classes = _param(config, "classes", None)
    if classes is None:
        classes = sorted(by_class)
    else:
        classes = [int(c) for c in classes]
        absent = [c for c in classes if c not in by_class]
        if absent:
            raise ValidationError(f"classes with no supply: {absent}")

    def one(class_id: int) -> list[SketchRecord]:
        return assemble_class_pool(class_id, by_class[class_id], spec, config.seed)

    pools = parallel_map(one, classes, config.workers)
    flattened = [rec for pool in pools for rec in pool]
    write_jsonl(
        out,
        (rec.to_json_dict() for rec in flattened),
        header=_header(config, "mix-build"),
    )
    summary = {
        "classes": len(classes),
        "sketches": len(flattened),
        "sizes": {str(c): len(pool) for c, pool in zip(classes, pools)},
    }
    _write_manifest(config, "mix-build", {"sketches": supply_path}, {"out": out}, summary)
    return EXIT_OK, summary


def cmd_mix_audit(config: RunConfig) -> tuple[int, dict]:
    pool_path = _input_path(config, "pool")
    supply_path = _optional_input(config, "sketches")
    out = _output_path(config, "out")
    spec = _pool_spec(config)

    pools = _pool_by_class(_load_sketches(pool_path))
    availability = None
    if supply_path is not None:
        availability = {}
        for rec in _load_sketches(supply_path):
            per = availability.setdefault(rec.class_id, {})
            per[rec.source] = per.get(rec.source, 0) + 1
    audit = audit_pool(pools, spec, availability)
    _dump_json(out, audit.to_json_dict())

    csv_path = None
    if config.paths.get("csv"):
        csv_path = _output_path(config, "csv")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class_id", "size", "range_flag", "violations", "per_source"])
        for cls in audit.classes:
            per_source = ";".join(f"{s}={n}" for s, n in sorted(cls.per_source.items()))
            writer.writerow(
                [cls.class_id, cls.size, int(cls.range_flag), len(cls.violations), per_source]
            )
        atomic_write_text(csv_path, buf.getvalue())

    summary = {
        "classes": len(audit.classes),
        "violations": audit.total_violations,
        "range_flags": sum(1 for c in audit.classes if c.range_flag),
    }
    outputs = {"out": out}
    if csv_path is not None:
        outputs["csv"] = csv_path
    _write_manifest(
        config,
        "mix-audit",
        {"pool": pool_path, **({"sketches": supply_path} if supply_path else {})},
        outputs,
        summary,
    )
    return (EXIT_DEFICIENT if audit.total_violations else EXIT_OK), summary


def _load_qa_rounds(path: Path) -> dict[str, list[tuple[str, str]]]:
    def parse(d: dict) -> tuple[str, list[tuple[str, str]]]:
        rounds = [(str(q), str(a)) for q, a in d["rounds"]]
        if not rounds:
            raise ValidationError(f"qa entry for {d.get('image_id')!r} has no rounds")
        return str(d["image_id"]), rounds

    return dict(_parse_records(path, parse))


def cmd_instr_build(config: RunConfig) -> tuple[int, dict]:
    images_path = _input_path(config, "images")
    pool_path = _input_path(config, "pool")
    qa_path = _optional_input(config, "qa")
    prompts_path = _optional_input(config, "prompts")
    sbir_path = _optional_input(config, "sbir_images")
    out = _output_path(config, "out")

    defaults = CompositionSpec()
    spec = CompositionSpec(
        detect_n=_int_param(config, "detect_n", defaults.detect_n),
        vqa_n=_int_param(config, "vqa_n", defaults.vqa_n),
        count_n=_int_param(config, "count_n", defaults.count_n),
        sbir_n=_int_param(config, "sbir_n", defaults.sbir_n),
        sbir_positive_fraction=_float_param(
            config, "sbir_positive_fraction", defaults.sbir_positive_fraction
        ),
        vqa_sketch_fraction=_float_param(
            config, "vqa_sketch_fraction", defaults.vqa_sketch_fraction
        ),
    )
    images = _load_images(images_path)
    sketch_pool = _pool_by_class(_load_sketches(pool_path))
    qa_rounds = _load_qa_rounds(qa_path) if qa_path else {}
    prompt_pool = (
        parse_prompt_pool(prompts_path.read_text(encoding="utf-8"))
        if prompts_path
        else PromptPool()
    )
    if sbir_path is not None:
        sbir_images = _load_images(sbir_path)
    else:
        sbir_images = [img for img in images if len(img.class_ids()) == 1]

    sources = CorpusSources(
        images=images,
        sketch_pool=sketch_pool,
        qa_rounds=qa_rounds,
        sbir_images=sbir_images,
        prompt_pool=prompt_pool,
    )
    samples, report = build_finetune_corpus(spec, sources, config.seed)

    # side-report names derive from the configured path, not the partial one
    report_path = Path(config.paths.get("report") or out.with_suffix(".report.json"))
    csv_path = Path(config.paths.get("report_csv") or out.with_suffix(".report.csv"))
    deficient = report.has_shortfall
    out = _partial(out, deficient)
    write_jsonl(
        out,
        (s.to_json_dict() for s in samples),
        header=_header(config, "instr-build"),
    )
    _dump_json(report_path, report.to_json_dict())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task", "requested", "realized", "shortfall"])
    for task in sorted(report.requested):
        writer.writerow(
            [task, report.requested[task], report.realized[task], report.shortfalls[task]]
        )
    atomic_write_text(csv_path, buf.getvalue())

    summary = report.to_json_dict()
    inputs = {"images": images_path, "pool": pool_path}
    for key, p in (("qa", qa_path), ("prompts", prompts_path), ("sbir_images", sbir_path)):
        if p is not None:
            inputs[key] = p
    _write_manifest(
        config,
        "instr-build",
        inputs,
        {"out": out, "report": report_path, "report_csv": csv_path},
        summary,
    )
    return (EXIT_DEFICIENT if deficient else EXIT_OK), summary


def cmd_gallery_build(config: RunConfig) -> tuple[int, dict]:
    images_path = _input_path(config, "images")
    sketches_path = _input_path(config, "sketches")
    scores_path = _input_path(config, "scores")
    out = _output_path(config, "out")

    raw = json.loads(scores_path.read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValidationError(f"scores file {scores_path} must map class id to mAP")
    class_scores = {int(k): float(v) for k, v in raw.items()}
    spec = build_sbir_gallery(
        class_scores,
        _load_images(images_path),
        _load_sketches(sketches_path),
        seed=config.seed,
    )
    doc = spec.to_json_dict()
    doc["seed"] = config.seed
    _dump_json(out, doc)
    summary = {
        "classes": len(spec.classes),
        "gallery_images": len(spec.gallery),
        "query_sketches": len(spec.queries),
        "score_matrix_entries": len(spec.gallery) * len(spec.queries),
    }
    _write_manifest(
        config,
        "gallery-build",
        {"images": images_path, "sketches": sketches_path, "scores": scores_path},
        {"out": out},
        summary,
    )
    return EXIT_OK, summary


def _source_of(
    sample: InstructionSample, sketch_sources: dict[str, str] | None
) -> str:
    if sketch_sources is None:
        return "All"
    if sample.sketch_id is None:
        return "All"
    return sketch_sources.get(sample.sketch_id, "All")


def _score_count(
    truth: list[InstructionSample],
    preds: dict[str, PredictionRecord],
    sketch_sources: dict[str, str] | None,
) -> MetricReport:
    samples = [s for s in truth if s.task is TaskKind.COUNT]
    if not samples:
        raise ValidationError("truth file holds no counting samples")
    groups: dict[str, list[InstructionSample]] = {}
    for s in samples:
        groups.setdefault(_source_of(s, sketch_sources), []).append(s)
    scores: dict[str, dict[str, float]] = {}
    unparseable: dict[str, int] = {}
    for name, members in groups.items():
        gts = {}
        parsed: dict[str, int | None] = {}
        for s in members:
            try:
                gts[s.sample_id] = int(s.rounds[0][1])
            except ValueError:
                raise ValidationError(
                    f"counting sample {s.sample_id!r} has a non-integer response"
                )
            rec = preds.get(s.sample_id)
            if rec is None:
                continue
            try:
                parsed[s.sample_id] = parse_count_answer(rec.raw_text)
            except UnparseableCountError:
                parsed[s.sample_id] = None
        result = counting_accuracy(gts, parsed)
        scores[name] = {"Acc": result.accuracy}
        unparseable[name] = result.n_unparseable + result.n_missing
    return MetricReport(task=TaskKind.COUNT, scores=scores, unparseable=unparseable)


def _score_detect(
    truth: list[InstructionSample],
    preds: dict[str, PredictionRecord],
    images: dict[str, ImageRecord],
    sketch_sources: dict[str, str] | None,
) -> MetricReport:
    samples = [s for s in truth if s.task is TaskKind.DETECT]
    if not samples:
        raise ValidationError("truth file holds no detection samples")
    groups: dict[str, list[DetectionInstance]] = {}
    unparseable: dict[str, int] = {}
    for s in samples:
        if s.target_class is None:
            raise ValidationError(f"detection sample {s.sample_id!r} lacks a class")
        img = images.get(s.image_id)
        if img is None:
            raise ValidationError(f"sample {s.sample_id!r} references unknown image")
        gt = parse_box_list(s.rounds[0][1])
        if not gt.boxes:
            raise ValidationError(f"sample {s.sample_id!r} has unparseable ground truth")
        pixels = img.width * img.height
        name = _source_of(s, sketch_sources)
        unparseable.setdefault(name, 0)
        pred_boxes: list[BoundingBox] = []
        rec = preds.get(s.sample_id)
        if rec is not None:
            parsed = parse_box_list(rec.raw_text)
            pred_boxes = list(parsed.boxes)
            # pixel-coordinate answers are rescaled into the unit square
            for px in parsed.pixel_boxes:
                x1, y1, x2, y2 = px
                if x2 <= img.width and y2 <= img.height:
                    pred_boxes.append(
                        BoundingBox(
                            x1 / img.width,
                            y1 / img.height,
                            x2 / img.width,
                            y2 / img.height,
                        )
                    )
        if not pred_boxes:
            unparseable[name] += 1
        groups.setdefault(name, []).append(
            DetectionInstance(
                class_id=s.target_class,
                gt_boxes=tuple(gt.boxes),
                gt_areas=tuple(b.area * pixels for b in gt.boxes),
                pred_boxes=tuple(pred_boxes),
            )
        )
    scores: dict[str, dict[str, float]] = {}
    for name, instances in groups.items():
        row: dict[str, float] = {}
        for metrics in (detection_accuracy(instances), mean_average_precision(instances)):
            for key, value in metrics.items():
                if value is not None:  # absent strata are omitted, not zeroed
                    row[key] = value
        scores[name] = row
    return MetricReport(task=TaskKind.DETECT, scores=scores, unparseable=unparseable)


def _score_sbir(config: RunConfig) -> tuple[MetricReport, dict[str, Path]]:
    gallery_path = _input_path(config, "gallery")
    scores_path = _input_path(config, "scores")
    spec = GallerySpec.from_json_dict(
        json.loads(gallery_path.read_text(encoding="utf-8"))
    )
    def parse(d: dict) -> tuple[tuple[str, str], float]:
        key = (str(d["query_id"]), str(d["gallery_id"]))
        if "prob" in d:
            return key, float(d["prob"])
        rec = PredictionRecord(
            sample_id=f"{key[0]}/{key[1]}",
            raw_text=str(d.get("raw_text", "")),
            yes_logprob=d.get("yes_logprob"),
            no_logprob=d.get("no_logprob"),
        )
        return key, parse_yes_probability(rec)

    matrix = dict(_parse_records(scores_path, parse))
    rankings = rank_gallery(spec, matrix)
    ks = _param(config, "k_values", [1, 5, 10])
    row = {f"Acc@{k}": sbir_acc_at_k(rankings, spec, int(k)) for k in ks}
    report = MetricReport(task=TaskKind.SBIR, scores={"All": row}, unparseable={"All": 0})
    return report, {"gallery": gallery_path, "scores": scores_path}


def cmd_score(config: RunConfig, task: str | None) -> tuple[int, dict]:
    task = task or _param(config, "task", None)
    if task not in ("count", "detect", "sbir"):
        raise ValidationError(f"score needs --task count|detect|sbir, got {task!r}")
    out = _output_path(config, "out")

    if task == "sbir":
        report, inputs = _score_sbir(config)
    else:
        truth_path = _input_path(config, "truth")
        preds_path = _input_path(config, "preds")
        truth = _load_samples(truth_path)
        preds = _load_predictions(preds_path)
        inputs = {"truth": truth_path, "preds": preds_path}
        sketch_sources = None
        pool_path = _optional_input(config, "pool")
        if pool_path is not None:
            sketch_sources = {
                rec.id: rec.source.value for rec in _load_sketches(pool_path)
            }
            inputs["pool"] = pool_path
        if task == "count":
            report = _score_count(truth, preds, sketch_sources)
        else:
            images_path = _input_path(config, "images")
            images = {rec.id: rec for rec in _load_images(images_path)}
            inputs["images"] = images_path
            report = _score_detect(truth, preds, images, sketch_sources)

    doc = report.to_json_dict()
    doc["seed"] = config.seed
    _dump_json(out, doc)
    summary = report.to_json_dict()
    _write_manifest(config, "score", inputs, {"out": out}, summary)
    return EXIT_OK, summary


def _source_order(names: list[str]) -> list[str]:
    canonical = [s.value for s in SketchSource]
    known = [n for n in canonical if n in names]
    extra = sorted(n for n in names if n not in canonical)
    return known + extra


def emit_report(
    reports: list[MetricReport], decimals: int = REPORT_DECIMALS
) -> tuple[str, str]:
    """Merge same-task score reports into CSV and Markdown tables.

    Columns are sketch sources plus a trailing Avg. column (the arithmetic
    mean of the row's present values); rows are metric names.
    """
    if not reports:
        raise ValidationError("no reports to merge")
    tasks = {r.task for r in reports}
    if len(tasks) > 1:
        raise ValidationError(
            f"reports mix tasks: {sorted(t.descriptor for t in tasks)}"
        )
    merged: dict[str, dict[str, float]] = {}
    unparseable: dict[str, int] = {}
    for report in reports:
        for source, row in report.scores.items():
            if source in merged:
                raise ValidationError(f"duplicate source row {source!r}")
            merged[source] = dict(row)
            unparseable[source] = report.unparseable.get(source, 0)

    sources = _source_order(list(merged))
    metric_names = {name for row in merged.values() for name in row}
    metrics = [m for m in METRIC_ORDER if m in metric_names]
    metrics += sorted(metric_names - set(metrics))

    def fmt(v: float | None) -> str:
        return "" if v is None else f"{v:.{decimals}f}"

    header = ["Metric"] + sources + ["Avg."]
    rows = []
    for metric in metrics:
        values = [merged[s].get(metric) for s in sources]
        present = [v for v in values if v is not None]
        avg = sum(present) / len(present) if present else None
        rows.append([metric] + [fmt(v) for v in values] + [fmt(avg)])

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    csv_text = buf.getvalue()

    task = next(iter(tasks))
    lines = [f"# {task.descriptor} results", ""]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "|".join([" --- "] * len(header)) + "|")
    for row in rows:
        lines.append("| " + " | ".join(row) + " |")
    flagged = {s: n for s, n in unparseable.items() if n}
    if flagged:
        lines.append("")
        noted = ", ".join(f"{s}: {n}" for s, n in sorted(flagged.items()))
        lines.append(f"Unparseable or missing predictions: {noted}")
    md_text = "\n".join(lines) + "\n"
    return csv_text, md_text


def cmd_report(config: RunConfig) -> tuple[int, dict]:
    raw = config.paths.get("reports")
    if not isinstance(raw, list) or not raw:
        raise ValidationError("paths.reports must be a non-empty list of report files")
    report_paths = []
    for item in raw:
        p = Path(item)
        if not p.is_file():
            raise ValidationError(f"report file {p} not found")
        report_paths.append(p)
    out_csv = _output_path(config, "out_csv")
    out_md = _output_path(config, "out_md")

    reports = [
        MetricReport.from_json_dict(json.loads(p.read_text(encoding="utf-8")))
        for p in report_paths
    ]
    decimals = _int_param(config, "decimals", REPORT_DECIMALS)
    csv_text, md_text = emit_report(reports, decimals)
    atomic_write_text(out_csv, csv_text)
    atomic_write_text(out_md, md_text)

    summary = {
        "reports": len(reports),
        "task": reports[0].task.descriptor,
        "sources": _source_order(
            [s for r in reports for s in r.scores]
        ),
    }
    inputs = {f"report_{i}": p for i, p in enumerate(report_paths)}
    _write_manifest(config, "report", inputs, {"out_csv": out_csv, "out_md": out_md}, summary)
    return EXIT_OK, summary


SUBCOMMANDS = (
    "sketch-gen",
    "curate-pretrain",
    "mix-build",
    "mix-audit",
    "instr-build",
    "gallery-build",
    "score",
    "report",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sketchforge",
        description="Sketch dataset pipeline: generation, curation, corpora, scoring.",
    )
    parser.add_argument("--version", action="version", version=f"sketchforge {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--workers", type=int, default=None, help="override worker count")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a dotted config key, e.g. params.canvas=256",
        )
        if name == "score":
            p.add_argument("--task", choices=("count", "detect", "sbir"), default=None)
    return parser


def run(subcommand: str, config: RunConfig, task: str | None = None) -> tuple[int, dict]:
    if subcommand == "sketch-gen":
        return cmd_sketch_gen(config)
    if subcommand == "curate-pretrain":
        return cmd_curate_pretrain(config)
    if subcommand == "mix-build":
        return cmd_mix_build(config)
    if subcommand == "mix-audit":
        return cmd_mix_audit(config)
    if subcommand == "instr-build":
        return cmd_instr_build(config)
    if subcommand == "gallery-build":
        return cmd_gallery_build(config)
    if subcommand == "score":
        return cmd_score(config, task)
    if subcommand == "report":
        return cmd_report(config)
    raise ValidationError(f"unknown subcommand {subcommand!r}")


def _error_json(subcommand: str | None, err: Exception) -> str:
    return json.dumps(
        {
            "error": type(err).__name__,
            "message": str(err),
            "subcommand": subcommand,
        },
        sort_keys=True,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(
            args.config, seed=args.seed, workers=args.workers, overrides=tuple(args.set)
        )
        code, summary = run(args.subcommand, config, getattr(args, "task", None))
    except (SketchForgeError, OSError, json.JSONDecodeError) as err:
        print(_error_json(args.subcommand, err), file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as err:  # pragma: no cover - defensive
        print(_error_json(args.subcommand, err), file=sys.stderr)
        return EXIT_INTERNAL
    print(json.dumps({"subcommand": args.subcommand, "exit": code, "summary": summary}))
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Instruction-corpus generation for the four sketch-conditioned tasks.

Every emitted prompt opens with its task descriptor (COUNT, BBOX, VQA, SBIR)
followed by a template drawn from a per-task pool; templates reference the
query sketch via the literal placeholder "<sketch>" and never name the class
in words, since the sketch itself is the query. Counting answers are a bare
integer, detection answers the box-list grammar, retrieval answers exactly
"yes" or "no".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import (
    ImageRecord,
    InstructionSample,
    SketchRecord,
    TaskKind,
    format_box_list,
)
from .errors import SampleGenerationError, ValidationError
from .util import derive_seed

SKETCH_PLACEHOLDER = "<sketch>"

DEFAULT_COUNT_TEMPLATES = (
    "<sketch> How many instances of the object shown in this sketch appear in"
    " the image? Answer with a single integer.",
    "<sketch> Count the objects in the image that match this sketch. Reply"
    " with one integer only.",
    "<sketch> Give the number of objects resembling the sketched object."
    " Respond with a single integer.",
)
DEFAULT_DETECT_TEMPLATES = (
    "<sketch> Locate every object in the image matching this sketch and"
    " return the bounding boxes.",
    "<sketch> Find all instances of the sketched object. Output their"
    " bounding box coordinates.",
    "<sketch> Detect each object that matches this sketch and list the"
    " bounding boxes.",
)
DEFAULT_VQA_TEMPLATES = (
    "<sketch> Look at the sketched object before answering.",
    "<sketch> The sketch identifies the object of interest.",
    "<sketch> Use this sketch as the reference object.",
)
DEFAULT_SBIR_TEMPLATES = (
    "<sketch> Does the image contain an object matching this sketch? Answer"
    " yes or no.",
    "<sketch> Is the object shown in the sketch present in the image? Reply"
    " yes or no.",
    "<sketch> Answer strictly yes or no: does this image show the sketched"
    " object?",
)
DEFAULT_PRETRAIN_TEMPLATES = (
    "<sketch> Describe the sketched object in the image and give its bounding"
    " boxes.",
    "<sketch> Identify the object this sketch refers to, describe the scene,"
    " and provide bounding box coordinates.",
    "<sketch> Explain what the sketch shows in this image, ending with the"
    " bounding boxes.",
)


@dataclass(frozen=True)
class PromptPool:
    """Per-task prompt templates; each references the sketch placeholder."""

    count: tuple[str, ...] = DEFAULT_COUNT_TEMPLATES
    detect: tuple[str, ...] = DEFAULT_DETECT_TEMPLATES
    vqa: tuple[str, ...] = DEFAULT_VQA_TEMPLATES
    sbir: tuple[str, ...] = DEFAULT_SBIR_TEMPLATES
    pretrain: tuple[str, ...] = DEFAULT_PRETRAIN_TEMPLATES

    def __post_init__(self):
        for section, templates in (
            ("count", self.count),
            ("detect", self.detect),
            ("vqa", self.vqa),
            ("sbir", self.sbir),
            ("pretrain", self.pretrain),
        ):
            if len(templates) < 3:
                raise ValidationError(
                    f"prompt section {section!r} needs >= 3 templates, has "
                    f"{len(templates)}"
                )
            for t in templates:
                if SKETCH_PLACEHOLDER not in t:
                    raise ValidationError(
                        f"template in section {section!r} lacks "
                        f"{SKETCH_PLACEHOLDER!r}: {t!r}"
                    )

    def for_task(self, task: TaskKind) -> tuple[str, ...]:
        return {
            TaskKind.COUNT: self.count,
            TaskKind.DETECT: self.detect,
            TaskKind.VQA: self.vqa,
            TaskKind.SBIR: self.sbir,
        }[task]


_SECTION_NAMES = {
    "COUNT": "count",
    "BBOX": "detect",
    "VQA": "vqa",
    "SBIR": "sbir",
    "PRETRAIN": "pretrain",
}


def parse_prompt_pool(text: str) -> PromptPool:
    """Pool file format: [COUNT] / [BBOX] / [VQA] / [SBIR] / [PRETRAIN]
    section headers, one template per line; blanks and # comments skipped."""
    sections: dict[str, list[str]] = {v: [] for v in _SECTION_NAMES.values()}
    current: str | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            header = line[1:-1].strip().upper()
            if header not in _SECTION_NAMES:
                raise ValidationError(f"line {lineno}: unknown section {header!r}")
            current = _SECTION_NAMES[header]
            continue
        if current is None:
            raise ValidationError(f"line {lineno}: template before any section")
        sections[current].append(line)
    return PromptPool(**{k: tuple(v) for k, v in sections.items()})


@dataclass(frozen=True)
class CompositionSpec:
    """Target sizes and mixing fractions for the finetuning corpus."""

    detect_n: int = 110000
    vqa_n: int = 50000
    count_n: int = 30000
    sbir_n: int = 25000
    vqa_sketch_fraction: float = 0.5
    sbir_positive_fraction: float = 0.5

    def __post_init__(self):
        for name in ("detect_n", "vqa_n", "count_n", "sbir_n"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("vqa_sketch_fraction", "sbir_positive_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")


def _draw(rng: np.random.Generator, items):
    return items[int(rng.integers(len(items)))]


def _pick_sketch(
    rng: np.random.Generator, sketch_pool: dict[int, list[SketchRecord]], class_id: int
) -> SketchRecord:
    pool = sketch_pool.get(class_id)
    if not pool:
        raise SampleGenerationError(f"no sketches pooled for class {class_id}")
    return _draw(rng, pool)


def gen_counting_sample(
    sample_id: str,
    image: ImageRecord,
    class_id: int,
    pool: PromptPool,
    sketch_pool: dict[int, list[SketchRecord]],
    seed: int,
) -> InstructionSample:
    """Counting record: answer is the class annotation cardinality."""
    boxes = image.boxes_of_class(class_id)
    if not boxes:
        raise SampleGenerationError(
            f"image {image.id} has no class-{class_id} annotations"
        )
    rng = np.random.default_rng(derive_seed(seed, "count", sample_id))
    template = _draw(rng, pool.count)
    sketch = _pick_sketch(rng, sketch_pool, class_id)
    prompt = f"{TaskKind.COUNT.descriptor} {template}"
    return InstructionSample(
        sample_id=sample_id,
        task=TaskKind.COUNT,
        image_id=image.id,
        sketch_id=sketch.id,
        rounds=((prompt, str(len(boxes))),),
        target_class=class_id,
    )


def gen_detection_sample(
    sample_id: str,
    image: ImageRecord,
    class_id: int,
    pool: PromptPool,
    sketch_pool: dict[int, list[SketchRecord]],
    seed: int,
) -> InstructionSample:
    """Detection record: answer aggregates every box of the target class."""
    boxes = image.boxes_of_class(class_id)
    if not boxes:
        raise SampleGenerationError(
            f"image {image.id} has no class-{class_id} annotations"
        )
    rng = np.random.default_rng(derive_seed(seed, "detect", sample_id))
    template = _draw(rng, pool.detect)
    sketch = _pick_sketch(rng, sketch_pool, class_id)
    prompt = f"{TaskKind.DETECT.descriptor} {template}"
    return InstructionSample(
        sample_id=sample_id,
        task=TaskKind.DETECT,
        image_id=image.id,
        sketch_id=sketch.id,
        rounds=((prompt, format_box_list(boxes)),),
        target_class=class_id,
    )


def gen_vqa_sample(
    sample_id: str,
    image: ImageRecord,
    qa_rounds: list[tuple[str, str]],
    with_sketch: bool,
    class_id: int | None,
    pool: PromptPool,
    sketch_pool: dict[int, list[SketchRecord]],
    seed: int,
) -> InstructionSample:
    """VQA record: ingested QA rounds, descriptor-prefixed, sketch optional."""
    if not qa_rounds:
        raise SampleGenerationError(f"sample {sample_id}: no QA rounds supplied")
    rng = np.random.default_rng(derive_seed(seed, "vqa", sample_id))
    sketch_id = None
    target_class = None
    q0, a0 = qa_rounds[0]
    if with_sketch:
        if class_id is None:
            raise SampleGenerationError(
                f"sample {sample_id}: sketch-bearing VQA needs a class"
            )
        template = _draw(rng, pool.vqa)
        sketch_id = _pick_sketch(rng, sketch_pool, class_id).id
        target_class = class_id
        first = (f"{TaskKind.VQA.descriptor} {template} {q0}", a0)
    else:
        first = (f"{TaskKind.VQA.descriptor} {q0}", a0)
    rounds = (first,) + tuple((q, a) for q, a in qa_rounds[1:])
    return InstructionSample(
        sample_id=sample_id,
        task=TaskKind.VQA,
        image_id=image.id,
        sketch_id=sketch_id,
        rounds=rounds,
        target_class=target_class,
    )


def _single_class(image: ImageRecord) -> int:
    classes = image.class_ids()
    if len(classes) != 1:
        raise SampleGenerationError(
            f"retrieval image {image.id} must hold exactly one class, has "
            f"{len(classes)}"
        )
    return classes[0]


def gen_sbir_pairs(
    images: list[ImageRecord],
    sketch_pool: dict[int, list[SketchRecord]],
    n_pairs: int,
    positive_fraction: float,
    seed: int,
    pool: PromptPool = PromptPool(),
    id_prefix: str = "sbir",
) -> tuple[list[InstructionSample], list[str]]:
    """Yes/no retrieval pairs over single-object images.

    Positives pair an image with a sketch of its own class, negatives with a
    sketch of a uniformly chosen other pooled class. Images whose class has no
    pooled sketches are skipped and reported.
    """
    pooled_classes = sorted(c for c, lst in sketch_pool.items() if lst)
    eligible = []
    skipped = []
    for img in images:
        cls = _single_class(img)
        if cls in sketch_pool and sketch_pool[cls]:
            eligible.append((img, cls))
        else:
            skipped.append(img.id)
    if not eligible:
        raise SampleGenerationError("no retrieval image has a pooled class")
    n_pos = round(n_pairs * positive_fraction)
    samples = []
    for i in range(n_pairs):
        positive = i < n_pos
        sample_id = f"{id_prefix}-{i:06d}"
        rng = np.random.default_rng(derive_seed(seed, "sbir", sample_id))
        img, cls = eligible[int(rng.integers(len(eligible)))]
        if positive:
            sketch = _pick_sketch(rng, sketch_pool, cls)
            answer = "yes"
        else:
            negatives = [c for c in pooled_classes if c != cls]
            if not negatives:
                raise SampleGenerationError(
                    "negative pairs need at least two pooled classes"
                )
            other = negatives[int(rng.integers(len(negatives)))]
            sketch = _pick_sketch(rng, sketch_pool, other)
            answer = "no"
        template = _draw(rng, pool.sbir)
        prompt = f"{TaskKind.SBIR.descriptor} {template}"
        samples.append(
            InstructionSample(
                sample_id=sample_id,
                task=TaskKind.SBIR,
                image_id=img.id,
                sketch_id=sketch.id,
                rounds=((prompt, answer),),
                target_class=cls if positive else None,
            )
        )
    return samples, skipped


@dataclass
class CorpusSources:
    """Raw material for corpus assembly."""

    images: list[ImageRecord]
    sketch_pool: dict[int, list[SketchRecord]]
    qa_rounds: dict[str, list[tuple[str, str]]] = field(default_factory=dict)
    sbir_images: list[ImageRecord] = field(default_factory=list)
    prompt_pool: PromptPool = PromptPool()


@dataclass
class CompositionReport:
    """Realized corpus composition."""

    realized: dict[str, int]
    requested: dict[str, int]
    shortfalls: dict[str, int]
    sbir_yes: int
    sbir_no: int
    per_source: dict[str, int]
    skipped_sbir_images: list[str]

    @property
    def has_shortfall(self) -> bool:
        return any(v > 0 for v in self.shortfalls.values())

    def to_json_dict(self) -> dict:
        return {
            "realized": dict(sorted(self.realized.items())),
            "requested": dict(sorted(self.requested.items())),
            "shortfalls": dict(sorted(self.shortfalls.items())),
            "sbir_yes": self.sbir_yes,
            "sbir_no": self.sbir_no,
            "per_source": dict(sorted(self.per_source.items())),
            "skipped_sbir_images": list(self.skipped_sbir_images),
        }


def _image_class_pairs(
    images: list[ImageRecord], sketch_pool: dict[int, list[SketchRecord]]
) -> list[tuple[ImageRecord, int]]:
    pairs = []
    for img in images:
        for cls in img.class_ids():
            if sketch_pool.get(cls):
                pairs.append((img, cls))
    return pairs


def build_finetune_corpus(
    spec: CompositionSpec,
    sources: CorpusSources,
    seed: int = 0,
) -> tuple[list[InstructionSample], CompositionReport]:
    """Assemble the four subsets at the requested sizes and shuffle them.

    Detection and counting draw from unique (image, class) pairs without
    replacement; VQA consumes ingested QA conversations, attaching a sketch to
    the configured fraction; retrieval pairs come from gen_sbir_pairs. Each
    subset short of raw material is emitted partially and reported.
    """
    pool = sources.prompt_pool
    samples: list[InstructionSample] = []
    realized: dict[str, int] = {}
    shortfalls: dict[str, int] = {}

    pairs = _image_class_pairs(sources.images, sources.sketch_pool)

    rng_detect = np.random.default_rng(derive_seed(seed, "detect-order"))
    order = rng_detect.permutation(len(pairs))[: spec.detect_n]
    for i, idx in enumerate(order):
        img, cls = pairs[int(idx)]
        samples.append(
            gen_detection_sample(
                f"bbox-{i:06d}", img, cls, pool, sources.sketch_pool, seed
            )
        )
    realized["BBOX"] = len(order)
    shortfalls["BBOX"] = spec.detect_n - len(order)

    rng_count = np.random.default_rng(derive_seed(seed, "count-order"))
    order = rng_count.permutation(len(pairs))[: spec.count_n]
    for i, idx in enumerate(order):
        img, cls = pairs[int(idx)]
        samples.append(
            gen_counting_sample(
                f"count-{i:06d}", img, cls, pool, sources.sketch_pool, seed
            )
        )
    realized["COUNT"] = len(order)
    shortfalls["COUNT"] = spec.count_n - len(order)

    qa_images = [img for img in sources.images if sources.qa_rounds.get(img.id)]
    rng_vqa = np.random.default_rng(derive_seed(seed, "vqa-order"))
    order = rng_vqa.permutation(len(qa_images))[: spec.vqa_n]
    n_sketch = round(len(order) * spec.vqa_sketch_fraction)
    attached = 0
    for i, idx in enumerate(order):
        img = qa_images[int(idx)]
        sketchable = [c for c in img.class_ids() if sources.sketch_pool.get(c)]
        with_sketch = attached < n_sketch and bool(sketchable)
        cls = None
        if with_sketch:
            pick = np.random.default_rng(derive_seed(seed, "vqa-class", i))
            cls = sketchable[int(pick.integers(len(sketchable)))]
            attached += 1
        samples.append(
            gen_vqa_sample(
                f"vqa-{i:06d}",
                img,
                sources.qa_rounds[img.id],
                with_sketch,
                cls,
                pool,
                sources.sketch_pool,
                seed,
            )
        )
    realized["VQA"] = len(order)
    shortfalls["VQA"] = spec.vqa_n - len(order)

    sbir_samples, skipped = ([], [])
    if spec.sbir_n > 0:
        sbir_samples, skipped = gen_sbir_pairs(
            sources.sbir_images,
            sources.sketch_pool,
            spec.sbir_n,
            spec.sbir_positive_fraction,
            seed,
            pool,
        )
    samples.extend(sbir_samples)
    realized["SBIR"] = len(sbir_samples)
    shortfalls["SBIR"] = spec.sbir_n - len(sbir_samples)

    rng_shuffle = np.random.default_rng(derive_seed(seed, "corpus-shuffle"))
    samples = [samples[int(i)] for i in rng_shuffle.permutation(len(samples))]

    sketch_by_id = {
        rec.id: rec for pool_list in sources.sketch_pool.values() for rec in pool_list
    }
    per_source: dict[str, int] = {}
    sbir_yes = sbir_no = 0
    for s in samples:
        if s.sketch_id is not None and s.sketch_id in sketch_by_id:
            src = sketch_by_id[s.sketch_id].source.value
            per_source[src] = per_source.get(src, 0) + 1
        if s.task is TaskKind.SBIR:
            if s.rounds[0][1] == "yes":
                sbir_yes += 1
            else:
                sbir_no += 1

    report = CompositionReport(
        realized=realized,
        requested={
            "BBOX": spec.detect_n,
            "COUNT": spec.count_n,
            "VQA": spec.vqa_n,
            "SBIR": spec.sbir_n,
        },
        shortfalls=shortfalls,
        sbir_yes=sbir_yes,
        sbir_no=sbir_no,
        per_source=per_source,
        skipped_sbir_images=skipped,
    )
    return samples, report

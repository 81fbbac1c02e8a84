"""Pretraining selection and multi-source sketch pool assembly.

Two jobs live here. First, the pretraining selection: a uniform head sample
over the image manifest plus a round-robin top-up over tail classes (classes
with fewer instances than a frequency threshold), so rare classes are not
drowned out. Second, class pools that merge sketch sources under one parent
taxonomy: every class gets a floor of sketches, exclusive classes draw only
from the pipeline-generated source, shared classes draw a fixed primary quota
plus an even split over the other sources, with shortfalls backfilled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import (
    BoundingBox,
    ImageRecord,
    Annotation,
    InstructionSample,
    SketchRecord,
    SketchSource,
    TaskKind,
    format_box_list,
    normalize_box,
)
from .errors import EmptyPoolError, SampleGenerationError, ValidationError
from .util import derive_seed

TAIL_THRESHOLD = 5000
MIN_PER_CLASS = 200
SHARED_PRIMARY_QUOTA = 50
SHARED_OTHER_QUOTA = 150
POOL_RANGE = (200, 350)

PRIMARY_SOURCE = SketchSource.SKETCHVCL_O365


@dataclass(frozen=True)
class ClassHistogram:
    """Instance counts per class over a manifest."""

    counts: dict[int, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def count(self, class_id: int) -> int:
        return self.counts.get(class_id, 0)


@dataclass(frozen=True)
class PoolSpec:
    """Quotas for class pool assembly."""

    min_per_class: int = MIN_PER_CLASS
    exclusive_quota: int = MIN_PER_CLASS
    shared_primary_quota: int = SHARED_PRIMARY_QUOTA
    shared_other_quota: int = SHARED_OTHER_QUOTA

    def __post_init__(self):
        if self.exclusive_quota != self.min_per_class:
            raise ValidationError("exclusive_quota must equal min_per_class")
        if self.shared_primary_quota + self.shared_other_quota != self.min_per_class:
            raise ValidationError(
                "shared_primary_quota + shared_other_quota must equal min_per_class"
            )


@dataclass(frozen=True)
class Taxonomy:
    """Parent class list plus optional name embeddings for cross-set mapping."""

    parent_classes: tuple[str, ...]
    embeddings: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if len(set(self.parent_classes)) != len(self.parent_classes):
            raise ValidationError("duplicate parent class names")
        if self.embeddings is not None:
            for name, vec in self.embeddings.items():
                norm = float(np.linalg.norm(vec))
                if abs(norm - 1.0) > 1e-6:
                    raise ValidationError(
                        f"embedding for {name!r} has norm {norm}, expected unit"
                    )

    def index_of(self, name: str) -> int | None:
        try:
            return self.parent_classes.index(name)
        except ValueError:
            return None


@dataclass
class PretrainSelection:
    """Outcome of pretraining sampling: (image_id, target_class) pairs."""

    pairs: list[tuple[str, int]]
    head_count: int
    tail_counts: dict[int, int]
    tail_shortfall: int

    def to_json_dict(self) -> dict:
        return {
            "head_count": self.head_count,
            "tail_counts": {str(k): v for k, v in sorted(self.tail_counts.items())},
            "tail_shortfall": self.tail_shortfall,
            "pairs": [[img, cls] for img, cls in self.pairs],
        }


def class_histogram(manifest: list[ImageRecord]) -> ClassHistogram:
    """Exact instance counts per class."""
    counts: dict[int, int] = {}
    for rec in manifest:
        for ann in rec.annotations:
            counts[ann.class_id] = counts.get(ann.class_id, 0) + 1
    return ClassHistogram(counts)


def identify_tail_classes(hist: ClassHistogram, threshold: int = TAIL_THRESHOLD) -> set[int]:
    """Classes present in the data but with fewer than `threshold` instances."""
    if threshold < 1:
        raise ValidationError(f"threshold must be >= 1, got {threshold}")
    return {c for c, n in hist.counts.items() if 0 < n < threshold}


def sample_pretrain_set(
    manifest: list[ImageRecord],
    hist: ClassHistogram,
    n_head: int,
    n_tail: int,
    threshold: int = TAIL_THRESHOLD,
    seed: int = 0,
) -> PretrainSelection:
    """Uniform head sample plus round-robin tail balancing.

    Head: n_head annotated images without replacement, one annotated class
    chosen uniformly per image. Tail: cycle over tail classes (ascending id),
    each turn picking an unused image containing that class, until the quota
    is filled or every tail class runs dry (reported as a shortfall).
    """
    eligible = [rec for rec in manifest if rec.annotations]
    if n_head > len(eligible):
        raise SampleGenerationError(
            f"head quota {n_head} exceeds {len(eligible)} annotated images"
        )
    rng_head = np.random.default_rng(derive_seed(seed, "pretrain-head"))
    head_idx = rng_head.permutation(len(eligible))[:n_head]
    used: set[str] = set()
    pairs: list[tuple[str, int]] = []
    for i in head_idx:
        rec = eligible[int(i)]
        classes = rec.class_ids()
        cls = int(classes[int(rng_head.integers(len(classes)))])
        pairs.append((rec.id, cls))
        used.add(rec.id)

    tail_sorted = sorted(identify_tail_classes(hist, threshold))
    candidates: dict[int, list[ImageRecord]] = {c: [] for c in tail_sorted}
    for rec in eligible:
        for c in rec.class_ids():
            if c in candidates:
                candidates[c].append(rec)

    rng_tail = np.random.default_rng(derive_seed(seed, "pretrain-tail"))
    tail_counts: dict[int, int] = {c: 0 for c in tail_sorted}
    picked = 0
    rotation = list(tail_sorted)
    while picked < n_tail and rotation:
        next_rotation = []
        for c in rotation:
            if picked >= n_tail:
                next_rotation.append(c)
                continue
            pool = [r for r in candidates[c] if r.id not in used]
            candidates[c] = pool
            if not pool:
                continue  # class exhausted, drops out of the rotation
            rec = pool[int(rng_tail.integers(len(pool)))]
            pairs.append((rec.id, c))
            used.add(rec.id)
            tail_counts[c] += 1
            picked += 1
            next_rotation.append(c)
        # every class kept in the rotation yielded a pick, so each pass makes
        # progress and the loop terminates
        rotation = next_rotation

    return PretrainSelection(
        pairs=pairs,
        head_count=len(head_idx),
        tail_counts=tail_counts,
        tail_shortfall=n_tail - picked,
    )


PRETRAIN_IDENTIFY_TEMPLATE = "The sketch depicts a {class_name}."


def compose_pretrain_sample(
    sample_id: str,
    image_id: str,
    sketch_id: str,
    caption: str,
    class_name: str,
    boxes: list[BoundingBox],
    prompt: str,
) -> InstructionSample:
    """One pretraining record: identify the sketched class, describe, locate.

    The response opens by naming the class, continues with the caption, and
    ends with the box list in answer-grammar form.
    """
    if not caption.strip():
        raise SampleGenerationError(f"sample {sample_id}: empty caption")
    if not boxes:
        raise SampleGenerationError(f"sample {sample_id}: no boxes")
    lead = PRETRAIN_IDENTIFY_TEMPLATE.format(class_name=class_name)
    response = f"{lead} {caption.strip()} {format_box_list(boxes)}"
    return InstructionSample(
        sample_id=sample_id,
        task=TaskKind.VQA,
        image_id=image_id,
        sketch_id=sketch_id,
        rounds=((prompt, response),),
    )


def _token_set(name: str) -> frozenset[str]:
    out = []
    word = []
    for ch in name.lower():
        if ch.isalnum():
            word.append(ch)
        elif word:
            out.append("".join(word))
            word = []
    if word:
        out.append("".join(word))
    return frozenset(out)


def map_taxonomy(
    source_names: list[str],
    taxonomy: Taxonomy,
    sim_threshold: float = 0.85,
) -> dict[str, int | None]:
    """Map each source class name to a parent class id, or None if unmatched.

    With embeddings: cosine argmax over parents, accepted at or above the
    similarity threshold. Without: exact lowercase match, then token-set
    Jaccard >= 0.5. Ties break to the lower parent index.
    """
    emb = taxonomy.embeddings
    parent_vecs = None
    if emb is not None and all(p in emb for p in taxonomy.parent_classes):
        parent_vecs = np.stack([emb[p] for p in taxonomy.parent_classes])

    result: dict[str, int | None] = {}
    for name in source_names:
        if parent_vecs is not None and name in emb:
            sims = parent_vecs @ emb[name]
            best = int(np.argmax(sims))  # argmax takes the first (lowest) index
            result[name] = best if float(sims[best]) >= sim_threshold else None
            continue
        lowered = name.lower()
        exact = next(
            (
                i
                for i, p in enumerate(taxonomy.parent_classes)
                if p.lower() == lowered
            ),
            None,
        )
        if exact is not None:
            result[name] = exact
            continue
        tokens = _token_set(name)
        best_idx, best_sim = None, 0.0
        for i, parent in enumerate(taxonomy.parent_classes):
            ptokens = _token_set(parent)
            union = tokens | ptokens
            sim = len(tokens & ptokens) / len(union) if union else 0.0
            if sim > best_sim:
                best_idx, best_sim = i, sim
        result[name] = best_idx if best_sim >= 0.5 else None
    return result


def split_quotas(
    availability: dict[SketchSource, int], spec: PoolSpec
) -> dict[SketchSource, int]:
    """Per-source take for one class given per-source availability.

    Exclusive classes (held only by the primary source) take the full quota
    from it. Shared classes take the primary quota from the primary source and
    split the remainder evenly over the other holding sources (remainder
    sketches go to earlier sources in enum order); shortfalls are backfilled
    first from the primary source, then round-robin over whatever has supply,
    so the take always reaches min(min_per_class, total availability).
    """
    avail = {s: n for s, n in availability.items() if n > 0}
    total = sum(avail.values())
    if total == 0:
        raise EmptyPoolError("no sketches available for this class")
    primary_avail = avail.get(PRIMARY_SOURCE, 0)
    others = [s for s in SketchSource if s is not PRIMARY_SOURCE and s in avail]
    if not others:
        return {PRIMARY_SOURCE: min(spec.exclusive_quota, primary_avail)}
    target = min(spec.min_per_class, total)
    take: dict[SketchSource, int] = {}
    if primary_avail:
        take[PRIMARY_SOURCE] = min(spec.shared_primary_quota, primary_avail)
    base = spec.shared_other_quota // len(others)
    rem = spec.shared_other_quota % len(others)
    for i, s in enumerate(others):
        quota = base + (1 if i < rem else 0)
        take[s] = min(quota, avail[s])
    deficit = target - sum(take.values())
    if deficit > 0 and primary_avail:
        extra = min(deficit, primary_avail - take[PRIMARY_SOURCE])
        take[PRIMARY_SOURCE] += extra
        deficit -= extra
    while deficit > 0:
        progressed = False
        for s in others:
            if deficit > 0 and take[s] < avail[s]:
                take[s] += 1
                deficit -= 1
                progressed = True
        if not progressed:
            break
    return {s: n for s, n in take.items() if n > 0}


def assemble_class_pool(
    class_id: int,
    availability: dict[SketchSource, list[SketchRecord]],
    spec: PoolSpec = PoolSpec(),
    seed: int = 0,
) -> list[SketchRecord]:
    """Sample one class pool without replacement, per the split quotas."""
    for source, records in availability.items():
        for rec in records:
            if rec.class_id != class_id:
                raise ValidationError(
                    f"sketch {rec.id} of class {rec.class_id} offered to pool "
                    f"for class {class_id}"
                )
            if rec.source is not source:
                raise ValidationError(
                    f"sketch {rec.id} from {rec.source.value} listed under "
                    f"{source.value}"
                )
    counts = {s: len(records) for s, records in availability.items()}
    quotas = split_quotas(counts, spec)
    pool: list[SketchRecord] = []
    for source in SketchSource:
        n = quotas.get(source, 0)
        if n == 0:
            continue
        records = availability[source]
        rng = np.random.default_rng(derive_seed(seed, "pool", class_id, source.value))
        idx = rng.permutation(len(records))[:n]
        pool.extend(records[int(i)] for i in idx)
    return pool


@dataclass
class ClassAudit:
    class_id: int
    size: int
    per_source: dict[str, int]
    violations: list[str] = field(default_factory=list)
    range_flag: bool = False

    def to_json_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "size": self.size,
            "per_source": dict(sorted(self.per_source.items())),
            "violations": list(self.violations),
            "range_flag": self.range_flag,
        }


@dataclass
class PoolAudit:
    classes: list[ClassAudit]

    @property
    def total_violations(self) -> int:
        return sum(len(c.violations) for c in self.classes)

    def to_json_dict(self) -> dict:
        return {
            "total_violations": self.total_violations,
            "classes": [c.to_json_dict() for c in self.classes],
        }


def audit_pool(
    pools: dict[int, list[SketchRecord]],
    spec: PoolSpec = PoolSpec(),
    availability: dict[int, dict[SketchSource, int]] | None = None,
) -> PoolAudit:
    """Conformance report for assembled pools.

    With availability counts, each class is checked against the exact quota
    split; without, only supply-independent rules apply (duplicates, class
    mismatches, the hard floor). Sizes outside the pool range are flagged
    separately from violations because an undersupplied class is legitimately
    small.
    """
    audits = []
    for class_id in sorted(pools):
        records = pools[class_id]
        per_source: dict[str, int] = {}
        violations: list[str] = []
        seen_ids = set()
        for rec in records:
            per_source[rec.source.value] = per_source.get(rec.source.value, 0) + 1
            if rec.id in seen_ids:
                violations.append(f"duplicate sketch id {rec.id}")
            seen_ids.add(rec.id)
            if rec.class_id != class_id:
                violations.append(
                    f"sketch {rec.id} of class {rec.class_id} in pool {class_id}"
                )
        size = len(records)
        if availability is not None and class_id in availability:
            avail = availability[class_id]
            expected = split_quotas(avail, spec)
            for source, n in expected.items():
                got = per_source.get(source.value, 0)
                if got != n:
                    violations.append(
                        f"{source.value}: took {got}, quota says {n}"
                    )
            for source_name in per_source:
                if source_name not in {s.value for s in expected}:
                    violations.append(f"unexpected source {source_name}")
            floor = min(spec.min_per_class, sum(avail.values()))
        else:
            floor = spec.min_per_class
        if size < floor:
            violations.append(f"size {size} below floor {floor}")
        audits.append(
            ClassAudit(
                class_id=class_id,
                size=size,
                per_source=per_source,
                violations=violations,
                range_flag=not (POOL_RANGE[0] <= size <= POOL_RANGE[1]),
            )
        )
    return PoolAudit(audits)


def load_coco_manifest(
    coco: dict,
) -> tuple[list[ImageRecord], dict[int, str], int]:
    """Convert a COCO-style dict (images/annotations/categories) to records.

    Returns (records, category id to name, count of skipped degenerate boxes).
    Annotation areas use the bbox area, keeping them exactly consistent with
    the normalized box.
    """
    categories = {int(c["id"]): str(c["name"]) for c in coco.get("categories", [])}
    by_image: dict[int, list] = {}
    skipped = 0
    for ann in coco.get("annotations", []):
        by_image.setdefault(int(ann["image_id"]), []).append(ann)
    records = []
    for img in coco.get("images", []):
        img_id = int(img["id"])
        width = int(img["width"])
        height = int(img["height"])
        annotations = []
        for ann in by_image.get(img_id, []):
            x, y, w, h = (float(v) for v in ann["bbox"])
            if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
                skipped += 1
                continue
            box = normalize_box((x, y, x + w, y + h), width, height)
            annotations.append(
                Annotation(class_id=int(ann["category_id"]), box=box, area_px=w * h)
            )
        records.append(
            ImageRecord(
                id=str(img_id),
                path=str(img.get("file_name", "")),
                width=width,
                height=height,
                annotations=tuple(annotations),
            )
        )
    return records, categories, skipped


def load_taxonomy_names(text: str) -> tuple[str, ...]:
    """Parent class list: one name per line, blanks and # comments skipped."""
    names = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            names.append(line)
    return tuple(names)


def load_embeddings(text: str) -> dict[str, np.ndarray]:
    """Sidecar format: class name followed by whitespace-separated floats.

    The trailing tokens that parse as floats form the vector; everything
    before them is the (possibly multi-word) name.
    """
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        vec = []
        split_at = len(tokens)
        for i in range(len(tokens) - 1, -1, -1):
            try:
                vec.append(float(tokens[i]))
                split_at = i
            except ValueError:
                break
        if not vec or split_at == 0:
            raise ValidationError(f"embedding line {lineno}: no name or no vector")
        name = " ".join(tokens[:split_at])
        out[name] = np.array(vec[::-1], dtype=np.float64)
    return out

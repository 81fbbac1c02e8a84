"""Scoring: detection accuracy and mAP, counting accuracy, retrieval Acc@K.

Detection is scored per instance (one image-class pair): ground truth boxes
against predicted boxes. Two families are computed. The Acc family is ground
truth recall under a greedy one-to-one matching, micro-averaged over the
split, reported at IoU 0.5 and as the mean over thresholds 0.50 to 0.95 in
steps of 0.05. The mAP family ranks predictions by confidence (an explicit
score when given, else a pseudo-confidence decreasing in emission order),
builds a 101-point interpolated precision-recall curve per class, and
averages over classes, then thresholds.

Size strata follow the 32/96 pixel convention: S below 32^2, M from 32^2 to
96^2 inclusive, L above 96^2, keyed by ground-truth pixel area. Matching runs
on the full ground truth; a stratum then keeps its own ground-truth boxes and
the predictions matched to them, predictions matched outside the stratum are
ignored, and unmatched predictions count against every stratum.

Retrieval uses a fixed gallery protocol: 20 classes picked at evenly spaced
ranks of the detection-mAP ordering, 5 gallery images and 5 query sketches
per class, every query scored against every gallery image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import BoundingBox, ImageRecord, SketchRecord, TaskKind
from .errors import MissingScoreError, ValidationError
from .util import derive_seed

# IoU thresholds 0.50, 0.55, ..., 0.95
DEFAULT_THRESHOLDS = tuple((50 + 5 * i) / 100 for i in range(10))

# pixel-area strata bounds
SMALL_MAX = 32 * 32  # exclusive
LARGE_MIN = 96 * 96  # exclusive

RECALL_GRID = np.arange(101) / 100.0

GALLERY_CLASSES = 20
PER_CLASS_IMAGES = 5
PER_CLASS_SKETCHES = 5


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two normalized boxes."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


@dataclass
class MatchResult:
    """One-to-one matching outcome at a fixed IoU threshold."""

    pairs: list[tuple[int, int, float]]
    unmatched_preds: list[int]
    unmatched_gts: list[int]


def greedy_match(
    preds: list[BoundingBox], gts: list[BoundingBox], t: float
) -> MatchResult:
    """Greedy one-to-one matching over IoU-eligible pairs.

    Candidate pairs with IoU >= t are sorted by IoU descending (ties: lower
    prediction index, then lower ground-truth index) and accepted while both
    sides are unused.
    """
    if not 0.0 < t <= 1.0:
        raise ValidationError(f"threshold must be in (0, 1], got {t}")
    candidates = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            v = iou(p, g)
            if v >= t:
                candidates.append((-v, i, j))
    candidates.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for neg_v, i, j in candidates:
        if i in used_p or j in used_g:
            continue
        pairs.append((i, j, -neg_v))
        used_p.add(i)
        used_g.add(j)
    return MatchResult(
        pairs=pairs,
        unmatched_preds=[i for i in range(len(preds)) if i not in used_p],
        unmatched_gts=[j for j in range(len(gts)) if j not in used_g],
    )


@dataclass(frozen=True)
class DetectionInstance:
    """One scored unit: ground truth and predictions for an image-class pair.

    gt_areas are absolute pixel areas (for size strata). pred_scores, when
    None, fall back to the pseudo-confidence 1/(1+rank) by emission order.
    """

    class_id: int
    gt_boxes: tuple[BoundingBox, ...]
    gt_areas: tuple[float, ...]
    pred_boxes: tuple[BoundingBox, ...]
    pred_scores: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.gt_boxes) != len(self.gt_areas):
            raise ValidationError("gt_boxes and gt_areas must align")
        if self.pred_scores is not None and len(self.pred_scores) != len(
            self.pred_boxes
        ):
            raise ValidationError("pred_scores must align with pred_boxes")

    def scores(self) -> tuple[float, ...]:
        if self.pred_scores is not None:
            return self.pred_scores
        return tuple(1.0 / (1.0 + r) for r in range(len(self.pred_boxes)))


def _stratum_of(area: float) -> str:
    if area < SMALL_MAX:
        return "S"
    if area > LARGE_MIN:
        return "L"
    return "M"


def detection_accuracy(
    instances: list[DetectionInstance],
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
) -> dict[str, float | None]:
    """Ground-truth recall under greedy matching, micro-averaged.

    Returns Acc (threshold mean), Acc@0.5, and per-stratum Acc_S/M/L; a
    stratum with no ground truth anywhere in the split is None.
    """
    total_gt = sum(len(inst.gt_boxes) for inst in instances)
    strata_gt = {"S": 0, "M": 0, "L": 0}
    for inst in instances:
        for area in inst.gt_areas:
            strata_gt[_stratum_of(area)] += 1

    acc_at = {}
    strata_acc = {s: [] for s in ("S", "M", "L")}
    for t in thresholds:
        matched = 0
        strata_matched = {"S": 0, "M": 0, "L": 0}
        for inst in instances:
            result = greedy_match(list(inst.pred_boxes), list(inst.gt_boxes), t)
            matched += len(result.pairs)
            for _, j, _ in result.pairs:
                strata_matched[_stratum_of(inst.gt_areas[j])] += 1
        acc_at[t] = 100.0 * matched / total_gt if total_gt else 0.0
        for s in strata_acc:
            if strata_gt[s]:
                strata_acc[s].append(100.0 * strata_matched[s] / strata_gt[s])

    out: dict[str, float | None] = {
        "Acc": float(np.mean([acc_at[t] for t in thresholds])) if thresholds else 0.0,
        "Acc@0.5": acc_at[0.5] if 0.5 in acc_at else None,
    }
    for s in ("S", "M", "L"):
        out[f"Acc_{s}"] = float(np.mean(strata_acc[s])) if strata_acc[s] else None
    return out


def _score_order(inst_preds: list[tuple[int, int, float]]) -> list[tuple[int, int, float]]:
    # (instance index, emission index, score) sorted by score desc, then
    # instance order, then emission order
    return sorted(inst_preds, key=lambda r: (-r[2], r[0], r[1]))


def _match_instance_by_score(
    inst: DetectionInstance, t: float
) -> dict[int, int]:
    """COCO-style per-instance matching: predictions in score order each take
    the unmatched ground truth with the highest IoU at or above t (ties to the
    lower ground-truth index). Returns emission index -> gt index."""
    order = sorted(
        range(len(inst.pred_boxes)),
        key=lambda i: (-inst.scores()[i], i),
    )
    used_g: set[int] = set()
    assignment: dict[int, int] = {}
    for i in order:
        best_j = -1
        best_v = 0.0
        for j, g in enumerate(inst.gt_boxes):
            if j in used_g:
                continue
            v = iou(inst.pred_boxes[i], g)
            if v >= t and v > best_v:
                best_j, best_v = j, v
        if best_j >= 0:
            assignment[i] = best_j
            used_g.add(best_j)
    return assignment


def _average_precision(
    flags: list[tuple[float, int, int, bool]], n_gt: int
) -> float | None:
    """AP from (score, instance idx, emission idx, is_tp) via the 101-point
    interpolated precision-recall curve."""
    if n_gt == 0:
        return None
    ordered = sorted(flags, key=lambda r: (-r[0], r[1], r[2]))
    tp = 0
    fp = 0
    recalls = []
    precisions = []
    for _, _, _, is_tp in ordered:
        if is_tp:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    ap = 0.0
    for r in RECALL_GRID:
        best = 0.0
        for rec, prec in zip(recalls, precisions):
            if rec >= r and prec > best:
                best = prec
        ap += best
    return ap / len(RECALL_GRID)


def mean_average_precision(
    instances: list[DetectionInstance],
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
) -> dict[str, float | None]:
    """Class-averaged AP over IoU thresholds, with size strata.

    Classes with zero ground truth across the split are excluded from the
    class mean. Scores are percentages.
    """
    by_class: dict[int, list[DetectionInstance]] = {}
    for inst in instances:
        by_class.setdefault(inst.class_id, []).append(inst)

    def class_ap(insts: list[DetectionInstance], t: float, stratum: str | None):
        flags = []
        n_gt = 0
        for inst_idx, inst in enumerate(insts):
            if stratum is None:
                n_gt += len(inst.gt_boxes)
            else:
                n_gt += sum(
                    1 for a in inst.gt_areas if _stratum_of(a) == stratum
                )
            assignment = _match_instance_by_score(inst, t)
            scores = inst.scores()
            for i in range(len(inst.pred_boxes)):
                j = assignment.get(i)
                if j is None:
                    flags.append((scores[i], inst_idx, i, False))
                elif stratum is None or _stratum_of(inst.gt_areas[j]) == stratum:
                    flags.append((scores[i], inst_idx, i, True))
                # matched outside the stratum: ignored
        return _average_precision(flags, n_gt)

    def averaged(t: float, stratum: str | None) -> float | None:
        aps = []
        for cls in sorted(by_class):
            ap = class_ap(by_class[cls], t, stratum)
            if ap is not None:
                aps.append(ap)
        return 100.0 * float(np.mean(aps)) if aps else None

    per_t = {t: averaged(t, None) for t in thresholds}
    valid = [v for v in per_t.values() if v is not None]
    out: dict[str, float | None] = {
        "mAP": float(np.mean(valid)) if valid else None,
        "mAP@0.5": per_t.get(0.5),
    }
    for s in ("S", "M", "L"):
        per_ts = [averaged(t, s) for t in thresholds]
        vals = [v for v in per_ts if v is not None]
        out[f"mAP_{s}"] = float(np.mean(vals)) if vals else None
    return out


@dataclass
class CountingResult:
    accuracy: float
    n_total: int
    n_missing: int
    n_unparseable: int

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n_total": self.n_total,
            "n_missing": self.n_missing,
            "n_unparseable": self.n_unparseable,
        }


def counting_accuracy(
    gts: dict[str, int], preds: dict[str, int | None]
) -> CountingResult:
    """Exact-match percentage; unparseable (None) and missing answers are
    incorrect."""
    if not gts:
        raise ValidationError("no counting ground truth")
    correct = 0
    missing = 0
    unparseable = 0
    for sample_id, gt in gts.items():
        if sample_id not in preds:
            missing += 1
            continue
        pred = preds[sample_id]
        if pred is None:
            unparseable += 1
        elif pred == gt:
            correct += 1
    return CountingResult(
        accuracy=100.0 * correct / len(gts),
        n_total=len(gts),
        n_missing=missing,
        n_unparseable=unparseable,
    )


@dataclass(frozen=True)
class GallerySpec:
    """Fixed retrieval benchmark: 20 classes, 5 images and 5 sketches each."""

    classes: tuple[int, ...]
    gallery: tuple[tuple[str, int], ...]  # (image id, class id), length 100
    queries: tuple[tuple[str, int], ...]  # (sketch id, class id), length 100

    def __post_init__(self):
        if len(self.classes) != GALLERY_CLASSES:
            raise ValidationError(
                f"gallery needs {GALLERY_CLASSES} classes, got {len(self.classes)}"
            )
        want = GALLERY_CLASSES * PER_CLASS_IMAGES
        if len(self.gallery) != want or len(self.queries) != want:
            raise ValidationError(
                f"gallery and query sets must each hold {want} entries"
            )
        for name, entries, quota in (
            ("gallery", self.gallery, PER_CLASS_IMAGES),
            ("queries", self.queries, PER_CLASS_SKETCHES),
        ):
            per_class: dict[int, int] = {}
            for _, cls in entries:
                per_class[cls] = per_class.get(cls, 0) + 1
            if per_class != {c: quota for c in self.classes}:
                raise ValidationError(f"{name} does not hold {quota} per class")

    def to_json_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "gallery": [[i, c] for i, c in self.gallery],
            "queries": [[s, c] for s, c in self.queries],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GallerySpec":
        return cls(
            classes=tuple(int(c) for c in d["classes"]),
            gallery=tuple((str(i), int(c)) for i, c in d["gallery"]),
            queries=tuple((str(s), int(c)) for s, c in d["queries"]),
        )


def evenly_spaced_ranks(n_classes: int, picks: int = GALLERY_CLASSES) -> list[int]:
    """Deterministic rank selection over a sorted class list."""
    if n_classes < picks:
        raise ValidationError(f"need >= {picks} classes, got {n_classes}")
    return [i * (n_classes - 1) // (picks - 1) for i in range(picks)]


def build_sbir_gallery(
    class_map_scores: dict[int, float],
    images: list[ImageRecord],
    sketches: list[SketchRecord],
    seed: int = 0,
) -> GallerySpec:
    """Pick 20 classes at evenly spaced ranks of the mAP ordering, then 5
    images and 5 query sketches per class, sampled without replacement.

    Eligibility requires a mAP score, 5 single-class images, and 5 sketches.
    Rank ties break to the lower class id.
    """
    images_by_class: dict[int, list[str]] = {}
    for img in images:
        classes = img.class_ids()
        if len(classes) != 1:
            raise ValidationError(
                f"gallery image {img.id} must hold exactly one class"
            )
        images_by_class.setdefault(classes[0], []).append(img.id)
    sketches_by_class: dict[int, list[str]] = {}
    for sk in sketches:
        sketches_by_class.setdefault(sk.class_id, []).append(sk.id)

    eligible = [
        c
        for c in class_map_scores
        if len(images_by_class.get(c, ())) >= PER_CLASS_IMAGES
        and len(sketches_by_class.get(c, ())) >= PER_CLASS_SKETCHES
    ]
    if len(eligible) < GALLERY_CLASSES:
        raise ValidationError(
            f"only {len(eligible)} classes have a score, {PER_CLASS_IMAGES} "
            f"images, and {PER_CLASS_SKETCHES} sketches; need {GALLERY_CLASSES}"
        )
    ordered = sorted(eligible, key=lambda c: (-class_map_scores[c], c))
    picked = [ordered[r] for r in evenly_spaced_ranks(len(ordered))]

    gallery = []
    queries = []
    for cls in picked:
        rng = np.random.default_rng(derive_seed(seed, "gallery", cls))
        imgs = images_by_class[cls]
        idx = rng.permutation(len(imgs))[:PER_CLASS_IMAGES]
        gallery.extend((imgs[int(i)], cls) for i in idx)
        sks = sketches_by_class[cls]
        idx = rng.permutation(len(sks))[:PER_CLASS_SKETCHES]
        queries.extend((sks[int(i)], cls) for i in idx)
    return GallerySpec(
        classes=tuple(picked), gallery=tuple(gallery), queries=tuple(queries)
    )


def rank_gallery(
    spec: GallerySpec, scores: dict[tuple[str, str], float]
) -> list[list[int]]:
    """Per query, gallery indices by yes-probability descending.

    Requires the full query-by-gallery matrix; ties break to the lower
    gallery index.
    """
    missing = [
        (q, g)
        for q, _ in spec.queries
        for g, _ in spec.gallery
        if (q, g) not in scores
    ]
    if missing:
        shown = ", ".join(f"({q}, {g})" for q, g in missing[:5])
        raise MissingScoreError(
            f"{len(missing)} score entries absent, first: {shown}"
        )
    rankings = []
    for q, _ in spec.queries:
        row = [scores[(q, g)] for g, _ in spec.gallery]
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        rankings.append(order)
    return rankings


def sbir_acc_at_k(
    rankings: list[list[int]], spec: GallerySpec, k: int
) -> float:
    """Mean over queries of (same-class gallery images in the top k) / k."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k > len(spec.gallery):
        raise ValidationError(f"k {k} exceeds gallery size {len(spec.gallery)}")
    # integer hit count, one division: keeps round fractions exact
    hits = 0
    for (q_id, q_cls), order in zip(spec.queries, rankings):
        hits += sum(1 for j in order[:k] if spec.gallery[j][1] == q_cls)
    return 100.0 * hits / (k * len(spec.queries))


@dataclass
class MetricReport:
    """Scores per sketch source for one task."""

    task: TaskKind
    scores: dict[str, dict[str, float | None]]
    unparseable: dict[str, int] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "task": self.task.descriptor,
            "scores": {k: dict(v) for k, v in sorted(self.scores.items())},
            "unparseable": dict(sorted(self.unparseable.items())),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricReport":
        return cls(
            task=TaskKind.from_descriptor(d["task"]),
            scores={k: dict(v) for k, v in d["scores"].items()},
            unparseable={k: int(v) for k, v in d.get("unparseable", {}).items()},
        )

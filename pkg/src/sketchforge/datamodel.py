"""Domain types, coordinate normalization, and the answer grammars.

Boxes are axis-aligned with coordinates normalized to image fractions in
[0, 1]. Model-facing answers use a fixed textual grammar: box lists are
rendered as ``{[x1, y1, x2, y2], ...}`` at 2 decimals, counting answers are a
single integer, retrieval answers are yes/no with optional token
log-probabilities.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field

from .errors import (
    EmptyAnswerError,
    GeometryError,
    UnparseableCountError,
    UnparseableSbirError,
)

BOX_DECIMALS = 2

# Parsed tuples whose largest value exceeds this are taken to be absolute
# pixel coordinates rather than image fractions.
PIXEL_SCALE_CUTOFF = 1.5


class TaskKind(enum.Enum):
    """The four instruction task families, keyed by their prompt descriptor."""

    COUNT = "COUNT"
    DETECT = "BBOX"
    VQA = "VQA"
    SBIR = "SBIR"

    @property
    def descriptor(self) -> str:
        return self.value

    @classmethod
    def from_descriptor(cls, descriptor: str) -> "TaskKind":
        try:
            return cls(descriptor)
        except ValueError:
            raise GeometryError(f"unknown task descriptor: {descriptor!r}") from None


class SketchSource(enum.Enum):
    """Corpus a sketch raster came from. Declaration order is the canonical order."""

    SKETCHVCL_O365 = "SketchVCL-O365"
    SKETCHVCL_OI = "SketchVCL-OI"
    SKETCHVCL_C = "SketchVCL-C"
    SKETCHY = "Sketchy"
    QUICKDRAW = "QuickDraw"
    EXTERNAL = "External"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized [0, 1] image fractions."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise GeometryError(
                f"invalid normalized box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_json_dict(self) -> dict:
        return {"x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2}

    @classmethod
    def from_json_dict(cls, d: dict) -> "BoundingBox":
        return cls(float(d["x1"]), float(d["y1"]), float(d["x2"]), float(d["y2"]))


@dataclass(frozen=True)
class Annotation:
    """One ground-truth object instance: class, normalized box, absolute pixel area."""

    class_id: int
    box: BoundingBox
    area_px: float

    def __post_init__(self):
        if self.class_id < 0:
            raise GeometryError(f"negative class_id {self.class_id}")
        if self.area_px <= 0:
            raise GeometryError(f"non-positive pixel area {self.area_px}")

    def to_json_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "box": self.box.to_json_dict(),
            "area_px": self.area_px,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Annotation":
        return cls(
            class_id=int(d["class_id"]),
            box=BoundingBox.from_json_dict(d["box"]),
            area_px=float(d["area_px"]),
        )


@dataclass(frozen=True)
class ImageRecord:
    """A photo with its per-instance annotations."""

    id: str
    path: str
    width: int
    height: int
    annotations: tuple[Annotation, ...] = ()

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image {self.id!r} has empty dimensions")
        object.__setattr__(self, "annotations", tuple(self.annotations))
        scale = self.width * self.height
        for ann in self.annotations:
            # pixel area must agree with the normalized box up to 1 px^2
            if abs(ann.area_px - ann.box.area * scale) > 1.0:
                raise GeometryError(
                    f"image {self.id!r}: annotation area {ann.area_px} disagrees "
                    f"with box area {ann.box.area * scale:.3f}"
                )

    def class_ids(self) -> list[int]:
        """Distinct annotated classes, in first-appearance order."""
        seen: list[int] = []
        for ann in self.annotations:
            if ann.class_id not in seen:
                seen.append(ann.class_id)
        return seen

    def boxes_of_class(self, class_id: int) -> list[BoundingBox]:
        return [a.box for a in self.annotations if a.class_id == class_id]

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "width": self.width,
            "height": self.height,
            "annotations": [a.to_json_dict() for a in self.annotations],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ImageRecord":
        return cls(
            id=str(d["id"]),
            path=str(d["path"]),
            width=int(d["width"]),
            height=int(d["height"]),
            annotations=tuple(
                Annotation.from_json_dict(a) for a in d.get("annotations", [])
            ),
        )


@dataclass(frozen=True)
class SketchRecord:
    """One instance-level sketch raster plus where it came from."""

    id: str
    class_id: int
    source: SketchSource
    path: str
    origin_image_id: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "class_id": self.class_id,
            "source": self.source.value,
            "path": self.path,
            "origin_image_id": self.origin_image_id,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SketchRecord":
        return cls(
            id=str(d["id"]),
            class_id=int(d["class_id"]),
            source=SketchSource(d["source"]),
            path=str(d["path"]),
            origin_image_id=d.get("origin_image_id"),
        )


@dataclass(frozen=True)
class InstructionSample:
    """One (image, sketch, prompt, response) record with a task kind."""

    sample_id: str
    task: TaskKind
    image_id: str
    sketch_id: str | None
    rounds: tuple[tuple[str, str], ...]
    target_class: int | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "rounds", tuple((str(p), str(r)) for p, r in self.rounds)
        )
        if not self.rounds:
            raise GeometryError(f"sample {self.sample_id!r} has no rounds")
        first_prompt = self.rounds[0][0]
        if not first_prompt.startswith(self.task.descriptor):
            raise GeometryError(
                f"sample {self.sample_id!r}: first prompt does not start with "
                f"descriptor {self.task.descriptor!r}"
            )
        if self.task is not TaskKind.VQA and len(self.rounds) != 1:
            raise GeometryError(
                f"sample {self.sample_id!r}: {self.task.name} requires exactly one round"
            )

    def to_json_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "task": self.task.descriptor,
            "image_id": self.image_id,
            "sketch_id": self.sketch_id,
            "rounds": [[p, r] for p, r in self.rounds],
            "target_class": self.target_class,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "InstructionSample":
        target = d.get("target_class")
        return cls(
            sample_id=str(d["sample_id"]),
            task=TaskKind.from_descriptor(d["task"]),
            image_id=str(d["image_id"]),
            sketch_id=d.get("sketch_id"),
            rounds=tuple((p, r) for p, r in d["rounds"]),
            target_class=None if target is None else int(target),
        )


@dataclass(frozen=True)
class PredictionRecord:
    """A raw model answer keyed to a sample, optionally with yes/no log-probs."""

    sample_id: str
    raw_text: str
    yes_logprob: float | None = None
    no_logprob: float | None = None

    def __post_init__(self):
        if (self.yes_logprob is None) != (self.no_logprob is None):
            raise GeometryError(
                f"prediction {self.sample_id!r}: yes/no log-probs must come together"
            )
        for lp in (self.yes_logprob, self.no_logprob):
            if lp is not None and lp > 0.0:
                raise GeometryError(
                    f"prediction {self.sample_id!r}: log-probability {lp} > 0"
                )

    def to_json_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "raw_text": self.raw_text,
            "yes_logprob": self.yes_logprob,
            "no_logprob": self.no_logprob,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PredictionRecord":
        yes = d.get("yes_logprob")
        no = d.get("no_logprob")
        return cls(
            sample_id=str(d["sample_id"]),
            raw_text=str(d.get("raw_text", "")),
            yes_logprob=None if yes is None else float(yes),
            no_logprob=None if no is None else float(no),
        )


def normalize_box(
    abs_box: tuple[float, float, float, float], width: int, height: int
) -> BoundingBox:
    """Scale a pixel-space (x1, y1, x2, y2) box into image fractions."""
    x1, y1, x2, y2 = abs_box
    if width < 1 or height < 1:
        raise GeometryError(f"invalid image dimensions {width}x{height}")
    if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
        raise GeometryError(
            f"degenerate or out-of-range pixel box {abs_box} for {width}x{height}"
        )
    return BoundingBox(x1 / width, y1 / height, x2 / width, y2 / height)


def denormalize_box(
    box: BoundingBox, width: int, height: int
) -> tuple[float, float, float, float]:
    """Inverse of :func:`normalize_box`."""
    if width < 1 or height < 1:
        raise GeometryError(f"invalid image dimensions {width}x{height}")
    return (box.x1 * width, box.y1 * height, box.x2 * width, box.y2 * height)


def format_box_list(boxes: list[BoundingBox], decimals: int = BOX_DECIMALS) -> str:
    """Render boxes as ``{[x1, y1, x2, y2], ...}`` at fixed precision, input order."""
    if not boxes:
        raise EmptyAnswerError("a detection answer must contain at least one box")
    rendered = [
        "[" + ", ".join(f"{v:.{decimals}f}" for v in b.as_tuple()) + "]" for b in boxes
    ]
    return "{" + ", ".join(rendered) + "}"


_TUPLE_RE = re.compile(
    r"\[\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*,"
    r"\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\]"
)


@dataclass
class ParsedBoxes:
    """Outcome of extracting box tuples from free-form model text.

    ``boxes`` hold tuples already in [0, 1]; ``pixel_boxes`` hold tuples whose
    magnitude marks them as absolute pixels, kept raw for the caller to
    denormalize once image dimensions are known; ``dropped`` counts tuples
    rejected for inverted or out-of-range coordinates.
    """

    boxes: list[BoundingBox] = field(default_factory=list)
    pixel_boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    dropped: int = 0

    @property
    def empty(self) -> bool:
        return not self.boxes and not self.pixel_boxes


def parse_box_list(text: str) -> ParsedBoxes:
    """Extract every bracketed 4-tuple from model output, in order.

    Never raises: zero parseable tuples is an empty (not failed) result, which
    scoring treats as an empty prediction.
    """
    result = ParsedBoxes()
    for m in _TUPLE_RE.finditer(text):
        x1, y1, x2, y2 = (float(g) for g in m.groups())
        if not (x1 < x2 and y1 < y2):
            result.dropped += 1
        elif max(x1, y1, x2, y2) > PIXEL_SCALE_CUTOFF:
            result.pixel_boxes.append((x1, y1, x2, y2))
        elif min(x1, y1) >= 0.0 and max(x2, y2) <= 1.0:
            result.boxes.append(BoundingBox(x1, y1, x2, y2))
        else:
            result.dropped += 1
    return result


# a standalone digit run: not part of a decimal and not negated
_INT_RE = re.compile(r"(?<![\d.-])\d+(?!\.\d)")


def parse_count_answer(text: str) -> int:
    """Return the first non-negative integer token in the text."""
    m = _INT_RE.search(text)
    if m is None:
        raise UnparseableCountError(f"no integer in counting answer {text!r}")
    return int(m.group(0))


def parse_yes_probability(rec: PredictionRecord) -> float:
    """Probability of a yes answer, renormalized over the yes/no token pair.

    Falls back to the answer text when log-probs are absent: a leading yes is
    1.0, a leading no is 0.0, case-insensitive.
    """
    if rec.yes_logprob is not None and rec.no_logprob is not None:
        # softmax over exactly the two tokens, computed stably
        return 1.0 / (1.0 + math.exp(rec.no_logprob - rec.yes_logprob))
    stripped = rec.raw_text.strip().lstrip("\"'([{*<> \t").lower()
    if stripped.startswith("yes"):
        return 1.0
    if stripped.startswith("no"):
        return 0.0
    raise UnparseableSbirError(
        f"prediction {rec.sample_id!r} has neither log-probs nor yes/no text"
    )

"""Instance-level sketch synthesis from a photo and a segmentation mask.

Pipeline per instance: white-out everything outside the mask, convert to
grayscale, then derive three stroke layers: a difference-of-Gaussians
stylization, a binarized morphological gradient of the grayscale, and the
mask-boundary contour. The layers are aggregated by pixelwise stroke union and
rendered onto a square white canvas.

Stroke rasters are single-channel uint8 with the white-background/black-stroke
convention: 0 = stroke, 255 = background.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .datamodel import Annotation, ImageRecord, SketchRecord, SketchSource, denormalize_box
from .errors import EmptySketchError, GeometryError, SampleGenerationError
from .kernels import gaussian_blur, morph_gradient

STROKE = 0
BACKGROUND = 255

DEFAULT_SIGMA = 1.0
DEFAULT_K = 1.6
DEFAULT_EPSILON = 0.1
DEFAULT_CANVAS = 512
DEFAULT_GRADIENT_RADIUS = 1

# peak DoG responses below this are float32 accumulation noise, not structure;
# normalizing by them would amplify noise to full scale on flat fields
XDOG_NOISE_FLOOR = 1e-4

# generation precondition: the mask may spill at most this far beyond the
# annotation box (each side grown by half this fraction about the center)
BOX_SLACK_FRACTION = 0.10


class StylizerKind(enum.Enum):
    NATIVE_XDOG = "native-xdog"
    EXTERNAL_RASTER_DIR = "external-raster-dir"


@dataclass(frozen=True)
class StylizerSpec:
    """Stylizer selection: the native DoG thresholder or pre-rendered rasters."""

    kind: StylizerKind = StylizerKind.NATIVE_XDOG
    sigma: float = DEFAULT_SIGMA
    k: float = DEFAULT_K
    epsilon: float = DEFAULT_EPSILON
    raster_dir: str | None = None

    def __post_init__(self):
        if self.sigma <= 0:
            raise GeometryError(f"sigma must be > 0, got {self.sigma}")
        if self.k <= 1:
            raise GeometryError(f"k must be > 1, got {self.k}")
        if self.kind is StylizerKind.EXTERNAL_RASTER_DIR and not self.raster_dir:
            raise GeometryError("external stylizer requires raster_dir")


@dataclass(frozen=True)
class MaskRaster:
    """Binary foreground mask; at least one foreground pixel."""

    data: np.ndarray  # bool, shape (h, w)

    def __post_init__(self):
        if self.data.ndim != 2:
            raise GeometryError(f"mask must be 2-D, got shape {self.data.shape}")
        if self.data.dtype != np.bool_:
            raise GeometryError("mask data must be boolean")
        if not self.data.any():
            raise GeometryError("mask has no foreground pixels")

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "MaskRaster":
        """Any nonzero pixel counts as foreground."""
        return cls(np.ascontiguousarray(arr) != 0)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Rec. 601 luma for 3-channel input; single-channel passes through."""
    if image.ndim == 2:
        return image.astype(np.uint8, copy=False)
    if image.ndim == 3 and image.shape[2] == 3:
        rgb = image.astype(np.float32)
        luma = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
        return np.clip(np.round(luma), 0, 255).astype(np.uint8)
    raise GeometryError(f"expected (h, w) or (h, w, 3) raster, got {image.shape}")


def mask_foreground(image: np.ndarray, mask: MaskRaster) -> np.ndarray:
    """Copy of the image with every out-of-mask pixel set to pure white."""
    if image.shape[:2] != (mask.height, mask.width):
        raise GeometryError(
            f"image {image.shape[:2]} and mask {(mask.height, mask.width)} disagree"
        )
    out = image.copy()
    out[~mask.data] = 255
    return out


def otsu_threshold(values: np.ndarray) -> int:
    """Otsu's between-class-variance threshold over uint8 values."""
    if values.size == 0:
        raise GeometryError("cannot threshold an empty value set")
    hist = np.bincount(values.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    omega = np.cumsum(hist)
    mu = np.cumsum(hist * np.arange(256, dtype=np.float64))
    mu_t = mu[-1]
    denom = omega * (total - omega)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = (mu_t * omega - total * mu) ** 2 / denom
    sigma_b[denom == 0] = -1.0
    return int(np.argmax(sigma_b))


def binarize_gradient(grad: np.ndarray) -> np.ndarray:
    """Turn a gradient magnitude raster into strokes via an Otsu cut."""
    thr = otsu_threshold(grad)
    out = np.full(grad.shape, BACKGROUND, dtype=np.uint8)
    out[grad > thr] = STROKE
    return out


def xdog_stylize(gray_foreground: np.ndarray, spec: StylizerSpec) -> np.ndarray:
    """Difference-of-Gaussians stylization thresholded into strokes.

    The response b(sigma) - b(k sigma) is normalized by its peak magnitude;
    pixels with normalized response < -epsilon become strokes. A flat field
    has zero response everywhere and produces no strokes.
    """
    if spec.kind is not StylizerKind.NATIVE_XDOG:
        raise GeometryError("xdog_stylize requires a native stylizer spec")
    g = gray_foreground.astype(np.float32) / np.float32(255.0)
    response = gaussian_blur(g, spec.sigma) - gaussian_blur(g, spec.k * spec.sigma)
    peak = float(np.max(np.abs(response)))
    if peak > XDOG_NOISE_FLOOR:
        response = response / np.float32(peak)
    out = np.full(g.shape, BACKGROUND, dtype=np.uint8)
    out[response < -spec.epsilon] = STROKE
    return out


def _check_strokes(arr: np.ndarray, name: str) -> None:
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise GeometryError(f"{name} must be a 2-D uint8 raster")
    bad = (arr != STROKE) & (arr != BACKGROUND)
    if bad.any():
        raise GeometryError(f"{name} is not binary: found value(s) outside {{0, 255}}")


def aggregate_strokes(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pixelwise stroke union (stroke is the darker value, so union is min)."""
    _check_strokes(a, "a")
    _check_strokes(b, "b")
    if a.shape != b.shape:
        raise GeometryError(f"stroke maps disagree in shape: {a.shape} vs {b.shape}")
    return np.minimum(a, b)


def mask_contour(mask: MaskRaster, radius: int = DEFAULT_GRADIENT_RADIUS) -> np.ndarray:
    """Silhouette strokes: the morphological gradient band of the mask."""
    mask_u8 = np.where(mask.data, np.uint8(255), np.uint8(0))
    grad = morph_gradient(mask_u8, radius)
    out = np.full(mask_u8.shape, BACKGROUND, dtype=np.uint8)
    out[grad > 0] = STROKE
    return out


def render_canvas(strokes: np.ndarray, target: int = DEFAULT_CANVAS) -> np.ndarray:
    """Crop to the stroke extent plus a 4% margin, fit onto a white square.

    Aspect ratio is preserved; the result is centered and re-binarized at 128
    after the bilinear resize.
    """
    _check_strokes(strokes, "strokes")
    if target < 64:
        raise GeometryError(f"canvas target must be >= 64, got {target}")
    ys, xs = np.nonzero(strokes == STROKE)
    if ys.size == 0:
        raise EmptySketchError("no strokes to render")
    y0, y1 = int(ys.min()), int(ys.max())
    x0, x1 = int(xs.min()), int(xs.max())
    margin = max(1, round(0.04 * max(y1 - y0 + 1, x1 - x0 + 1)))
    y0 = max(0, y0 - margin)
    x0 = max(0, x0 - margin)
    y1 = min(strokes.shape[0] - 1, y1 + margin)
    x1 = min(strokes.shape[1] - 1, x1 + margin)
    crop = strokes[y0 : y1 + 1, x0 : x1 + 1]
    ch, cw = crop.shape
    scale = target / max(ch, cw)
    new_h = max(1, round(ch * scale))
    new_w = max(1, round(cw * scale))
    resized = np.asarray(
        Image.fromarray(crop, mode="L").resize((new_w, new_h), Image.BILINEAR)
    )
    binar = np.where(resized < 128, np.uint8(STROKE), np.uint8(BACKGROUND))
    canvas = np.full((target, target), np.uint8(BACKGROUND))
    oy = (target - new_h) // 2
    ox = (target - new_w) // 2
    canvas[oy : oy + new_h, ox : ox + new_w] = binar
    return canvas


def _load_external_strokes(instance_id: str, spec: StylizerSpec, shape) -> np.ndarray:
    path = os.path.join(spec.raster_dir, f"{instance_id}.png")
    if not os.path.exists(path):
        raise SampleGenerationError(f"external stylizer raster missing: {path}")
    arr = np.asarray(Image.open(path).convert("L"))
    if arr.shape != shape:
        raise GeometryError(
            f"external raster {path} has shape {arr.shape}, expected {shape}"
        )
    return np.where(arr < 128, np.uint8(STROKE), np.uint8(BACKGROUND))


def compose_instance_strokes(
    image: np.ndarray,
    mask: MaskRaster,
    spec: StylizerSpec = StylizerSpec(),
    gradient_radius: int = DEFAULT_GRADIENT_RADIUS,
    instance_id: str | None = None,
) -> np.ndarray:
    """Full-resolution stroke aggregate: stylizer + gray gradient + contour."""
    fg = mask_foreground(image, mask)
    gray = to_grayscale(fg)
    if spec.kind is StylizerKind.NATIVE_XDOG:
        stylized = xdog_stylize(gray, spec)
    else:
        if instance_id is None:
            raise SampleGenerationError("external stylizer needs an instance id")
        stylized = _load_external_strokes(instance_id, spec, gray.shape)
    edges = binarize_gradient(morph_gradient(gray, gradient_radius))
    contour = mask_contour(mask, gradient_radius)
    return aggregate_strokes(aggregate_strokes(stylized, edges), contour)


def _check_mask_inside_box(
    image: ImageRecord, annotation: Annotation, mask: MaskRaster
) -> None:
    x1, y1, x2, y2 = denormalize_box(annotation.box, image.width, image.height)
    half = BOX_SLACK_FRACTION / 2.0
    grow_x = (x2 - x1) * half
    grow_y = (y2 - y1) * half
    # one pixel of slack absorbs rasterization of the box edge
    lo_x, hi_x = x1 - grow_x - 1.0, x2 + grow_x + 1.0
    lo_y, hi_y = y1 - grow_y - 1.0, y2 + grow_y + 1.0
    ys, xs = np.nonzero(mask.data)
    if (
        xs.min() < lo_x
        or xs.max() + 1 > hi_x
        or ys.min() < lo_y
        or ys.max() + 1 > hi_y
    ):
        raise GeometryError(
            "mask extends beyond the annotation box grown by "
            f"{BOX_SLACK_FRACTION:.0%}"
        )


def generate_sketch_raster(
    image: np.ndarray,
    mask: MaskRaster,
    spec: StylizerSpec = StylizerSpec(),
    canvas: int = DEFAULT_CANVAS,
    gradient_radius: int = DEFAULT_GRADIENT_RADIUS,
    instance_id: str | None = None,
) -> np.ndarray:
    """Pixel pipeline only: compose stroke layers, then render the canvas."""
    strokes = compose_instance_strokes(image, mask, spec, gradient_radius, instance_id)
    return render_canvas(strokes, canvas)


def save_sketch(raster: np.ndarray, path: str) -> None:
    _check_strokes(raster, "sketch")
    Image.fromarray(raster, mode="L").save(path, format="PNG")


def load_sketch(path: str) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return np.where(arr < 128, np.uint8(STROKE), np.uint8(BACKGROUND))


def generate_instance_sketch(
    image_record: ImageRecord,
    annotation: Annotation,
    mask: MaskRaster,
    image: np.ndarray,
    out_dir: str,
    sketch_id: str,
    spec: StylizerSpec = StylizerSpec(),
    canvas: int = DEFAULT_CANVAS,
    gradient_radius: int = DEFAULT_GRADIENT_RADIUS,
    source: SketchSource = SketchSource.SKETCHVCL_O365,
) -> SketchRecord:
    """Generate, save, and describe one instance sketch.

    The mask must lie within the annotation's box grown by 10% about its
    center (plus a pixel of rasterization slack).
    """
    if image.shape[:2] != (image_record.height, image_record.width):
        raise GeometryError(
            f"pixel data {image.shape[:2]} disagrees with record "
            f"{(image_record.height, image_record.width)}"
        )
    _check_mask_inside_box(image_record, annotation, mask)
    raster = generate_sketch_raster(
        image, mask, spec, canvas, gradient_radius, instance_id=sketch_id
    )
    path = os.path.join(out_dir, f"{sketch_id}.png")
    save_sketch(raster, path)
    return SketchRecord(
        id=sketch_id,
        class_id=annotation.class_id,
        source=source,
        path=path,
        origin_image_id=image_record.id,
    )

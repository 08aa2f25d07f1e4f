"""Synthetic shape scenes and the corruption pipeline that makes the target domain.

A scene is one to four non-cluttered shapes (square, disk, triangle) on a
value-noise background.  Rendering is a pure function of the SceneSpec;
corruption (blur, fog, additive noise) turns a clean render into a target
image.  Images are float32 CHW in [0, 1]; all model compute widens to float64
later, so cached and freshly generated datasets agree bitwise.
"""

import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import BoxCXCYWH
from .labels import SceneAnnotation

CLASS_NAMES = ("square", "disk", "triangle")
DATASET_VERSION = "sfodlab-dataset-v1"

MIN_SIZE = 0.15
MAX_SIZE = 0.4
MAX_OBJECTS = 4
MAX_PLACEMENT_TRIES = 100
DECLUTTER_IOU = 0.3
BG_BASE = 0.5
BG_AMPLITUDE = 0.1
BG_GRID = 9
# per-channel fill bands; every object is either dark or bright against the
# mid-gray background so shape edges stay visible under the fog corruption
DARK_BAND = (0.0, 0.35)
BRIGHT_BAND = (0.65, 1.0)


@dataclass(frozen=True)
class SceneObject:
    cls: int
    box: BoxCXCYWH
    fill: tuple


@dataclass(frozen=True)
class SceneSpec:
    """Everything the renderer needs; bg_seed fixes the background texture."""

    objects: tuple
    bg_seed: int


@dataclass(frozen=True)
class DomainShiftSpec:
    """Corruption strengths: gaussian blur sigma (pixels), fog blend toward
    mid-gray, additive pixel noise sigma.  All zero means the clean domain."""

    noise: float = 0.0
    blur: float = 0.0
    fog: float = 0.0

    def __post_init__(self):
        if min(self.noise, self.blur, self.fog) < 0 or self.fog > 1:
            raise ValueError(f"invalid shift spec {self}")

    @property
    def is_identity(self):
        return self.noise == 0 and self.blur == 0 and self.fog == 0


def _boxes_iou(a: BoxCXCYWH, b: BoxCXCYWH):
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / max(union, 1e-9)


def sample_scene(rng) -> SceneSpec:
    """Draw a scene: 1..4 shapes with pairwise box IoU <= 0.3.

    Each object is placed by rejection; after MAX_PLACEMENT_TRIES failures the
    scene keeps the objects placed so far.
    """
    rng = np.random.default_rng(rng)
    n_target = int(rng.integers(1, MAX_OBJECTS + 1))
    objects = []
    for _ in range(n_target):
        placed = False
        for _ in range(MAX_PLACEMENT_TRIES):
            w = float(rng.uniform(MIN_SIZE, MAX_SIZE))
            h = float(rng.uniform(MIN_SIZE, MAX_SIZE))
            cx = float(rng.uniform(w / 2, 1 - w / 2))
            cy = float(rng.uniform(h / 2, 1 - h / 2))
            box = BoxCXCYWH(cx, cy, w, h)
            if all(_boxes_iou(box, o.box) <= DECLUTTER_IOU for o in objects):
                cls = int(rng.integers(0, len(CLASS_NAMES)))
                bright = rng.random() < 0.5
                lo, hi = BRIGHT_BAND if bright else DARK_BAND
                fill = tuple(rng.uniform(lo, hi, size=3).tolist())
                objects.append(SceneObject(cls=cls, box=box, fill=fill))
                placed = True
                break
        if not placed:
            break
    bg_seed = int(rng.integers(0, 2**63 - 1))
    return SceneSpec(objects=tuple(objects), bg_seed=bg_seed)


def _coverage(obj: SceneObject, xs, ys, image_size):
    """Antialiased coverage of one shape on the pixel-center grid, in [0, 1]."""
    x1, y1, x2, y2 = (c * image_size for c in obj.box.corners())
    if CLASS_NAMES[obj.cls] == "square":
        # exact pixel overlap of an axis-aligned rectangle
        cov_x = np.clip(np.minimum(xs + 0.5, x2) - np.maximum(xs - 0.5, x1), 0, 1)
        cov_y = np.clip(np.minimum(ys + 0.5, y2) - np.maximum(ys - 0.5, y1), 0, 1)
        return cov_y[:, None] * cov_x[None, :]
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    a, b = (x2 - x1) / 2, (y2 - y1) / 2
    if CLASS_NAMES[obj.cls] == "disk":
        rho = np.sqrt(
            ((xs[None, :] - cx) / a) ** 2 + ((ys[:, None] - cy) / b) ** 2
        )
        dist = (rho - 1.0) * min(a, b)
        return np.clip(0.5 - dist, 0.0, 1.0)
    # triangle: base on the bottom edge, apex at top center; vertex order is
    # chosen so the signed edge distance is positive outside (y grows downward)
    verts = [(x1, y2), (cx, y1), (x2, y2)]
    px = np.broadcast_to(xs[None, :], (len(ys), len(xs)))
    py = np.broadcast_to(ys[:, None], (len(ys), len(xs)))
    dist = np.full(px.shape, -np.inf)
    for i in range(3):
        ax, ay = verts[i]
        bx_, by_ = verts[(i + 1) % 3]
        ex, ey = bx_ - ax, by_ - ay
        norm = np.hypot(ex, ey)
        d = ((px - ax) * ey - (py - ay) * ex) / max(norm, 1e-9)
        dist = np.maximum(dist, d)
    return np.clip(0.5 - dist, 0.0, 1.0)


def render_scene(spec: SceneSpec, image_size=64):
    """Rasterize a spec deterministically; returns float32 (3, S, S) in [0, 1]."""
    rng = np.random.default_rng(spec.bg_seed)
    coarse = rng.uniform(-1.0, 1.0, size=(3, BG_GRID, BG_GRID))
    zoom = (1.0, image_size / BG_GRID, image_size / BG_GRID)
    texture = ndimage.zoom(coarse, zoom, order=1, mode="nearest", grid_mode=True)
    img = np.clip(BG_BASE + BG_AMPLITUDE * texture, 0.0, 1.0)

    # pixel centers, image coordinates in pixels
    xs = np.arange(image_size, dtype=np.float64) + 0.5
    ys = np.arange(image_size, dtype=np.float64) + 0.5
    for obj in spec.objects:
        cov = _coverage(obj, xs, ys, image_size)
        fill = np.asarray(obj.fill, dtype=np.float64).reshape(3, 1, 1)
        img = cov[None] * fill + (1.0 - cov[None]) * img
    return img.astype(np.float32)


def corrupt(image, shift: DomainShiftSpec, rng):
    """Blur, then fog blend toward 0.5, then clamped additive gaussian noise."""
    rng = np.random.default_rng(rng)
    out = np.asarray(image, dtype=np.float32)
    if shift.blur > 0:
        out = ndimage.gaussian_filter(
            out, sigma=(0.0, shift.blur, shift.blur), mode="reflect"
        )
    if shift.fog > 0:
        out = (1.0 - shift.fog) * out + shift.fog * 0.5
    if shift.noise > 0:
        noise = rng.normal(0.0, shift.noise, size=out.shape)
        out = out + noise.astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


class AnnotationsSealedError(RuntimeError):
    pass


@dataclass
class ImageSet:
    """Images stripped of annotations; the only view the adaptation loop gets."""

    images: np.ndarray
    domain: str

    def __len__(self):
        return len(self.images)


@dataclass
class LabeledDataset:
    """Images plus ground truth for one split of one domain."""

    images: np.ndarray
    annotations: list
    domain: str
    seed: int
    _sealed: bool = field(default=False, repr=False)

    def __post_init__(self):
        if len(self.images) != len(self.annotations):
            raise ValueError("images and annotations must have equal length")
        # route all annotation reads through the seal-aware proxy
        object.__setattr__(self, "_raw_annotations", self.annotations)
        object.__setattr__(self, "annotations", _SealableList(self))

    def __len__(self):
        return len(self.images)

    def seal_annotations(self):
        """Audit switch: any later annotation read raises."""
        self._sealed = True

    def without_labels(self) -> ImageSet:
        return ImageSet(images=self.images, domain=self.domain)


class _SealableList:
    """List proxy that honors the owner's seal flag on every access."""

    def __init__(self, owner):
        self._owner = owner

    def _items(self):
        if self._owner._sealed:
            raise AnnotationsSealedError(
                f"annotations of the {self._owner.domain!r} split are sealed"
            )
        return self._owner._raw_annotations

    def __getitem__(self, i):
        return self._items()[i]

    def __len__(self):
        return len(self._items())

    def __iter__(self):
        return iter(self._items())


def build_dataset(n, domain, shift: DomainShiftSpec, seed, image_size=64) -> LabeledDataset:
    """Generate n scenes; every image's randomness derives from (seed, index)
    so serial and parallel generation agree bitwise."""
    if domain not in ("source", "target"):
        raise ValueError("domain must be 'source' or 'target'")
    images = np.zeros((n, 3, image_size, image_size), dtype=np.float32)
    annotations = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        spec = sample_scene(rng)
        img = render_scene(spec, image_size=image_size)
        if domain == "target" and not shift.is_identity:
            img = corrupt(img, shift, rng)
        images[i] = img
        boxes = np.array([o.box.to_array() for o in spec.objects], dtype=np.float64)
        classes = np.array([o.cls for o in spec.objects], dtype=np.int64)
        annotations.append(SceneAnnotation(boxes=boxes.reshape(-1, 4), classes=classes))
    return LabeledDataset(images=images, annotations=annotations, domain=domain, seed=seed)


def save_dataset(ds: LabeledDataset, path):
    """One container per split: JSON header (annotations, seed, version) plus
    the raw little-endian float32 image buffer.  No timestamps."""
    ann = [
        {"boxes": a.boxes.tolist(), "classes": a.classes.tolist()}
        for a in ds.annotations
    ]
    header = json.dumps(
        {
            "format_version": DATASET_VERSION,
            "domain": ds.domain,
            "seed": ds.seed,
            "dtype": "<f4",
            "shape": list(ds.images.shape),
            "annotations": ann,
        },
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(len(header).to_bytes(8, "little"))
    buf.write(header)
    buf.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as f:
        raw = f.read()
    hlen = int.from_bytes(raw[:8], "little")
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("format_version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {header.get('format_version')!r}")
    shape = tuple(header["shape"])
    images = (
        np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)), offset=8 + hlen)
        .reshape(shape)
        .copy()
    )
    annotations = [
        SceneAnnotation(
            boxes=np.asarray(a["boxes"], dtype=np.float64).reshape(-1, 4),
            classes=np.asarray(a["classes"], dtype=np.int64),
        )
        for a in header["annotations"]
    ]
    return LabeledDataset(
        images=images, annotations=annotations, domain=header["domain"], seed=header["seed"]
    )

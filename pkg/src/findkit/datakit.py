"""Synthetic shapes-world scenes with referring expressions, COCO-style
JSON import/export, and task-aware augmentation.

Scenes are rendered from geometric parameters, so the exact same renderer
can re-draw a scene under any affine transform; the augmentation
consistency tests rely on that. All randomness flows through numpy
Generators seeded by the caller.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .geometry import Box

CATEGORIES = ("circle", "square", "triangle", "star")
CATEGORY_IDS = {name: i + 1 for i, name in enumerate(CATEGORIES)}

COLORS = {
    "red": (220, 50, 50),
    "green": (60, 180, 75),
    "blue": (65, 105, 225),
    "yellow": (240, 220, 60),
    "cyan": (70, 210, 210),
    "magenta": (210, 70, 200),
    "orange": (245, 150, 50),
    "purple": (140, 80, 200),
}
SIZES = ("small", "large")
BACKGROUND = (40, 40, 40)

# Fraction of the image side occupied by the shape half-extent.
SIZE_RANGES = {"small": (0.07, 0.10), "large": (0.13, 0.19)}

# Per-channel normalization applied before the image encoder.
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class SceneObject:
    category: str
    color: str
    size: str
    cx: float
    cy: float
    radius: float  # half-extent of the shape footprint

    @property
    def category_id(self) -> int:
        return CATEGORY_IDS[self.category]

    def vertices(self) -> np.ndarray | None:
        """Polygon outline for polygonal shapes, None for circle/square."""
        if self.category == "triangle":
            return np.array(
                [
                    [self.cx, self.cy - self.radius],
                    [self.cx - self.radius, self.cy + self.radius],
                    [self.cx + self.radius, self.cy + self.radius],
                ]
            )
        if self.category == "star":
            pts = []
            inner = 0.45 * self.radius
            for k in range(10):
                ang = -math.pi / 2 + k * math.pi / 5
                r = self.radius if k % 2 == 0 else inner
                pts.append([self.cx + r * math.cos(ang), self.cy + r * math.sin(ang)])
            return np.array(pts)
        return None

    @property
    def box(self) -> Box:
        verts = self.vertices()
        if verts is None:
            return Box(self.cx - self.radius, self.cy - self.radius, self.cx + self.radius, self.cy + self.radius)
        return Box(float(verts[:, 0].min()), float(verts[:, 1].min()), float(verts[:, 0].max()), float(verts[:, 1].max()))


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) uint8
    objects: list[SceneObject]
    seed: int
    image_size: int


@dataclass(frozen=True)
class Expression:
    text: str
    referent_index: int


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    min_objects: int = 2
    max_objects: int = 5
    overlap_cap: float = 0.3
    margin: float = 2.0
    rejection_budget: int = 1000


def _box_iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _points_in_polygon(xs: np.ndarray, ys: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd crossing test, vectorized over a point grid."""
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (ys < y1) != (ys < y2)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (ys - y1) / (y2 - y1) * (x2 - x1)
        inside ^= crosses & (xs < x_at)
    return inside


def _object_mask(obj: SceneObject, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    xs = xs + 0.5
    ys = ys + 0.5
    if obj.category == "circle":
        return (xs - obj.cx) ** 2 + (ys - obj.cy) ** 2 <= obj.radius**2
    if obj.category == "square":
        return (np.abs(xs - obj.cx) <= obj.radius) & (np.abs(ys - obj.cy) <= obj.radius)
    return _points_in_polygon(xs, ys, obj.vertices())


def render_scene(objects: list[SceneObject], image_size: int) -> np.ndarray:
    """Rasterize objects over the flat background; later objects paint on top."""
    img = np.empty((image_size, image_size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for obj in objects:
        mask = _object_mask(obj, image_size)
        img[mask] = COLORS[obj.color]
    return img


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    """Rejection-sample non-overlapping colored shapes and rasterize them."""
    rng = np.random.default_rng(seed)
    size = config.image_size
    count = int(rng.integers(config.min_objects, config.max_objects + 1))

    objects: list[SceneObject] = []
    attempts = 0
    while len(objects) < count:
        attempts += 1
        if attempts > config.rejection_budget:
            raise RuntimeError(
                f"scene generation exhausted {config.rejection_budget} placement attempts"
            )
        category = CATEGORIES[rng.integers(len(CATEGORIES))]
        color = list(COLORS)[rng.integers(len(COLORS))]
        sz = SIZES[rng.integers(len(SIZES))]
        lo, hi = SIZE_RANGES[sz]
        radius = float(rng.uniform(lo, hi) * size)
        span = radius + config.margin
        if size - 2 * span <= 0:
            raise RuntimeError("image too small for the configured object sizes")
        cx = float(rng.uniform(span, size - span))
        cy = float(rng.uniform(span, size - span))
        cand = SceneObject(category, color, sz, cx, cy, radius)
        if all(_box_iou(cand.box, o.box) <= config.overlap_cap for o in objects):
            objects.append(cand)

    return Scene(image=render_scene(objects, size), objects=objects, seed=seed, image_size=size)


# --- referring expressions ------------------------------------------------

# Attribute prefixes tried in order; the first one unique in the scene wins.
_ATTR_CHAINS = (("category",), ("color", "category"), ("size", "color", "category"))

_RELATIONS = ("left of", "right of", "above", "below")


def _describe(obj: SceneObject, attrs: tuple[str, ...]) -> str:
    words = []
    if "size" in attrs:
        words.append(obj.size)
    if "color" in attrs:
        words.append(obj.color)
    words.append(obj.category)
    return " ".join(words)


def _attrs_match(obj: SceneObject, ref: SceneObject, attrs: tuple[str, ...]) -> bool:
    return all(getattr(obj, a if a != "category" else "category") == getattr(ref, a if a != "category" else "category") for a in attrs)


def _unique_attr_chain(scene: Scene, idx: int) -> tuple[str, ...] | None:
    ref = scene.objects[idx]
    for attrs in _ATTR_CHAINS:
        matches = [o for o in scene.objects if _attrs_match(o, ref, attrs)]
        if len(matches) == 1:
            return attrs
    return None


def relation_holds(rel: str, a: SceneObject, b: SceneObject) -> bool:
    if rel == "left of":
        return a.cx < b.cx
    if rel == "right of":
        return a.cx > b.cx
    if rel == "above":
        return a.cy < b.cy
    if rel == "below":
        return a.cy > b.cy
    raise ValueError(f"unknown relation {rel!r}")


def synthesize_expression(scene: Scene, referent_index: int, rng=None) -> Expression | None:
    """Shortest attribute phrase that singles out the referent, or a spatial
    relation to a uniquely-describable anchor object as a fallback.

    Returns None when no unique expression exists (caller resamples the
    referent). Uniqueness is checked exhaustively against every object.
    """
    if not 0 <= referent_index < len(scene.objects):
        raise ValueError(f"referent index {referent_index} out of range")
    ref = scene.objects[referent_index]

    attrs = _unique_attr_chain(scene, referent_index)
    if attrs is not None:
        return Expression(f"the {_describe(ref, attrs)}", referent_index)

    # Exact twins exist; disambiguate by relation to a unique anchor.
    full = _ATTR_CHAINS[-1]
    for rel in _RELATIONS:
        for j, anchor in enumerate(scene.objects):
            if j == referent_index:
                continue
            anchor_attrs = _unique_attr_chain(scene, j)
            if anchor_attrs is None:
                continue
            candidates = [
                o
                for o in scene.objects
                if _attrs_match(o, ref, full) and relation_holds(rel, o, anchor)
            ]
            if candidates == [ref]:
                text = f"the {_describe(ref, full)} {rel} the {_describe(anchor, anchor_attrs)}"
                return Expression(text, referent_index)
    return None


def sample_expression(scene: Scene, rng: np.random.Generator) -> Expression | None:
    """Pick a random referent that admits a unique expression."""
    order = rng.permutation(len(scene.objects))
    for idx in order:
        expr = synthesize_expression(scene, int(idx), rng)
        if expr is not None:
            return expr
    return None


# --- COCO-style dataset ---------------------------------------------------


@dataclass
class CocoLikeDataset:
    images: list[dict]
    annotations: list[dict]
    categories: list[dict]

    def to_json(self) -> dict:
        return {"images": self.images, "annotations": self.annotations, "categories": self.categories}


def default_categories() -> list[dict]:
    return [{"id": CATEGORY_IDS[n], "name": n, "supercategory": "shape"} for n in CATEGORIES]


def validate_coco(data: CocoLikeDataset) -> None:
    image_ids = [im["id"] for im in data.images]
    if len(set(image_ids)) != len(image_ids):
        raise ValueError("duplicate image ids")
    cat_ids = {c["id"] for c in data.categories}
    sizes = {im["id"]: (im["height"], im["width"]) for im in data.images}
    ann_ids = set()
    for ann in data.annotations:
        if ann["id"] in ann_ids:
            raise ValueError(f"duplicate annotation id {ann['id']}")
        ann_ids.add(ann["id"])
        if ann["image_id"] not in sizes:
            raise ValueError(f"annotation {ann['id']} references missing image id {ann['image_id']}")
        if ann["category_id"] not in cat_ids:
            raise ValueError(f"annotation {ann['id']} references missing category id {ann['category_id']}")
        x, y, w, h = ann["bbox"]
        height, width = sizes[ann["image_id"]]
        if w < 0 or h < 0 or x < 0 or y < 0 or x + w > width + 1e-6 or y + h > height + 1e-6:
            raise ValueError(f"annotation {ann['id']} bbox {ann['bbox']} outside image {ann['image_id']}")


def load_coco_json(path) -> CocoLikeDataset:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    data = CocoLikeDataset(
        images=raw["images"], annotations=raw["annotations"], categories=raw["categories"]
    )
    validate_coco(data)
    return data


def annotation_box(ann: dict) -> Box:
    x, y, w, h = ann["bbox"]
    return Box.from_xywh(x, y, w, h)


@dataclass
class Sample:
    """One adapted unit of supervision: image + objects (+ expression)."""

    image_id: int
    image: np.ndarray  # (H, W, 3) uint8
    boxes: list[Box]
    category_ids: list[int]
    expression: str | None = None
    referent_index: int | None = None


def scene_to_sample(scene: Scene, image_id: int, expression: Expression | None = None) -> Sample:
    return Sample(
        image_id=image_id,
        image=scene.image,
        boxes=[o.box for o in scene.objects],
        category_ids=[o.category_id for o in scene.objects],
        expression=expression.text if expression else None,
        referent_index=expression.referent_index if expression else None,
    )


def generate_dataset(root_seed: int, count: int, config: SceneConfig = SceneConfig()):
    """Deterministic list of (Scene, Expression) pairs.

    Scene i is generated from a seed derived from (root_seed, i); scenes
    whose objects admit no unique expression are replaced by the next seed.
    """
    out = []
    salt = 0
    while len(out) < count:
        seed = root_seed * 1_000_003 + len(out) * 9176 + salt
        try:
            scene = generate_scene(seed, config)
        except RuntimeError:
            salt += 1
            continue
        expr = sample_expression(scene, np.random.default_rng(seed ^ 0x5EED))
        if expr is None:
            salt += 1
            continue
        out.append((scene, expr))
    return out


def samples_from_pairs(pairs) -> list[Sample]:
    return [scene_to_sample(scene, i, expr) for i, (scene, expr) in enumerate(pairs)]


def export_dataset(pairs, out_dir) -> None:
    """Write images/, instances.json, and expressions.jsonl."""
    from PIL import Image

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    images, annotations, expressions = [], [], []
    ann_id = 1
    for i, (scene, expr) in enumerate(pairs):
        fname = f"scene_{i:05d}.png"
        Image.fromarray(scene.image).save(os.path.join(out_dir, "images", fname))
        images.append(
            {"id": i, "file_name": f"images/{fname}", "height": scene.image_size, "width": scene.image_size}
        )
        referent_ann_id = None
        for j, obj in enumerate(scene.objects):
            x, y, w, h = obj.box.to_xywh()
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": i,
                    "category_id": obj.category_id,
                    "bbox": [round(x, 3), round(y, 3), round(w, 3), round(h, 3)],
                    "attributes": {"color": obj.color, "size": obj.size},
                }
            )
            if expr and j == expr.referent_index:
                referent_ann_id = ann_id
            ann_id += 1
        if expr:
            expressions.append(
                {"image_id": i, "expression": expr.text, "annotation_id": referent_ann_id}
            )

    dataset = CocoLikeDataset(images=images, annotations=annotations, categories=default_categories())
    with open(os.path.join(out_dir, "instances.json"), "w", encoding="utf-8") as fh:
        json.dump(dataset.to_json(), fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "expressions.jsonl"), "w", encoding="utf-8") as fh:
        for rec in expressions:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(data_dir) -> list[Sample]:
    """Read an exported dataset directory back into Samples."""
    from PIL import Image

    data = load_coco_json(os.path.join(data_dir, "instances.json"))
    expr_by_image: dict[int, dict] = {}
    expr_path = os.path.join(data_dir, "expressions.jsonl")
    if os.path.exists(expr_path):
        with open(expr_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    expr_by_image[rec["image_id"]] = rec

    anns_by_image: dict[int, list[dict]] = {}
    for ann in data.annotations:
        anns_by_image.setdefault(ann["image_id"], []).append(ann)

    samples = []
    for im in data.images:
        anns = sorted(anns_by_image.get(im["id"], []), key=lambda a: a["id"])
        arr = np.asarray(Image.open(os.path.join(data_dir, im["file_name"])).convert("RGB"))
        expr = expr_by_image.get(im["id"])
        referent = None
        if expr is not None:
            ann_ids = [a["id"] for a in anns]
            referent = ann_ids.index(expr["annotation_id"])
        samples.append(
            Sample(
                image_id=im["id"],
                image=arr,
                boxes=[annotation_box(a) for a in anns],
                category_ids=[a["category_id"] for a in anns],
                expression=expr["expression"] if expr else None,
                referent_index=referent,
            )
        )
    return samples


# --- augmentation ---------------------------------------------------------


@dataclass(frozen=True)
class AugmentProfile:
    scale_low: float
    scale_high: float
    out_size: int
    flip_prob: float = 0.5


def augment_profile(name: str, out_size: int) -> AugmentProfile:
    if name == "full":
        return AugmentProfile(0.4, 2.5, out_size)
    if name == "ablation":
        return AugmentProfile(0.8, 1.25, out_size)
    if name == "none":
        return AugmentProfile(1.0, 1.0, out_size, flip_prob=0.0)
    raise ValueError(f"unknown augmentation profile {name!r}")


@dataclass
class AugmentRecord:
    scale: float
    offset_x: int  # crop offset (positive) in scaled-image coords
    offset_y: int
    flipped: bool


@dataclass
class AugmentResult:
    image: np.ndarray  # (out, out, 3) uint8
    boxes: list[Box]
    kept_indices: list[int]
    record: AugmentRecord


def _resize(image: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    import torch

    t = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1)[None]
    out = torch.nn.functional.interpolate(t, size=(new_h, new_w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).clamp(0, 255).round().to(torch.uint8).numpy()


def _apply_geometry(
    boxes: list[Box], scale: float, ox: int, oy: int, flipped: bool, out: int
) -> tuple[list[Box], list[int]]:
    kept_boxes, kept_idx = [], []
    for i, b in enumerate(boxes):
        x1, y1, x2, y2 = b.x1 * scale - ox, b.y1 * scale - oy, b.x2 * scale - ox, b.y2 * scale - oy
        if flipped:
            x1, x2 = out - x2, out - x1
        x1, x2 = max(0.0, x1), min(float(out), x2)
        y1, y2 = max(0.0, y1), min(float(out), y2)
        if x2 - x1 >= 1.0 and y2 - y1 >= 1.0:
            kept_boxes.append(Box(x1, y1, x2, y2))
            kept_idx.append(i)
    return kept_boxes, kept_idx


def augment(
    image: np.ndarray,
    boxes: list[Box],
    task: str,
    rng: np.random.Generator,
    profile: AugmentProfile,
    referent_index: int | None = None,
) -> AugmentResult:
    """Scale-jitter, crop/pad to the output size, and (DET/LOC only) flip.

    Boxes are transformed with the image; targets cropped fully out are
    dropped. For REC the referent must survive: crops that remove it are
    resampled up to 10 times, then the identity transform is used. Flips
    are never applied to REC so left/right language stays truthful.
    """
    out = profile.out_size
    flip_allowed = task in ("DET", "LOC") and profile.flip_prob > 0

    for attempt in range(10):
        scale = float(rng.uniform(profile.scale_low, profile.scale_high))
        new_h = max(1, int(round(image.shape[0] * scale)))
        new_w = max(1, int(round(image.shape[1] * scale)))
        sy = new_h / image.shape[0]
        sx = new_w / image.shape[1]
        ox = int(rng.integers(0, max(new_w - out, 0) + 1))
        oy = int(rng.integers(0, max(new_h - out, 0) + 1))
        flipped = bool(flip_allowed and rng.random() < profile.flip_prob)

        # square inputs keep sx == sy; guard anyway
        eff_scale = (sx + sy) / 2
        kept_boxes, kept_idx = _apply_geometry(boxes, eff_scale, ox, oy, flipped, out)
        if task == "REC" and referent_index is not None and referent_index not in kept_idx:
            continue

        resized = _resize(image, new_h, new_w)
        canvas = np.zeros((out, out, 3), dtype=np.uint8)
        src = resized[oy : oy + out, ox : ox + out]
        canvas[: src.shape[0], : src.shape[1]] = src
        if flipped:
            canvas = canvas[:, ::-1].copy()
        return AugmentResult(canvas, kept_boxes, kept_idx, AugmentRecord(eff_scale, ox, oy, flipped))

    # identity fallback: pad or center-clip to the output size without jitter
    canvas = np.zeros((out, out, 3), dtype=np.uint8)
    src = image[:out, :out]
    canvas[: src.shape[0], : src.shape[1]] = src
    kept_boxes, kept_idx = _apply_geometry(boxes, 1.0, 0, 0, False, out)
    return AugmentResult(canvas, kept_boxes, kept_idx, AugmentRecord(1.0, 0, 0, False))


def to_model_input(image: np.ndarray):
    """uint8 (H, W, 3) -> normalized float32 torch tensor (3, H, W)."""
    import torch

    arr = image.astype(np.float32) / 255.0
    arr = (arr - PIXEL_MEAN) / PIXEL_STD
    return torch.from_numpy(arr).permute(2, 0, 1)

"""Box algebra, anchors, delta coding, NMS, and target matching.

All boxes use the corner convention (x1, y1, x2, y2) in image pixels.
COCO-style (x, y, w, h) records are converted at ingestion (see datakit).
Every function here is pure: no module state, no RNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

# Largest |dw|/|dh| accepted by decode_deltas; prevents exp() overflow on
# untrained regression heads.
DELTA_CLAMP = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in pixel coordinates, corners (x1, y1, x2, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.width, self.height)


def boxes_to_tensor(boxes, dtype=torch.float32) -> Tensor:
    """Stack an iterable of Box (or 4-sequences) into an (N, 4) tensor."""
    rows = []
    for b in boxes:
        if isinstance(b, Box):
            rows.append((b.x1, b.y1, b.x2, b.y2))
        else:
            rows.append(tuple(b))
    if not rows:
        return torch.zeros((0, 4), dtype=dtype)
    return torch.tensor(rows, dtype=dtype)


def iou_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise IoU between (N, 4) and (M, 4) corner boxes.

    Zero-area boxes get IoU 0 against everything, including themselves.
    """
    a = a.reshape(-1, 4)
    b = b.reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])

    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]

    union = area_a[:, None] + area_b[None, :] - inter
    iou = torch.where(union > 0, inter / union.clamp(min=torch.finfo(a.dtype).tiny), torch.zeros_like(inter))
    return iou


@dataclass(frozen=True)
class LevelSpec:
    """Anchor layout for one pyramid level: one base scale, several ratios."""

    stride: int
    base_size: float
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    @property
    def num_anchors_per_cell(self) -> int:
        return len(self.aspect_ratios)


def default_level_specs(levels=(2, 3, 4, 5)) -> dict[int, LevelSpec]:
    """One scale per level, ratios {0.5, 1, 2}, base size 4x stride."""
    return {k: LevelSpec(stride=2**k, base_size=4.0 * 2**k) for k in levels}


@dataclass
class AnchorSet:
    """Per-level anchor tensors plus the specs that produced them."""

    image_size: tuple[int, int]  # (height, width)
    specs: dict[int, LevelSpec]
    anchors: dict[int, Tensor]  # level -> (H*W*A, 4)

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(sorted(self.anchors))

    def all_anchors(self) -> Tensor:
        return torch.cat([self.anchors[k] for k in self.levels], dim=0)

    def counts(self) -> dict[int, int]:
        return {k: self.anchors[k].shape[0] for k in self.levels}


def _base_anchors(spec: LevelSpec) -> Tensor:
    """Anchors centered at the origin, one per aspect ratio, area base_size^2."""
    ratios = torch.tensor(spec.aspect_ratios, dtype=torch.float32)
    # ratio = h / w with h * w = base_size^2
    h = spec.base_size * torch.sqrt(ratios)
    w = spec.base_size / torch.sqrt(ratios)
    return torch.stack([-w / 2, -h / 2, w / 2, h / 2], dim=1)


def generate_anchors(image_size, level_specs: dict[int, LevelSpec]) -> AnchorSet:
    """Tile anchors over each level's feature grid.

    Anchor groups are centered at (stride*(j+0.5), stride*(i+0.5)) for cell
    (i, j). The image size must be divisible by the largest stride.
    """
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    height, width = image_size
    max_stride = max(s.stride for s in level_specs.values())
    if height % max_stride or width % max_stride:
        raise ValueError(
            f"image size {image_size} not divisible by largest stride {max_stride}"
        )

    anchors: dict[int, Tensor] = {}
    for level in sorted(level_specs):
        spec = level_specs[level]
        grid_h, grid_w = height // spec.stride, width // spec.stride
        cy = (torch.arange(grid_h, dtype=torch.float32) + 0.5) * spec.stride
        cx = (torch.arange(grid_w, dtype=torch.float32) + 0.5) * spec.stride
        cy, cx = torch.meshgrid(cy, cx, indexing="ij")
        shifts = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
        base = _base_anchors(spec).reshape(1, -1, 4)
        anchors[level] = (shifts + base).reshape(-1, 4)
    return AnchorSet(image_size=(height, width), specs=dict(level_specs), anchors=anchors)


def encode_deltas(anchors: Tensor, targets: Tensor) -> Tensor:
    """Box regression targets (dx, dy, dw, dh) taking each anchor to its target.

    dx, dy are center offsets normalized by anchor width/height; dw, dh are
    log size ratios. Inverse of decode_deltas.
    """
    if anchors.shape != targets.shape:
        raise ValueError(f"shape mismatch: {anchors.shape} vs {targets.shape}")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if anchors.numel() and ((aw <= 0).any() or (ah <= 0).any()):
        raise ValueError("degenerate anchor with non-positive width/height")
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah

    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th

    return torch.stack(
        [(tx - ax) / aw, (ty - ay) / ah, torch.log(tw / aw), torch.log(th / ah)],
        dim=1,
    )


def decode_deltas(anchors: Tensor, deltas: Tensor, clip_to=None) -> Tensor:
    """Apply (dx, dy, dw, dh) offsets to anchors; optionally clip to (H, W).

    Clipping is inference-only behavior, controlled by passing clip_to.
    """
    if anchors.shape[0] != deltas.shape[0]:
        raise ValueError(f"length mismatch: {anchors.shape[0]} vs {deltas.shape[0]}")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if anchors.numel() and ((aw <= 0).any() or (ah <= 0).any()):
        raise ValueError("degenerate anchor with non-positive width/height")
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah

    dx, dy = deltas[:, 0], deltas[:, 1]
    dw = deltas[:, 2].clamp(max=DELTA_CLAMP)
    dh = deltas[:, 3].clamp(max=DELTA_CLAMP)

    cx = dx * aw + ax
    cy = dy * ah + ay
    w = torch.exp(dw) * aw
    h = torch.exp(dh) * ah

    boxes = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)
    if clip_to is not None:
        height, width = clip_to
        boxes = torch.stack(
            [
                boxes[:, 0].clamp(0, width),
                boxes[:, 1].clamp(0, height),
                boxes[:, 2].clamp(0, width),
                boxes[:, 3].clamp(0, height),
            ],
            dim=1,
        )
    return boxes


def nms(boxes: Tensor, scores: Tensor, iou_threshold: float, max_out=None) -> Tensor:
    """Greedy non-maximum suppression.

    Returns kept indices into the input, in descending score order. Ties
    break toward the lower input index so results are reproducible. The kept
    set is pairwise IoU <= iou_threshold.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if boxes.shape[0] == 0:
        return torch.zeros(0, dtype=torch.long)
    order = torch.argsort(scores, descending=True, stable=True)
    ious = iou_matrix(boxes, boxes)

    kept = []
    alive = torch.ones(boxes.shape[0], dtype=torch.bool)
    for idx in order.tolist():
        if not alive[idx]:
            continue
        kept.append(idx)
        if max_out is not None and len(kept) >= max_out:
            break
        alive &= ious[idx] <= iou_threshold
        alive[idx] = False
    return torch.tensor(kept, dtype=torch.long)


POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class MatchResult:
    """Per-candidate label (1 pos / 0 neg / -1 ignore) and matched gt index.

    matched_idx is -1 wherever the label is not positive.
    """

    labels: Tensor  # (N,) int8
    matched_idx: Tensor  # (N,) long

    def __post_init__(self):
        pos = self.labels == POSITIVE
        assert (self.matched_idx[pos] >= 0).all(), "positive without gt index"
        assert (self.matched_idx[~pos] == -1).all(), "gt index on non-positive"


def match_targets(
    candidates: Tensor,
    gt: Tensor,
    pos_iou: float,
    neg_iou: float,
    force_best_match: bool = False,
) -> MatchResult:
    """Label candidates against ground truth by IoU thresholds.

    IoU >= pos_iou is positive (matched to the argmax gt), IoU < neg_iou is
    negative, anything between is ignored. With force_best_match every gt
    additionally claims its best-IoU candidates (ties included) as positive,
    so no gt goes unmatched.
    """
    if pos_iou < neg_iou:
        raise ValueError(f"pos_iou {pos_iou} < neg_iou {neg_iou}")
    n = candidates.shape[0]
    labels = torch.full((n,), NEGATIVE, dtype=torch.int8)
    matched = torch.full((n,), -1, dtype=torch.long)
    if gt.shape[0] == 0:
        return MatchResult(labels, matched)

    ious = iou_matrix(candidates, gt)
    best_iou, best_gt = ious.max(dim=1)

    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = IGNORE
    pos = best_iou >= pos_iou

    if force_best_match:
        # Every gt claims its max-IoU candidates; candidates keep their own
        # argmax gt as the match (standard low-quality-match rule).
        per_gt_best = ious.max(dim=0).values
        claimed = (ious == per_gt_best[None, :]) & (ious > 0)
        pos = pos | claimed.any(dim=1)

    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    return MatchResult(labels, matched)

"""Two-stage detection head over the fused pyramid: region proposals, RoI
feature extraction, box/class prediction, the shared losses, and the
end-to-end inference pipeline.

The losses are task-agnostic on purpose: they are pure functions of
predictions and matched targets, so referring-expression, localization, and
detection examples all pay exactly the same objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from . import geometry
from .fusion import LEVELS, FusionConfig, MultiLevelFusion
from .imenc import STRIDES, ImageEncoder
from .textenc import DEFAULT_MAX_LEN, TextEncoder, Vocabulary, tokenize_batch

# RoI level assignment: boxes of sqrt(area) == CANONICAL_SIZE land on level
# CANONICAL_LEVEL; each doubling moves one level up.
CANONICAL_LEVEL = 2
CANONICAL_SIZE = 16.0


@dataclass
class Proposal:
    """Candidate region with its objectness score."""

    box: geometry.Box
    score: float


@dataclass
class Detection:
    """Final output unit for every task: box, category, confidence."""

    box: geometry.Box
    category_id: int  # 1..K; background is never emitted
    score: float


def detections_to_record(image_id, query: str, detections: list[Detection]) -> dict:
    """JSON-serializable record for one (image, query) result."""
    return {
        "image_id": image_id,
        "query": query,
        "boxes": [[d.box.x1, d.box.y1, d.box.x2, d.box.y2] for d in detections],
        "scores": [d.score for d in detections],
        "categories": [d.category_id for d in detections],
    }


class RPNHead(nn.Module):
    """Shared 3x3 conv + two 1x1 heads, applied identically at every level."""

    def __init__(self, dim: int, num_anchors: int):
        super().__init__()
        self.num_anchors = num_anchors
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)
        self.relu = nn.ReLU()
        self.objectness = nn.Conv2d(dim, num_anchors, 1)
        self.deltas = nn.Conv2d(dim, num_anchors * 4, 1)

    def forward_level(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        """Returns per-anchor flattened (B, H*W*A) logits and (B, H*W*A, 4) deltas.

        Flattening is row-major over cells with the per-cell anchors
        innermost, matching geometry.generate_anchors order.
        """
        b, _, h, w = feat.shape
        x = self.relu(self.conv(feat))
        obj = self.objectness(x).permute(0, 2, 3, 1).reshape(b, h * w * self.num_anchors)
        dl = self.deltas(x).reshape(b, self.num_anchors, 4, h, w)
        dl = dl.permute(0, 3, 4, 1, 2).reshape(b, h * w * self.num_anchors, 4)
        return obj, dl

    def forward(self, pyramid: dict[int, Tensor]) -> dict[int, tuple[Tensor, Tensor]]:
        return {lv: self.forward_level(pyramid[lv]) for lv in sorted(pyramid)}


@dataclass(frozen=True)
class ProposalConfig:
    pre_nms_top_n: int = 256
    post_nms_top_n: int = 64
    nms_threshold: float = 0.7
    min_size: float = 1.0


def generate_proposals(
    rpn_out: dict[int, tuple[Tensor, Tensor]],
    anchor_set: geometry.AnchorSet,
    cfg: ProposalConfig,
    batch_index: int = 0,
) -> tuple[Tensor, Tensor]:
    """Decode one image's RPN outputs into scored proposal boxes.

    Per level: decode deltas, clip to the image, drop boxes thinner than
    min_size, keep the top pre_nms_top_n by score. Levels are then pooled,
    NMS'd at nms_threshold, and the top post_nms_top_n survive. All ties
    break toward the lower anchor index.
    """
    h, w = anchor_set.image_size
    boxes_all, scores_all = [], []
    for lv in anchor_set.levels:
        obj, deltas = rpn_out[lv]
        obj = obj[batch_index].detach()
        deltas = deltas[batch_index].detach()
        anchors = anchor_set.anchors[lv].to(deltas.dtype)
        boxes = geometry.decode_deltas(anchors, deltas, clip_to=(h, w))
        scores = torch.sigmoid(obj)

        wide = (boxes[:, 2] - boxes[:, 0]) >= cfg.min_size
        tall = (boxes[:, 3] - boxes[:, 1]) >= cfg.min_size
        keep = wide & tall
        boxes, scores = boxes[keep], scores[keep]

        if boxes.shape[0] > cfg.pre_nms_top_n:
            order = torch.argsort(scores, descending=True, stable=True)[: cfg.pre_nms_top_n]
            order = order.sort().values  # preserve anchor-index tie order downstream
            boxes, scores = boxes[order], scores[order]
        boxes_all.append(boxes)
        scores_all.append(scores)

    boxes = torch.cat(boxes_all, dim=0)
    scores = torch.cat(scores_all, dim=0)
    if boxes.shape[0] == 0:
        return boxes, scores
    keep = geometry.nms(boxes, scores, cfg.nms_threshold, max_out=cfg.post_nms_top_n)
    return boxes[keep], scores[keep]


def assign_roi_levels(boxes: Tensor, levels=LEVELS) -> Tensor:
    """Map each box to a pyramid level by its size (sqrt-area rule)."""
    w = (boxes[:, 2] - boxes[:, 0]).clamp(min=1e-6)
    h = (boxes[:, 3] - boxes[:, 1]).clamp(min=1e-6)
    k = CANONICAL_LEVEL + torch.floor(torch.log2(torch.sqrt(w * h) / CANONICAL_SIZE))
    return k.clamp(min(levels), max(levels)).long()


def _bilinear_sample(feat: Tensor, batch_idx: Tensor, xs: Tensor, ys: Tensor) -> Tensor:
    """Sample (B, D, H, W) features at per-point continuous coords.

    xs, ys: (P, S) in feature-grid units (cell centers at integers). Points
    outside the grid clamp to the border. Returns (P, S, D).
    """
    _, d, h, w = feat.shape
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    wx = (xs - x0).unsqueeze(-1)
    wy = (ys - y0).unsqueeze(-1)

    x0i = x0.long().clamp(0, w - 1)
    x1i = (x0.long() + 1).clamp(0, w - 1)
    y0i = y0.long().clamp(0, h - 1)
    y1i = (y0.long() + 1).clamp(0, h - 1)

    flat = feat.permute(0, 2, 3, 1).reshape(-1, d)
    base = batch_idx[:, None] * (h * w)

    def corner(yi, xi):
        return flat[base + yi * w + xi]  # (P, S, D)

    top = corner(y0i, x0i) * (1 - wx) + corner(y0i, x1i) * wx
    bot = corner(y1i, x0i) * (1 - wx) + corner(y1i, x1i) * wx
    return top * (1 - wy) + bot * wy


def roi_extract(
    pyramid: dict[int, Tensor],
    boxes: Tensor,
    batch_idx: Tensor,
    out_size: int = 7,
    strides: dict[int, int] = STRIDES,
) -> Tensor:
    """Bilinear out_size x out_size crops from the size-matched pyramid level.

    One sample point per bin, at the bin center. Differentiable w.r.t. the
    pyramid. Degenerate boxes (zero width or height) yield zero features.
    """
    p = boxes.shape[0]
    some = next(iter(pyramid.values()))
    d = some.shape[1]
    out = some.new_zeros((p, d, out_size, out_size))
    if p == 0:
        return out

    degenerate = (boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])
    levels = assign_roi_levels(boxes, levels=tuple(sorted(pyramid)))

    grid = (torch.arange(out_size, dtype=boxes.dtype) + 0.5) / out_size
    for lv in sorted(pyramid):
        pick = (levels == lv) & ~degenerate
        if not pick.any():
            continue
        idx = pick.nonzero(as_tuple=True)[0]
        b = boxes[idx]
        stride = strides[lv]
        bw = (b[:, 2] - b[:, 0])[:, None]
        bh = (b[:, 3] - b[:, 1])[:, None]
        # image coords of bin centers -> feature-grid coords
        xs = (b[:, 0:1] + grid[None, :] * bw) / stride - 0.5
        ys = (b[:, 1:2] + grid[None, :] * bh) / stride - 0.5
        xs = xs[:, None, :].expand(-1, out_size, -1).reshape(len(idx), -1)
        ys = ys[:, :, None].expand(-1, -1, out_size).reshape(len(idx), -1)
        sampled = _bilinear_sample(pyramid[lv], batch_idx[idx], xs, ys)
        out[idx] = sampled.reshape(len(idx), out_size, out_size, d).permute(0, 3, 1, 2)
    return out


@dataclass
class HeadOutput:
    """Class logits over K+1 (background first) and class-agnostic deltas."""

    class_logits: Tensor  # (P, K+1)
    box_deltas: Tensor  # (P, 4)


class BoxHead(nn.Module):
    """Flatten RoI features through two hidden layers into logits + deltas."""

    def __init__(self, dim: int, out_size: int, num_classes: int, hidden: int = 256):
        super().__init__()
        self.num_classes = num_classes
        self.trunk = nn.Sequential(
            nn.Flatten(),
            nn.Linear(dim * out_size * out_size, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
        )
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, 4)

    def forward(self, roi_feats: Tensor) -> HeadOutput:
        x = self.trunk(roi_feats)
        return HeadOutput(class_logits=self.cls(x), box_deltas=self.reg(x))


@dataclass
class LossReport:
    """The four shared loss terms; total is their unweighted sum."""

    rpn_cls: Tensor
    rpn_reg: Tensor
    box_cls: Tensor
    box_reg: Tensor

    @property
    def total(self) -> Tensor:
        return self.rpn_cls + self.rpn_reg + self.box_cls + self.box_reg

    def detach_floats(self) -> dict[str, float]:
        return {
            "rpn_cls": float(self.rpn_cls.detach()),
            "rpn_reg": float(self.rpn_reg.detach()),
            "box_cls": float(self.box_cls.detach()),
            "box_reg": float(self.box_reg.detach()),
            "total": float(self.total.detach()),
        }


def smooth_l1(pred: Tensor, target: Tensor, beta: float) -> Tensor:
    diff = (pred - target).abs()
    return torch.where(diff < beta, 0.5 * diff**2 / beta, diff - 0.5 * beta)


def detection_loss(
    rpn_objectness: Tensor,  # (Sa,) logits for the sampled anchors
    rpn_deltas: Tensor,  # (Sa, 4) predicted deltas for the sampled anchors
    rpn_labels: Tensor,  # (Sa,) {0, 1}
    rpn_reg_targets: Tensor,  # (Sa, 4); only positive rows contribute
    class_logits: Tensor,  # (Sr, K+1)
    box_deltas: Tensor,  # (Sr, 4)
    class_labels: Tensor,  # (Sr,) 0..K, 0 = background
    box_reg_targets: Tensor,  # (Sr, 4); only foreground rows contribute
    rpn_beta: float = 1.0 / 9.0,
    box_beta: float = 1.0,
) -> LossReport:
    """Shared losses of the two stages, identical for every task.

    RPN: binary cross-entropy over sampled anchors, smooth-L1 over positive
    anchors (sum normalized by the sampled count). Box stage: (K+1)-way
    cross-entropy, smooth-L1 over foreground rows only. Empty inputs give
    zero losses.
    """
    zero = rpn_objectness.new_zeros(()) if rpn_objectness.numel() else torch.zeros(())

    n_a = rpn_labels.numel()
    if n_a:
        rpn_cls = nn.functional.binary_cross_entropy_with_logits(
            rpn_objectness, rpn_labels.to(rpn_objectness.dtype)
        )
        pos = rpn_labels > 0
        if pos.any():
            rpn_reg = smooth_l1(rpn_deltas[pos], rpn_reg_targets[pos], rpn_beta).sum() / n_a
        else:
            rpn_reg = zero.clone()
    else:
        rpn_cls, rpn_reg = zero.clone(), zero.clone()

    n_r = class_labels.numel()
    if n_r:
        box_cls = nn.functional.cross_entropy(class_logits, class_labels)
        fg = class_labels > 0
        if fg.any():
            box_reg = smooth_l1(box_deltas[fg], box_reg_targets[fg], box_beta).sum() / n_r
        else:
            box_reg = class_logits.new_zeros(())
    else:
        box_cls = zero.clone()
        box_reg = zero.clone()
    return LossReport(rpn_cls=rpn_cls, rpn_reg=rpn_reg, box_cls=box_cls, box_reg=box_reg)


@dataclass(frozen=True)
class SamplerConfig:
    """Minibatch sampling for the two loss stages."""

    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_batch: int = 32
    roi_pos_fraction: float = 0.25
    roi_pos_iou: float = 0.5
    roi_neg_iou: float = 0.5


def _sample_balanced(
    labels: Tensor, batch: int, pos_fraction: float, rng: torch.Generator
) -> Tensor:
    """Pick up to `batch` indices, at most pos_fraction of them positive."""
    pos = (labels == geometry.POSITIVE).nonzero(as_tuple=True)[0]
    neg = (labels == geometry.NEGATIVE).nonzero(as_tuple=True)[0]
    n_pos = min(pos.numel(), int(round(batch * pos_fraction)))
    n_neg = min(neg.numel(), batch - n_pos)
    pos_pick = pos[torch.randperm(pos.numel(), generator=rng)[:n_pos]]
    neg_pick = neg[torch.randperm(neg.numel(), generator=rng)[:n_neg]]
    return torch.cat([pos_pick, neg_pick]).sort().values


@dataclass
class RPNTargets:
    sampled_idx: Tensor  # (Sa,) indices into the flattened anchor list
    labels: Tensor  # (Sa,) {0, 1}
    reg_targets: Tensor  # (Sa, 4)


def assign_rpn_targets(
    anchors: Tensor, gt_boxes: Tensor, cfg: SamplerConfig, rng: torch.Generator
) -> RPNTargets:
    match = geometry.match_targets(
        anchors, gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou, force_best_match=True
    )
    picked = _sample_balanced(match.labels, cfg.rpn_batch, cfg.rpn_pos_fraction, rng)
    labels = (match.labels[picked] == geometry.POSITIVE).to(torch.float32)
    reg = torch.zeros((picked.numel(), 4), dtype=anchors.dtype)
    pos = labels > 0
    if pos.any():
        idx = picked[pos]
        reg[pos] = geometry.encode_deltas(anchors[idx], gt_boxes[match.matched_idx[idx]])
    return RPNTargets(sampled_idx=picked, labels=labels, reg_targets=reg)


@dataclass
class RoITargets:
    sampled_idx: Tensor  # (Sr,) indices into the proposal list
    class_labels: Tensor  # (Sr,) 0..K
    reg_targets: Tensor  # (Sr, 4)


def assign_roi_targets(
    proposals: Tensor,
    gt_boxes: Tensor,
    gt_classes: Tensor,
    cfg: SamplerConfig,
    rng: torch.Generator,
) -> RoITargets:
    match = geometry.match_targets(
        proposals, gt_boxes, cfg.roi_pos_iou, cfg.roi_neg_iou, force_best_match=False
    )
    picked = _sample_balanced(match.labels, cfg.roi_batch, cfg.roi_pos_fraction, rng)
    labels = torch.zeros(picked.numel(), dtype=torch.long)
    reg = torch.zeros((picked.numel(), 4), dtype=proposals.dtype)
    pos = match.labels[picked] == geometry.POSITIVE
    if pos.any():
        idx = picked[pos]
        gt_idx = match.matched_idx[idx]
        labels[pos] = gt_classes[gt_idx]
        reg[pos] = geometry.encode_deltas(proposals[idx], gt_boxes[gt_idx])
    return RoITargets(sampled_idx=picked, class_labels=labels, reg_targets=reg)


@dataclass
class ModelConfig:
    """Everything needed to rebuild the network, minus the learned weights."""

    num_classes: int
    image_size: int = 128
    backbone_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    text_dim: int = 64
    text_layers: int = 2
    text_heads: int = 4
    text_max_len: int = DEFAULT_MAX_LEN
    fusion_dim: int = 64
    fusion_layers: int = 2
    fusion_heads: int = 4
    fusion_deep_levels: tuple[int, ...] = (4, 5)
    fusion_deep_mechanism: str = "attention"
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    roi_out_size: int = 7
    head_hidden: int = 256

    def fusion_config(self) -> FusionConfig:
        return FusionConfig.make(
            dim=self.fusion_dim,
            num_layers=self.fusion_layers,
            num_heads=self.fusion_heads,
            deep_levels=tuple(self.fusion_deep_levels),
            deep_mechanism=self.fusion_deep_mechanism,
        )

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        for key in ("backbone_channels", "fusion_deep_levels", "aspect_ratios"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        for key in ("backbone_channels", "fusion_deep_levels", "aspect_ratios"):
            data[key] = tuple(data[key])
        return cls(**data)


class GroundingModel(nn.Module):
    """Image encoder + text encoder + multi-level fusion + two-stage head."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.image_encoder = ImageEncoder(config.backbone_channels, config.blocks_per_stage)
        self.text_encoder = TextEncoder(
            len(vocab),
            dim=config.text_dim,
            num_layers=config.text_layers,
            num_heads=config.text_heads,
            max_len=config.text_max_len,
        )
        self.fusion = MultiLevelFusion(
            self.fusion_cfg(), self.image_encoder.channels, config.text_dim
        )
        self.rpn_head = RPNHead(config.fusion_dim, len(config.aspect_ratios))
        self.box_head = BoxHead(
            config.fusion_dim, config.roi_out_size, config.num_classes, config.head_hidden
        )

    def fusion_cfg(self) -> FusionConfig:
        return self.config.fusion_config()

    def anchor_set(self, image_size) -> geometry.AnchorSet:
        specs = {
            lv: geometry.LevelSpec(STRIDES[lv], 4.0 * STRIDES[lv], tuple(self.config.aspect_ratios))
            for lv in LEVELS
        }
        return geometry.generate_anchors(image_size, specs)

    def forward_pyramid(self, images: Tensor, ids: Tensor, mask: Tensor) -> dict[int, Tensor]:
        feats = self.image_encoder(images)
        text = self.text_encoder(ids, mask)
        return self.fusion(feats, text, mask)

    def forward(self, images: Tensor, ids: Tensor, mask: Tensor):
        pyramid = self.forward_pyramid(images, ids, mask)
        return pyramid, self.rpn_head(pyramid)


@dataclass(frozen=True)
class InferConfig:
    score_threshold: float = 0.05
    nms_threshold: float = 0.5
    max_detections: int = 100
    proposals: ProposalConfig = field(default_factory=ProposalConfig)


@torch.no_grad()
def _forward_proposals(images: Tensor, queries: list[str], model: GroundingModel, cfg: InferConfig):
    """Shared front half of inference: pyramid, proposals, head outputs.

    Returns per-image (proposal boxes, objectness, class probs, refined
    boxes clipped to the image).
    """
    for q in queries:
        if not q or not q.strip():
            raise ValueError("empty query")
    model.eval()
    if images.dim() == 3:
        images = images[None]
    if images.shape[0] != len(queries):
        raise ValueError("one query per image required")
    h, w = images.shape[-2:]
    ids, mask = tokenize_batch(queries, model.vocab, model.config.text_max_len)
    pyramid, rpn_out = model(images, ids, mask)
    anchor_set = model.anchor_set((h, w))

    per_image = []
    all_boxes, all_idx = [], []
    for i in range(images.shape[0]):
        boxes, scores = generate_proposals(rpn_out, anchor_set, cfg.proposals, batch_index=i)
        per_image.append((boxes, scores))
        all_boxes.append(boxes)
        all_idx.append(torch.full((boxes.shape[0],), i, dtype=torch.long))

    boxes_cat = torch.cat(all_boxes) if all_boxes else torch.zeros((0, 4))
    idx_cat = torch.cat(all_idx) if all_idx else torch.zeros((0,), dtype=torch.long)
    if boxes_cat.shape[0]:
        head = model.box_head(roi_extract(pyramid, boxes_cat, idx_cat, model.config.roi_out_size))
        probs_cat = torch.softmax(head.class_logits, dim=1)
        refined_cat = geometry.decode_deltas(boxes_cat, head.box_deltas, clip_to=(h, w))
    else:
        probs_cat = torch.zeros((0, model.config.num_classes + 1))
        refined_cat = torch.zeros((0, 4))

    out = []
    offset = 0
    for boxes, scores in per_image:
        n = boxes.shape[0]
        out.append((boxes, scores, probs_cat[offset : offset + n], refined_cat[offset : offset + n]))
        offset += n
    return out


def _postprocess(probs: Tensor, refined: Tensor, num_classes: int, cfg: InferConfig) -> list[Detection]:
    detections: list[Detection] = []
    for cls in range(1, num_classes + 1):
        cls_scores = probs[:, cls]
        keep = cls_scores >= cfg.score_threshold
        if not keep.any():
            continue
        idx = keep.nonzero(as_tuple=True)[0]
        picked = geometry.nms(refined[idx], cls_scores[idx], cfg.nms_threshold)
        for i in idx[picked].tolist():
            b = refined[i]
            detections.append(
                Detection(
                    box=geometry.Box(float(b[0]), float(b[1]), float(b[2]), float(b[3])),
                    category_id=cls,
                    score=float(probs[i, cls]),
                )
            )
    detections.sort(key=lambda d: (-d.score, d.category_id))
    return detections[: cfg.max_detections]


@torch.no_grad()
def infer_batch(
    images: Tensor, queries: list[str], model: GroundingModel, cfg: InferConfig = InferConfig()
) -> list[list[Detection]]:
    """Full pipeline for a batch of normalized images and matching queries.

    Per-class NMS, a confidence threshold, and a detection cap produce each
    list; an empty list is the legitimate absent-object answer.
    """
    results = []
    for _, _, probs, refined in _forward_proposals(images, queries, model, cfg):
        results.append(_postprocess(probs, refined, model.config.num_classes, cfg))
    return results


def infer(image: Tensor, query: str, model: GroundingModel, cfg: InferConfig = InferConfig()) -> list[Detection]:
    """Single-image convenience wrapper around infer_batch."""
    return infer_batch(image, [query], model, cfg)[0]


@torch.no_grad()
def infer_single_box_batch(
    images: Tensor, queries: list[str], model: GroundingModel, cfg: InferConfig = InferConfig()
) -> list[Detection | None]:
    """One-box answers for referring queries.

    Scores every proposal by (1 - background probability) * objectness and
    returns the argmax, labeled with its most likely foreground class.
    """
    out: list[Detection | None] = []
    for boxes, obj_scores, probs, refined in _forward_proposals(images, queries, model, cfg):
        if boxes.shape[0] == 0:
            out.append(None)
            continue
        combined = (1 - probs[:, 0]) * obj_scores
        best = int(torch.argmax(combined))
        cls = int(torch.argmax(probs[best, 1:])) + 1
        b = refined[best]
        out.append(
            Detection(
                box=geometry.Box(float(b[0]), float(b[1]), float(b[2]), float(b[3])),
                category_id=cls,
                score=float(combined[best]),
            )
        )
    return out


def infer_single_box(
    image: Tensor, query: str, model: GroundingModel, cfg: InferConfig = InferConfig()
) -> Detection | None:
    return infer_single_box_batch(image, [query], model, cfg)[0]

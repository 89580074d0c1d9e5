"""Training loop, checkpoint format, and evaluation.

The trainer owns all randomness explicitly: parameter init comes from the
global torch seed set once at construction, loss sampling from a dedicated
torch Generator, and the data pipeline (mixing, adaptation, augmentation)
from one numpy Generator. All three states live in the checkpoint, so a
resumed run reproduces the original loss sequence exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from . import datakit, evalkit, taskkit
from .config import TrainConfig, lr_at
from .detector import (
    GroundingModel,
    InferConfig,
    ProposalConfig,
    SamplerConfig,
    assign_roi_targets,
    assign_rpn_targets,
    detection_loss,
    generate_proposals,
    infer_batch,
    roi_extract,
)
from .geometry import boxes_to_tensor
from .taskkit import BatchMixer, MixSpec, adapt_det, adapt_loc, adapt_rec, fill_prompt
from .textenc import Vocabulary, build_vocab, tokenize_batch

CHECKPOINT_MAGIC = b"FKPT"
CHECKPOINT_VERSION = 1


def default_category_names() -> dict[int, str]:
    return {datakit.CATEGORY_IDS[n]: n for n in datakit.CATEGORIES}


def build_query_corpus(samples, config: TrainConfig, category_names: dict[int, str]) -> list[str]:
    """Every query string training can emit: prompts and expressions."""
    corpus = [config.det_prompt]
    for name in category_names.values():
        corpus.append(fill_prompt(config.loc_prompt, name))
    corpus.extend(s.expression for s in samples if s.expression)
    return corpus


def build_streams(samples, tasks) -> dict[str, list]:
    streams: dict[str, list] = {}
    for task in tasks:
        if task == "REC":
            streams[task] = [s for s in samples if s.expression is not None]
        elif task == "LOC":
            streams[task] = [s for s in samples if s.category_ids]
        else:
            streams[task] = list(samples)
    return streams


@dataclass
class PreparedBatch:
    images: torch.Tensor  # (B, 3, S, S)
    ids: torch.Tensor  # (B, T)
    mask: torch.Tensor  # (B, T)
    targets: list[tuple[torch.Tensor, torch.Tensor]]  # per image (boxes, classes)
    queries: list[str]
    image_ids: list[int]
    tasks: list[str]


def compute_batch_loss(
    model: GroundingModel,
    batch: PreparedBatch,
    sampler_cfg: SamplerConfig,
    proposal_cfg: ProposalConfig,
    rng: torch.Generator,
    append_gt: bool = True,
):
    """Forward the batch and assemble the shared two-stage losses.

    Ground-truth boxes are appended to each image's proposals during
    training so the box head sees well-localized positives from step one.
    """
    pyramid, rpn_out = model(batch.images, batch.ids, batch.mask)
    h, w = batch.images.shape[-2:]
    anchor_set = model.anchor_set((h, w))
    anchors = anchor_set.all_anchors()
    obj_cat = torch.cat([rpn_out[lv][0] for lv in anchor_set.levels], dim=1)
    del_cat = torch.cat([rpn_out[lv][1] for lv in anchor_set.levels], dim=1)

    rpn_obj, rpn_del, rpn_lab, rpn_tgt = [], [], [], []
    roi_boxes, roi_bidx, roi_lab, roi_tgt = [], [], [], []
    for i, (gt_boxes, gt_classes) in enumerate(batch.targets):
        rt = assign_rpn_targets(anchors, gt_boxes, sampler_cfg, rng)
        rpn_obj.append(obj_cat[i][rt.sampled_idx])
        rpn_del.append(del_cat[i][rt.sampled_idx])
        rpn_lab.append(rt.labels)
        rpn_tgt.append(rt.reg_targets)

        props, _ = generate_proposals(rpn_out, anchor_set, proposal_cfg, batch_index=i)
        if append_gt and gt_boxes.shape[0]:
            props = torch.cat([props, gt_boxes])
        ro = assign_roi_targets(props, gt_boxes, gt_classes, sampler_cfg, rng)
        roi_boxes.append(props[ro.sampled_idx])
        roi_bidx.append(torch.full((ro.sampled_idx.numel(),), i, dtype=torch.long))
        roi_lab.append(ro.class_labels)
        roi_tgt.append(ro.reg_targets)

    roi_boxes_cat = torch.cat(roi_boxes)
    head = model.box_head(
        roi_extract(pyramid, roi_boxes_cat, torch.cat(roi_bidx), model.config.roi_out_size)
    )
    return detection_loss(
        torch.cat(rpn_obj),
        torch.cat(rpn_del),
        torch.cat(rpn_lab),
        torch.cat(rpn_tgt),
        head.class_logits,
        head.box_deltas,
        torch.cat(roi_lab),
        torch.cat(roi_tgt),
    )


class Trainer:
    """Owns the model, optimizer, rng streams, and batch mixer for one run."""

    TRAIN_RNG_OFFSET = 101
    DATA_RNG_OFFSET = 202

    def __init__(
        self,
        config: TrainConfig,
        train_samples: list[datakit.Sample],
        category_names: dict[int, str] | None = None,
    ):
        self.config = config
        self.category_names = category_names or default_category_names()
        torch.manual_seed(config.seed)

        corpus = build_query_corpus(train_samples, config, self.category_names)
        self.vocab = build_vocab(corpus)
        model_cfg = config.model_config(num_classes=len(self.category_names))
        self.model = GroundingModel(model_cfg, self.vocab)

        # Encoders get a reduced rate when flagged pretrained; everything else
        # trains at the scheduled rate.
        enc_mult = 0.1 if config.encoders_pretrained else 1.0
        enc_prefixes = ("image_encoder.", "text_encoder.")
        enc_params, rest_params = [], []
        for n, p in self.model.named_parameters():
            (enc_params if n.startswith(enc_prefixes) else rest_params).append(p)
        groups = [
            {"params": enc_params, "lr": 0.0, "lr_multiplier": enc_mult},
            {"params": rest_params, "lr": 0.0, "lr_multiplier": 1.0},
        ]
        for g in groups:
            g["momentum"] = config.momentum
            g["weight_decay"] = config.weight_decay
        self.optimizer = torch.optim.SGD(groups, lr=0.0)

        self.train_rng = torch.Generator()
        self.train_rng.manual_seed(config.seed + self.TRAIN_RNG_OFFSET)
        self.data_rng = np.random.default_rng(config.seed + self.DATA_RNG_OFFSET)

        streams = build_streams(train_samples, config.tasks)
        for task, items in streams.items():
            if not items:
                raise ValueError(f"no usable training samples for task {task}")
        spec = MixSpec.parse(config.mix, config.batch_size, stream_names=config.tasks)
        self.mixer = BatchMixer(streams, spec, self.data_rng)

        self.sampler_cfg = SamplerConfig()
        self.proposal_cfg = ProposalConfig()
        self.augment_profile = datakit.augment_profile(config.augment, config.image_size)
        self.step = 0

    def _adapt(self, task: str, sample: datakit.Sample) -> taskkit.TaskExample:
        if task == "REC":
            return adapt_rec(sample)
        if task == "LOC":
            ex = adapt_loc(
                sample,
                self.data_rng,
                prompt_template=self.config.loc_prompt,
                category_names=self.category_names,
                absent_category_prob=self.config.loc_absent_prob,
                all_category_ids=tuple(sorted(self.category_names)),
            )
            if ex is None:
                raise ValueError("LOC stream contained an objectless sample")
            return ex
        return adapt_det(sample, prompt=self.config.det_prompt)

    def prepare_batch(self, items) -> PreparedBatch:
        images, queries, targets, image_ids, tasks = [], [], [], [], []
        for task, sample in items:
            ex = self._adapt(task, sample)
            res = datakit.augment(
                ex.image,
                ex.target_boxes,
                ex.task,
                self.data_rng,
                self.augment_profile,
                referent_index=0 if task == "REC" else None,
            )
            boxes = boxes_to_tensor(res.boxes)
            classes = torch.tensor(
                [ex.target_category_ids[i] for i in res.kept_indices], dtype=torch.long
            )
            images.append(datakit.to_model_input(res.image))
            queries.append(ex.query)
            targets.append((boxes, classes))
            image_ids.append(ex.image_id)
            tasks.append(task)
        ids, mask = tokenize_batch(queries, self.vocab, self.config.text_max_len)
        return PreparedBatch(torch.stack(images), ids, mask, targets, queries, image_ids, tasks)

    def train_step(self, out_dir=None) -> dict:
        self.model.train()
        batch = self.prepare_batch(self.mixer.next_batch())
        report = compute_batch_loss(
            self.model, batch, self.sampler_cfg, self.proposal_cfg, self.train_rng
        )
        total = report.total
        if not torch.isfinite(total):
            self._dump_bad_batch(batch, report, out_dir)
            raise RuntimeError(
                f"non-finite loss at step {self.step}: {report.detach_floats()}"
            )

        lr = lr_at(self.step + 1, self.config)
        for group in self.optimizer.param_groups:
            group["lr"] = lr * group["lr_multiplier"]
        self.optimizer.zero_grad()
        total.backward()
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.step += 1
        entry = {"step": self.step, "lr": lr, **report.detach_floats()}
        return entry

    def _dump_bad_batch(self, batch: PreparedBatch, report, out_dir) -> None:
        dump = {
            "step": self.step,
            "losses": {k: repr(v) for k, v in report.detach_floats().items()},
            "queries": batch.queries,
            "image_ids": batch.image_ids,
            "tasks": batch.tasks,
        }
        if out_dir:
            path = os.path.join(out_dir, f"diagnostic_step{self.step}.json")
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(dump, fh, indent=1)

    # --- checkpointing ---

    def _named_momentum(self):
        name_of = {id(p): n for n, p in self.model.named_parameters()}
        out = {}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                state = self.optimizer.state.get(p, {})
                buf = state.get("momentum_buffer")
                if buf is not None:
                    out[name_of[id(p)]] = buf
        return out

    def save_checkpoint(self, path) -> None:
        momentum = self._named_momentum()
        write_checkpoint(
            path,
            step=self.step,
            train_config=self.config,
            model=self.model,
            momentum=momentum,
            rng={
                "torch_train": self.train_rng.get_state().numpy().tobytes().hex(),
                "numpy_data": self.data_rng.bit_generator.state,
                "mixer": self.mixer.get_state(),
            },
        )

    def restore(self, ckpt: "Checkpoint") -> None:
        if ckpt.config_hash != self.config.config_hash():
            raise ValueError(
                f"checkpoint config hash {ckpt.config_hash} does not match "
                f"current config {self.config.config_hash()}; refusing to resume"
            )
        if ckpt.vocab != self.vocab.token_to_id:
            raise ValueError("checkpoint vocabulary differs from the rebuilt one")
        state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.tensors.items()}
        self.model.load_state_dict(state)
        name_to_param = dict(self.model.named_parameters())
        for name, arr in ckpt.momentum.items():
            p = name_to_param[name]
            self.optimizer.state[p] = {"momentum_buffer": torch.from_numpy(arr.copy())}
        t_state = torch.frombuffer(
            bytearray.fromhex(ckpt.rng["torch_train"]), dtype=torch.uint8
        ).clone()
        self.train_rng.set_state(t_state)
        self.data_rng.bit_generator.state = ckpt.rng["numpy_data"]
        self.mixer.set_state(ckpt.rng["mixer"])
        self.step = ckpt.step


@dataclass
class Checkpoint:
    step: int
    config_hash: str
    train_config: dict
    model_config: dict
    vocab: dict[str, int]
    tensors: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    rng: dict


def write_checkpoint(path, step, train_config, model, momentum, rng) -> None:
    """Single-file binary: magic, version, JSON header, float32 LE blobs."""
    entries = []
    blobs = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.astype("<f4").tobytes())
    momentum_entries = []
    for name in sorted(momentum):
        arr = momentum[name].detach().cpu().to(torch.float32).numpy()
        momentum_entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.astype("<f4").tobytes())

    header = {
        "format_version": CHECKPOINT_VERSION,
        "step": step,
        "config_hash": train_config.config_hash(),
        "train_config": train_config.to_dict(),
        "model_config": model.config.to_dict(),
        "vocab": model.vocab.token_to_id,
        "params": entries,
        "momentum": momentum_entries,
        "rng": rng,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a findkit checkpoint (bad magic {magic!r})")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header_len = struct.unpack("<Q", fh.read(8))[0]
        header = json.loads(fh.read(header_len).decode("utf-8"))

        def read_block(entry):
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            data = fh.read(4 * count)
            return np.frombuffer(data, dtype="<f4").reshape(entry["shape"]).astype(np.float32)

        tensors = {e["name"]: read_block(e) for e in header["params"]}
        momentum = {e["name"]: read_block(e) for e in header["momentum"]}
    return Checkpoint(
        step=header["step"],
        config_hash=header["config_hash"],
        train_config=header["train_config"],
        model_config=header["model_config"],
        vocab=header["vocab"],
        tensors=tensors,
        momentum=momentum,
        rng=header["rng"],
    )


def model_from_checkpoint(ckpt: Checkpoint) -> GroundingModel:
    from .detector import ModelConfig

    vocab = Vocabulary(ckpt.vocab)
    model = GroundingModel(ModelConfig.from_dict(ckpt.model_config), vocab)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return model


# --- evaluation -------------------------------------------------------------


def evaluate(
    model: GroundingModel,
    samples: list[datakit.Sample],
    task: str,
    loc_prompt: str = taskkit.DEFAULT_LOC_PROMPT,
    det_prompt: str = taskkit.DEFAULT_DET_PROMPT,
    infer_cfg: InferConfig = InferConfig(),
    category_names: dict[int, str] | None = None,
    batch_size: int = 8,
) -> evalkit.MetricsReport:
    """Run inference over the samples with the task's adaptation and score it.

    No augmentation is applied. LOC enumerates every category present in
    each image; detections in a LOC record are relabeled to the queried
    category, so off-category hits count against precision.
    """
    task = task.upper()
    if task not in taskkit.TASKS:
        raise ValueError(f"unknown task {task!r}")
    names = category_names or default_category_names()

    jobs = []  # (image, query, gt boxes, gt categories, relabel category)
    for s in samples:
        if task == "REC":
            if s.expression is None or s.referent_index is None:
                raise ValueError(f"sample {s.image_id} has no referring expression; REC eval impossible")
            b = s.boxes[s.referent_index]
            jobs.append((s, s.expression, [b], [s.category_ids[s.referent_index]], None))
        elif task == "LOC":
            for cat in sorted(set(s.category_ids)):
                query = fill_prompt(loc_prompt, names[cat])
                boxes = [b for b, c in zip(s.boxes, s.category_ids) if c == cat]
                jobs.append((s, query, boxes, [cat] * len(boxes), cat))
        else:
            jobs.append((s, det_prompt, list(s.boxes), list(s.category_ids), None))

    records = []
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start : start + batch_size]
        images = torch.stack([datakit.to_model_input(j[0].image) for j in chunk])
        queries = [j[1] for j in chunk]
        results = infer_batch(images, queries, model, infer_cfg)
        for (s, query, gt_boxes, gt_cats, relabel), dets in zip(chunk, results):
            pred_boxes = np.array([[d.box.x1, d.box.y1, d.box.x2, d.box.y2] for d in dets]).reshape(-1, 4)
            pred_scores = np.array([d.score for d in dets])
            pred_cats = np.array([relabel if relabel is not None else d.category_id for d in dets], dtype=np.int64)
            records.append(
                evalkit.EvalRecord(
                    image_id=s.image_id,
                    query=query,
                    pred_boxes=pred_boxes,
                    pred_scores=pred_scores,
                    pred_categories=pred_cats,
                    gt_boxes=np.array([[b.x1, b.y1, b.x2, b.y2] for b in gt_boxes]).reshape(-1, 4),
                    gt_categories=np.array(gt_cats, dtype=np.int64),
                )
            )

    report = evalkit.MetricsReport(num_records=len(records))
    if task == "REC":
        report.precision_at_1 = evalkit.precision_at_1(records)
    elif task == "LOC":
        report.ap50 = evalkit.average_precision(records, 0.5)
        report.per_category_ap50 = evalkit.per_category_ap(records, 0.5)
    else:
        report.ap50 = evalkit.average_precision(records, 0.5)
        report.map = evalkit.coco_map(records)
        report.per_category_ap50 = evalkit.per_category_ap(records, 0.5)
    return report


# --- top-level run ----------------------------------------------------------


@dataclass
class TrainResult:
    model: GroundingModel
    trainer: Trainer
    history: list[dict] = field(default_factory=list)
    eval_log: list[dict] = field(default_factory=list)
    checkpoint_path: str | None = None


def train(
    config: TrainConfig,
    train_samples: list[datakit.Sample],
    val_samples: list[datakit.Sample] | None = None,
    out_dir: str | None = None,
    resume_from: str | None = None,
    log_fn=None,
    category_names: dict[int, str] | None = None,
) -> TrainResult:
    """Run the schedule, optionally evaluating and checkpointing on the way."""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(config, train_samples, category_names=category_names)
    if resume_from:
        trainer.restore(read_checkpoint(resume_from))
    result = TrainResult(model=trainer.model, trainer=trainer)

    def log(msg):
        if log_fn:
            log_fn(msg)

    while trainer.step < config.steps:
        entry = trainer.train_step(out_dir=out_dir)
        result.history.append(entry)
        if entry["step"] % 100 == 0 or entry["step"] == 1:
            log(
                f"step {entry['step']:6d}  lr {entry['lr']:.5f}  total {entry['total']:.4f}"
            )
        at_end = trainer.step >= config.steps
        if val_samples and config.eval_every and (trainer.step % config.eval_every == 0 or at_end):
            evals = {"step": trainer.step}
            for task in config.tasks:
                evals[task] = evaluate(
                    trainer.model, val_samples, task,
                    loc_prompt=config.loc_prompt, det_prompt=config.det_prompt,
                    category_names=category_names,
                )
                trainer.model.train()
            result.eval_log.append(evals)
        if out_dir and config.checkpoint_every and trainer.step % config.checkpoint_every == 0:
            trainer.save_checkpoint(os.path.join(out_dir, f"checkpoint_{trainer.step:06d}.fkpt"))

    if out_dir:
        final = os.path.join(out_dir, "checkpoint_final.fkpt")
        trainer.save_checkpoint(final)
        result.checkpoint_path = final
    return result

"""Answer-masked cross-entropy, two-stage training and greedy decoding."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .encoder import load_image
from .model import PopeyeToy, stack_ids

log = logging.getLogger(__name__)

STAGE_ALIASES = {"alignment": "alignment", "ship": "ship_adaption", "ship_adaption": "ship_adaption"}


class TrainingError(RuntimeError):
    pass


class DivergenceDetected(TrainingError):
    pass


class EmptyBatch(TrainingError):
    pass


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    instruction: str
    answer: str
    image_id: str = ""


def samples_from_records(records, images_root: str | Path) -> list[Sample]:
    root = Path(images_root)
    out = []
    for rec in records:
        out.append(Sample(load_image(root / rec.image), rec.instruction, rec.answer, rec.image))
    return out


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    lr: float = 1e-2
    weight_decay: float = 0.01
    batch_size: int = 32
    min_lr_ratio: float = 0.0
    # the frozen head starts with small logits; its scale needs a faster rate to sharpen them
    bias_scale_lr_mult: float = 10.0
    grad_clip: float = 1.0  # max global grad norm; 0 disables
    seed: int = 0
    log_every: int = 50

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def stage_defaults(stage: str) -> TrainConfig:
    """Recipe that passes the 32-scene desk check.

    Alignment runs gently: at the ship-stage rate the adapters memorize caption
    text and the following ship stage starts from a worse point.
    """
    if STAGE_ALIASES.get(stage) == "alignment":
        return TrainConfig(steps=100, lr=1e-3)
    return TrainConfig()


def _batch_tensors(model: PopeyeToy, batch: Sequence[Sample]):
    tok = model.tokenizer
    feats = torch.stack([model.encode_visual(s.image) for s in batch])
    n_v = feats.shape[1]
    seqs, targets = [], []
    for s in batch:
        prompt = model.prompt_ids(s.instruction)
        answer = tok.encode(s.answer)
        if len(answer) > model.config.max_answer_len:
            raise ValueError(f"answer longer than max_answer_len={model.config.max_answer_len}: {s.answer!r}")
        ids = prompt + answer
        # position p (over the language part) predicts ids[p + 1]; only answer/EOS targets count
        tgt = [-100] * (len(prompt) - 1) + answer + [tok.eos_id]
        seqs.append(ids)
        targets.append(tgt)
    ids = stack_ids(seqs, tok.pad_id)
    tgt = torch.full_like(ids, -100)
    for i, t in enumerate(targets):
        tgt[i, : len(t)] = torch.tensor(t)
    return feats, ids, tgt, n_v


def compute_loss(model: PopeyeToy, batch: Sequence[Sample]) -> torch.Tensor:
    """Mean cross-entropy over answer tokens (plus end-of-answer); prompt positions masked."""
    if not batch:
        raise EmptyBatch("loss needs at least one sample")
    feats, ids, tgt, n_v = _batch_tensors(model, batch)
    logits = model.forward_sequence(feats, ids)[:, n_v:, :]
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=-100)


def loss_and_grads(model: PopeyeToy, batch: Sequence[Sample]) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss and gradients of every trainable parameter of the active stage."""
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    loss = compute_loss(model, batch)
    grads = torch.autograd.grad(loss, [p for _, p in named]) if named else ()
    return loss.item(), {n: g for (n, _), g in zip(named, grads)}


def answer_perplexity(model: PopeyeToy, batch: Sequence[Sample]) -> float:
    with torch.no_grad():
        return math.exp(float(compute_loss(model, batch)))


def _param_groups(model: PopeyeToy, config: TrainConfig):
    decay, no_decay, adapters = [], [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if name.endswith(("delta_bias", "delta_scale")):
            adapters.append(p)
        elif name.endswith(".bias"):
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [{"params": decay, "weight_decay": config.weight_decay, "lr": config.lr}]
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0, "lr": config.lr})
    if adapters:
        groups.append({"params": adapters, "weight_decay": 0.0, "lr": config.lr * config.bias_scale_lr_mult})
    return groups


def _cosine(step: int, total: int, floor: float) -> float:
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


def train_stage(
    model: PopeyeToy,
    data: Sequence[Sample],
    stage: str,
    config: TrainConfig = TrainConfig(),
) -> tuple[PopeyeToy, list[float]]:
    """Train the parameters of ``stage`` in place with AdamW and cosine decay.

    Returns the model and the per-step loss curve.
    """
    if stage not in STAGE_ALIASES:
        raise ValueError(f"unknown stage {stage!r}")
    if not data:
        raise EmptyBatch("no training data")
    model.set_stage(STAGE_ALIASES[stage])
    groups = _param_groups(model, config)
    params = [p for g in groups for p in g["params"]]
    opt = torch.optim.AdamW(groups, lr=config.lr)
    # eta_min is absolute in torch, so decay each group towards its own floor
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: _cosine(step, config.steps, config.min_lr_ratio))
    rng = np.random.default_rng(config.seed)
    losses: list[float] = []
    bs = min(config.batch_size, len(data))
    for step in range(config.steps):
        if bs == len(data):
            batch = list(data)
        else:
            batch = [data[i] for i in rng.choice(len(data), size=bs, replace=False)]
        opt.zero_grad(set_to_none=True)
        loss = compute_loss(model, batch)
        if not torch.isfinite(loss):
            raise DivergenceDetected(f"loss became {loss.item()} at step {step}")
        loss.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        sched.step()
        losses.append(loss.item())
        if config.log_every and (step % config.log_every == 0 or step == config.steps - 1):
            log.info("%s step %d/%d loss %.4f", stage, step + 1, config.steps, losses[-1])
    return model, losses


class ScriptedModel:
    """Answers looked up from JSONL rows ``{"instruction", "answer"[, "image_id"]}``.

    Rows carrying an ``image_id`` take precedence for that image.
    """

    def __init__(self, rows: Sequence[dict]):
        self.by_image: dict[tuple[str, str], str] = {}
        self.by_instruction: dict[str, str] = {}
        for row in rows:
            if "image_id" in row:
                self.by_image[(str(row["image_id"]), row["instruction"])] = row["answer"]
            else:
                self.by_instruction[row["instruction"]] = row["answer"]

    @classmethod
    def load(cls, path) -> ScriptedModel:
        rows = []
        with Path(path).open(encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if line.strip():
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise ValueError(f"{path}:{line_no}: {exc}") from exc
        return cls(rows)

    def generate(self, image, instruction: str, image_id: str | None = None) -> tuple[str, bool]:
        if image_id is not None and (image_id, instruction) in self.by_image:
            return self.by_image[(image_id, instruction)], False
        return self.by_instruction.get(instruction, ""), False


def decode_answer(model, image, instruction: str, image_id: str | None = None) -> str:
    """Greedy decode; truncation at ``max_answer_len`` is logged, not raised."""
    if isinstance(model, ScriptedModel):
        text, truncated = model.generate(image, instruction, image_id)
    else:
        text, truncated = model.generate(image, instruction)
    if truncated:
        log.warning("answer truncated for %s", image_id or "image")
    return text

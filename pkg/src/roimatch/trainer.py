"""Training loop, validation and single-pair inference."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .data import LEVELS, Prepared, Sample, augment, normalize_image, preprocess
from .labelgen import SegTargets, generate_targets
from .loss import LossConfig, total_loss
from .metrics import MetricReport, evaluate_run
from .model import ModelConfig, RoIMatcher, save_checkpoint
from .postprocess import DecodeConfig, MatchResult, decode, decode_output

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    """Raised when the loss becomes NaN or infinite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] = ()     # empty: 60% and 80% of max_iterations
    gamma: float = 0.1
    batch_size: int = 4
    max_iterations: int = 1000
    strategy: str = "joint"
    seed: int = 0
    eval_every: int = 0                  # 0 disables periodic validation
    grad_clip: float = 5.0
    augment: bool = True

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_iterations < 0:
            raise ValueError("learning_rate, batch_size must be > 0 and max_iterations >= 0")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ValueError("milestones must be strictly increasing")
        if self.strategy not in ("joint", "curriculum"):
            raise ValueError(f"unknown strategy {self.strategy!r}")

    def resolved_milestones(self) -> list[int]:
        if self.milestones:
            return list(self.milestones)
        return [int(0.6 * self.max_iterations), int(0.8 * self.max_iterations)]


@dataclass
class TrainResult:
    model: RoIMatcher
    log: list[dict] = field(default_factory=list)
    best_state: dict | None = None
    best_miou: float = float("nan")
    best_iteration: int = -1


def build_model(config: ModelConfig, seed: int = 0) -> RoIMatcher:
    torch.manual_seed(seed)
    return RoIMatcher(config)


def collate(items: Sequence[Prepared], device="cpu"):
    dtype = torch.get_default_dtype()
    ref = torch.as_tensor(np.stack([p.reference for p in items]), device=device, dtype=dtype)
    mask = torch.as_tensor(np.stack([p.mask for p in items]), device=device, dtype=dtype)
    tgt = torch.as_tensor(np.stack([p.target for p in items]), device=device, dtype=dtype)
    return ref, mask, tgt


class _Pool:
    """Serves preprocessed samples and targets, caching them when augmentation is off."""

    def __init__(self, samples, size, shrink_ratio, do_augment, seed):
        self.samples = list(samples)
        self.size = size
        self.shrink_ratio = shrink_ratio
        self.do_augment = do_augment
        self.seed = seed
        self.cache: dict[int, tuple[Prepared, SegTargets]] = {}
        self.by_level = {lv: [i for i, s in enumerate(self.samples) if s.level == lv] for lv in LEVELS}

    def get(self, index: int, iteration: int, slot: int):
        if not self.do_augment and index in self.cache:
            return self.cache[index]
        sample = self.samples[index]
        if self.do_augment:
            sample = augment(sample, seed=hash((self.seed, iteration, slot)) & 0x7FFFFFFF)
        prep = preprocess(sample, self.size)
        tgt = generate_targets(prep.polygons, *self.size, self.shrink_ratio)
        if not self.do_augment:
            self.cache[index] = (prep, tgt)
        return prep, tgt


def _allowed_levels(strategy: str, iteration: int, total: int) -> tuple[str, ...]:
    if strategy == "joint":
        return LEVELS
    third = max(total, 1) / 3
    return LEVELS[: 1 + min(int(iteration // third), 2)]


def train(model: RoIMatcher, samples: Sequence[Sample], loss_config: LossConfig | None = None,
          train_config: TrainConfig | None = None, val_samples: Sequence[Sample] | None = None,
          decode_config: DecodeConfig | None = None, out_dir: str | Path | None = None) -> TrainResult:
    """Optimize ``model`` on ``samples``; returns the model, loss log and best checkpoint."""
    loss_config = loss_config or LossConfig()
    cfg = train_config or TrainConfig()
    if not samples:
        raise ValueError("no training samples")
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    size = model.config.input_size
    pool = _Pool(samples, size, loss_config.shrink_ratio, cfg.augment, cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, cfg.resolved_milestones(), cfg.gamma)
    result = TrainResult(model)
    log_file = open(out_dir / "train_log.jsonl", "w") if out_dir else None

    try:
        for it in range(cfg.max_iterations):
            model.train()
            levels = [lv for lv in _allowed_levels(cfg.strategy, it, cfg.max_iterations) if pool.by_level[lv]]
            if not levels:
                levels = [lv for lv in LEVELS if pool.by_level[lv]]
            picks = []
            for _ in range(cfg.batch_size):
                lv = levels[int(rng.integers(len(levels)))]
                picks.append(pool.by_level[lv][int(rng.integers(len(pool.by_level[lv])))])
            batch = [pool.get(idx, it, k) for k, idx in enumerate(picks)]
            ref, mask, tgt = collate([b[0] for b in batch])
            out = model(ref, mask, tgt)
            report = total_loss(out, [b[1] for b in batch], loss_config)
            if not torch.isfinite(report.total):
                snapshot = {"iteration": it, "pair_ids": [b[0].pair_id for b in batch],
                            "reference": ref, "mask": mask, "target": tgt}
                if out_dir:
                    torch.save(snapshot, out_dir / "failure_snapshot.pt")
                raise NumericFailure(f"non-finite loss at iteration {it} on {snapshot['pair_ids']}")
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            entry = {"iteration": it, "lr": opt.param_groups[0]["lr"], **report.as_dict()}
            opt.step()
            sched.step()
            result.log.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")

            if val_samples and cfg.eval_every and ((it + 1) % cfg.eval_every == 0
                                                    or it + 1 == cfg.max_iterations):
                rep = validate(model, val_samples, decode_config)
                log.info("iter %d: val mIoU %.4f F %.4f", it + 1, rep.miou, rep.f_measure)
                if not result.best_miou >= rep.miou:
                    result.best_miou = rep.miou
                    result.best_iteration = it + 1
                    result.best_state = copy.deepcopy(model.state_dict())
                    if out_dir:
                        save_checkpoint(model, out_dir / "best.pt", iteration=it + 1, val_miou=rep.miou)
    finally:
        if log_file:
            log_file.close()
    if out_dir:
        save_checkpoint(model, out_dir / "last.pt", iteration=cfg.max_iterations)
    return result


@torch.no_grad()
def predict(model: RoIMatcher, samples: Sequence[Sample], decode_config: DecodeConfig | None = None,
            batch_size: int = 4) -> list[tuple[MatchResult, Prepared]]:
    """Decode each sample at the model's input resolution."""
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        preps = [preprocess(s, model.config.input_size) for s in samples[i:i + batch_size]]
        seg = model(*collate(preps))
        out += [(decode_output(seg, k, decode_config), p) for k, p in enumerate(preps)]
    return out


def validate(model: RoIMatcher, samples: Sequence[Sample],
             decode_config: DecodeConfig | None = None) -> MetricReport:
    """forward -> decode -> metrics over ``samples``."""
    if not samples:
        raise ValueError("validation split is empty")
    preds = predict(model, samples, decode_config)
    return evaluate_run((res, prep.polygons, prep.level) for res, prep in preds)


@torch.no_grad()
def infer_pair(model: RoIMatcher, ref_image: np.ndarray, ref_mask: np.ndarray, tgt_image: np.ndarray,
               decode_config: DecodeConfig | None = None) -> MatchResult:
    """Match one pair; the result is decoded at the original target resolution."""
    model.eval()
    h, w = model.config.input_size
    ref = cv2.resize(ref_image, (w, h), interpolation=cv2.INTER_LINEAR)
    mask = cv2.resize(ref_mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST)
    tgt = cv2.resize(tgt_image, (w, h), interpolation=cv2.INTER_LINEAR)
    dtype = torch.get_default_dtype()
    seg = model(torch.as_tensor(normalize_image(ref), dtype=dtype)[None],
                torch.as_tensor(mask, dtype=dtype)[None],
                torch.as_tensor(normalize_image(tgt), dtype=dtype)[None])
    th, tw = tgt_image.shape[:2]
    up = lambda x: F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)
    region = up(seg.region[:, None])[0, 0]
    kernel = up(seg.kernel[:, None])[0, 0]
    sim = up(seg.similarity)[0]
    return decode(region.numpy(), kernel.numpy(), sim.numpy(), decode_config)

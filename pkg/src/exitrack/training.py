"""Training loops for the tracker.

Joint mode optimizes all loss terms at once. Two-stage mode first trains
the localization path on the box losses alone, then freezes it and
trains the update-score and OOD heads on the two score losses. Training
sequences must contain no absent-target frames; crops are sampled from
visible frames with center/scale jitter on the search window.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import BBox
from .losses import compute_losses
from .net import TrackerNet
from .tracking import SEARCH_FACTOR, TEMPLATE_FACTOR, crop_window

__all__ = [
    "TrainConfig",
    "DivergenceError",
    "infer_classes",
    "train",
    "parameter_checksum",
    "frozen_checksum",
]


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 12
    stage2_epochs: int | None = None  # two-stage only; defaults to epochs
    batch_size: int = 32
    samples_per_epoch: int = 1600
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.samples_per_epoch < 1:
            raise ValueError("invalid training configuration")
        if self.epochs < 0 or (self.stage2_epochs or 0) < 0:
            raise ValueError("epoch counts must be >= 0")


def infer_classes(sequences) -> list[str]:
    return sorted({s.class_label for s in sequences})


class _TripletSampler:
    """Random (initial template, dynamic template, search) crops."""

    def __init__(self, sequences, classes: list[str], net: TrackerNet, seed: int):
        self.sequences = list(sequences)
        self.class_idx = {c: i for i, c in enumerate(classes)}
        self.net = net
        self.rng = np.random.default_rng(seed)
        for seq in self.sequences:
            if seq.has_exit:
                raise ValueError(
                    f"{seq.id}: training sequences must contain no exit frames")
            if seq.class_label not in self.class_idx:
                raise ValueError(f"{seq.id}: unknown class {seq.class_label!r}")

    def _template(self, seq, t: int) -> torch.Tensor:
        box = seq.annotations[t].bbox
        cx, cy = box.center
        side = TEMPLATE_FACTOR * max(box.w, box.h)
        patch, _, _ = crop_window(seq.load_frame(t), cx, cy, side,
                                  self.net.cfg.template_size)
        return patch

    def sample(self):
        rng = self.rng
        seq = self.sequences[rng.integers(len(self.sequences))]
        t0, t0b, t1 = rng.integers(len(seq), size=3)
        z0 = self._template(seq, int(t0))
        zd = self._template(seq, int(t0b))

        box = seq.annotations[int(t1)].bbox
        cx, cy = box.center
        side = SEARCH_FACTOR * max(box.w, box.h) * rng.uniform(0.8, 1.2)
        cx += rng.uniform(-0.2, 0.2) * side
        cy += rng.uniform(-0.2, 0.2) * side
        search, origin, scale = crop_window(seq.load_frame(int(t1)), cx, cy, side,
                                            self.net.cfg.search_size)
        gt = np.array([(box.x - origin[0]) * scale, (box.y - origin[1]) * scale,
                       box.w * scale, box.h * scale], dtype=np.float32)
        return z0, zd, search, gt, self.class_idx[seq.class_label]

    def batch(self, size: int):
        samples = [self.sample() for _ in range(size)]
        return (
            torch.stack([s[0] for s in samples]),
            torch.stack([s[1] for s in samples]),
            torch.stack([s[2] for s in samples]),
            torch.from_numpy(np.stack([s[3] for s in samples])),
            torch.ones(size, dtype=torch.bool),
            torch.tensor([s[4] for s in samples], dtype=torch.long),
        )


def _run_stage(net: TrackerNet, sampler: _TripletSampler, cfg: TrainConfig,
               epochs: int, params, term_weights, stage: int, log: list,
               log_file) -> None:
    weights = net.cfg.loss_weights
    opt = torch.optim.Adam(params, lr=cfg.lr)
    n_batches = max(1, cfg.samples_per_epoch // cfg.batch_size)
    for epoch in range(epochs):
        t_start = time.perf_counter()
        sums = {"giou": 0.0, "l1": 0.0, "bce": 0.0, "ce": 0.0, "total": 0.0}
        for b in range(n_batches):
            z0, zd, x, gt, visible, cls = sampler.batch(cfg.batch_size)
            out = net(z0, zd, x)
            terms = compute_losses(out, gt, visible, cls, weights,
                                   span=float(net.cfg.search_size))
            total = sum(w * terms[k] for k, w in term_weights.items())
            if not torch.isfinite(total):
                detail = {k: float(v) for k, v in terms.items()}
                raise DivergenceError(
                    f"stage {stage} epoch {epoch} batch {b}: non-finite loss {detail}")
            opt.zero_grad()
            total.backward()
            opt.step()
            for k in ("giou", "l1", "bce", "ce"):
                sums[k] += float(terms[k])
            sums["total"] += float(total)
        record = {"stage": stage, "epoch": epoch}
        record.update({k: v / n_batches for k, v in sums.items()})
        record["wall_time"] = time.perf_counter() - t_start
        log.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()


def train(net: TrackerNet, cfg: TrainConfig, train_seqs, classes: list[str],
          log_path: str | None = None) -> list[dict]:
    """Optimize the network in place; returns the epoch log.

    A zero-epoch budget leaves the parameters untouched.
    """
    cfg.validate()
    if len(classes) != net.cfg.n_classes:
        raise ValueError(
            f"net expects {net.cfg.n_classes} classes, got {len(classes)}")
    sampler = _TripletSampler(train_seqs, classes, net, cfg.seed)
    w_giou, w_l1, w_bce, w_ce = net.cfg.loss_weights
    log: list[dict] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    net.train()
    try:
        if net.cfg.train_mode == "joint":
            _run_stage(net, sampler, cfg, cfg.epochs, net.parameters(),
                       {"giou": w_giou, "l1": w_l1, "bce": w_bce, "ce": w_ce},
                       stage=0, log=log, log_file=log_file)
        else:
            _run_stage(net, sampler, cfg, cfg.epochs, net.bbox_parameters(),
                       {"giou": w_giou, "l1": w_l1}, stage=1, log=log,
                       log_file=log_file)
            for p in net.bbox_parameters():
                p.requires_grad_(False)
            stage2 = cfg.stage2_epochs if cfg.stage2_epochs is not None else cfg.epochs
            _run_stage(net, sampler, cfg, stage2, net.score_parameters(),
                       {"bce": w_bce, "ce": w_ce}, stage=2, log=log,
                       log_file=log_file)
    finally:
        if log_file is not None:
            log_file.close()
    net.eval()
    return log


def parameter_checksum(tensors) -> str:
    """Order-sensitive SHA-256 over raw tensor bytes."""
    digest = hashlib.sha256()
    for t in tensors:
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def frozen_checksum(net: TrackerNet) -> str:
    """Checksum of the localization path frozen during stage 2."""
    return parameter_checksum(net.bbox_parameters())

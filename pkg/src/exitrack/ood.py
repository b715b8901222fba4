"""Exit decisions from decomposed-confidence outputs.

The per-frame score S is either the maximum class evidence max_i h_i or
the domain probability g. At test time the search crop is nudged by
epsilon along the sign of dS/dx before scoring, the score stream is
smoothed with a trailing moving average, and a frame is flagged as exit
when the smoothed score falls below the threshold phi. epsilon is
selected on in-distribution validation crops as the grid value
maximizing the summed perturbed score; phi is a low quantile of the
smoothed validation scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .tracking import build_step_output, track_sequence

__all__ = [
    "DEFAULT_EPSILON_GRID",
    "PerturbConfig",
    "ExitDecider",
    "OODTrace",
    "NonFiniteGradientError",
    "score",
    "score_tensor",
    "perturb",
    "smooth",
    "decide",
    "collect_id_crops",
    "select_epsilon",
    "calibrate_phi",
    "OnlineExitDecider",
    "write_trace",
]

DEFAULT_EPSILON_GRID = (0.0025, 0.005, 0.01, 0.02, 0.04, 0.08)
SCORE_VARIANTS = ("max_h", "g")


class NonFiniteGradientError(RuntimeError):
    """The input gradient of the score contained NaN or inf."""


@dataclass
class PerturbConfig:
    epsilon_grid: tuple[float, ...] = DEFAULT_EPSILON_GRID
    score_variant: str = "max_h"
    epsilon_star: float | None = None

    def validate(self) -> None:
        grid = self.epsilon_grid
        if not grid:
            raise ValueError("epsilon grid must be nonempty")
        if any(e <= 0 for e in grid):
            raise ValueError("epsilon grid values must be > 0")
        if list(grid) != sorted(grid):
            raise ValueError("epsilon grid must be sorted ascending")
        if self.score_variant not in SCORE_VARIANTS:
            raise ValueError(f"score_variant must be one of {SCORE_VARIANTS}")


@dataclass
class ExitDecider:
    window: int = 5
    phi: float | None = None
    calibration_quantile: float = 0.05

    def validate(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0 <= self.calibration_quantile <= 1:
            raise ValueError("calibration_quantile must be in [0, 1]")


@dataclass
class OODTrace:
    """Per-frame raw scores, smoothed scores, and exit decisions."""

    raw_scores: np.ndarray
    smoothed_scores: np.ndarray
    decisions: np.ndarray


def score(h, g: float, variant: str = "max_h") -> float:
    """Scalar OOD score for one frame's head outputs."""
    h = np.asarray(h, dtype=float)
    if h.size == 0:
        raise ValueError("h must be nonempty")
    if not 0 < g <= 1:
        raise ValueError(f"g must lie in (0, 1], got {g}")
    if variant == "max_h":
        return float(h.max())
    if variant == "g":
        return float(g)
    raise ValueError(f"unknown score variant {variant!r}")


def score_tensor(h: torch.Tensor, g: torch.Tensor, variant: str) -> torch.Tensor:
    """Batched differentiable score: (B, C), (B,) -> (B,)."""
    if variant == "max_h":
        return h.max(dim=-1).values
    if variant == "g":
        return g
    raise ValueError(f"unknown score variant {variant!r}")


def perturb(x: torch.Tensor, epsilon: float, score_fn) -> torch.Tensor:
    """x + epsilon * sign(dS/dx), clamped to the valid pixel range.

    score_fn maps the input tensor to a scalar score (summed over the
    batch when batched). sign(0) = 0, so flat pixels stay unchanged, and
    epsilon = 0 returns x exactly.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x0 = x.detach().clone().requires_grad_(True)
    s = score_fn(x0)
    (grad,) = torch.autograd.grad(s, x0)
    if not torch.isfinite(grad).all():
        bad = (~torch.isfinite(grad)).sum().item()
        raise NonFiniteGradientError(
            f"{bad} non-finite gradient entries for score {float(s):.4g}")
    return (x0.detach() + epsilon * torch.sign(grad)).clamp(0.0, 1.0)


def smooth(raw_scores, window: int) -> np.ndarray:
    """Trailing moving average over the min(window, t+1) latest values."""
    if window < 1:
        raise ValueError("window must be >= 1")
    raw = np.asarray(raw_scores, dtype=float)
    out = np.empty_like(raw)
    for t in range(raw.shape[0]):
        out[t] = raw[max(0, t - window + 1):t + 1].mean()
    return out


def decide(smoothed_scores, decider: ExitDecider) -> np.ndarray:
    """Exit flags: smoothed score strictly below phi."""
    if decider.phi is None:
        raise ValueError("decider has no threshold; calibrate phi first")
    return np.asarray(smoothed_scores, dtype=float) < decider.phi


def _batched(items, size: int = 64):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _grad_signs(net, z0: torch.Tensor, zd: torch.Tensor, x: torch.Tensor,
                variant: str) -> torch.Tensor:
    """Per-sample sign(dS/dx) for a batch of crop triples."""
    x = x.detach().clone().requires_grad_(True)
    out = net(z0, zd, x)
    s = score_tensor(out["ood_h"], out["ood_g"], variant).sum()
    (grad,) = torch.autograd.grad(s, x)
    if not torch.isfinite(grad).all():
        raise NonFiniteGradientError("non-finite score gradient during calibration")
    return torch.sign(grad)


def _perturbed_scores(net, crops, epsilon: float, variant: str,
                      signs=None) -> np.ndarray:
    """Frame-ordered S(x_hat) for a list of (z0, zd, x) crop triples."""
    scores = []
    for i, batch in enumerate(_batched(crops)):
        z0 = torch.stack([c[0] for c in batch])
        zd = torch.stack([c[1] for c in batch])
        x = torch.stack([c[2] for c in batch])
        sgn = signs[i] if signs is not None else _grad_signs(net, z0, zd, x, variant)
        xhat = (x + epsilon * sgn).clamp(0.0, 1.0)
        with torch.no_grad():
            out = net(z0, zd, xhat)
            s = score_tensor(out["ood_h"], out["ood_g"], variant)
        scores.append(s.double().numpy())
    return np.concatenate(scores)


def collect_id_crops(net, sequences):
    """Track each sequence once; returns its per-frame crop triples.

    Rejects sequences containing absent-target frames: calibration is
    defined on in-distribution data only.
    """
    if not sequences:
        raise ValueError("need at least one calibration sequence")
    per_seq = []
    for seq in sequences:
        if seq.has_exit:
            raise ValueError(f"{seq.id}: calibration sequences must have no exits")
        res = track_sequence(net, seq, collect_crops=True)
        per_seq.append(res.crops)
    return per_seq


def select_epsilon(net, val_id_seqs, config: PerturbConfig,
                   crops_per_seq=None) -> float:
    """Grid-search the perturbation magnitude on validation crops.

    Picks the grid value maximizing the summed perturbed score over all
    validation frames; ties break toward the smaller magnitude.
    """
    config.validate()
    if crops_per_seq is None:
        crops_per_seq = collect_id_crops(net, val_id_seqs)
    crops = [c for seq_crops in crops_per_seq for c in seq_crops]
    if not crops:
        raise ValueError("no validation frames to calibrate on")

    signs = []
    for batch in _batched(crops):
        z0 = torch.stack([c[0] for c in batch])
        zd = torch.stack([c[1] for c in batch])
        x = torch.stack([c[2] for c in batch])
        signs.append(_grad_signs(net, z0, zd, x, config.score_variant))

    sums = np.empty(len(config.epsilon_grid))
    for k, eps in enumerate(config.epsilon_grid):
        s = _perturbed_scores(net, crops, eps, config.score_variant, signs=signs)
        sums[k] = np.sum(s)  # numpy pairwise summation
    return float(config.epsilon_grid[int(np.argmax(sums))])


def calibrate_phi(net, val_id_seqs, config: PerturbConfig,
                  decider: ExitDecider, crops_per_seq=None) -> float:
    """Quantile threshold over smoothed in-distribution scores."""
    config.validate()
    decider.validate()
    if config.epsilon_star is None:
        raise ValueError("select epsilon_star before calibrating phi")
    if crops_per_seq is None:
        crops_per_seq = collect_id_crops(net, val_id_seqs)
    if not any(crops_per_seq):
        raise ValueError("no validation frames to calibrate on")
    smoothed_all = []
    for seq_crops in crops_per_seq:
        raw = _perturbed_scores(net, seq_crops, config.epsilon_star,
                                config.score_variant)
        smoothed_all.append(smooth(raw, decider.window))
    pool = np.concatenate(smoothed_all)
    return float(np.quantile(pool, decider.calibration_quantile))


class OnlineExitDecider:
    """Streaming exit detector plugged into track_sequence.

    For each frame it perturbs the search crop with the calibrated
    epsilon, scores it, updates the trailing moving average, and flags
    exit when the smoothed score drops below phi.
    """

    def __init__(self, perturb_cfg: PerturbConfig, decider: ExitDecider):
        perturb_cfg.validate()
        decider.validate()
        if perturb_cfg.epsilon_star is None:
            raise ValueError("decider requires a calibrated epsilon_star")
        if decider.phi is None:
            raise ValueError("decider requires a calibrated phi")
        self.perturb_cfg = perturb_cfg
        self.decider = decider
        self._raw: list[float] = []
        self._smoothed: list[float] = []
        self._flags: list[bool] = []

    def reset(self) -> None:
        self._raw.clear()
        self._smoothed.clear()
        self._flags.clear()

    def observe(self, net, state, search: torch.Tensor):
        z0 = state.initial_template.unsqueeze(0)
        zd = state.dynamic_template.unsqueeze(0)
        x = search.unsqueeze(0).detach().clone().requires_grad_(True)
        with torch.enable_grad():
            out = net(z0, zd, x)
            s = score_tensor(out["ood_h"], out["ood_g"],
                             self.perturb_cfg.score_variant).sum()
            (grad,) = torch.autograd.grad(s, x)
        if not torch.isfinite(grad).all():
            raise NonFiniteGradientError("non-finite score gradient while tracking")
        xhat = (x.detach() + self.perturb_cfg.epsilon_star * torch.sign(grad))
        xhat = xhat.clamp(0.0, 1.0)
        with torch.no_grad():
            out2 = net(z0, zd, xhat)
            raw = float(score_tensor(out2["ood_h"], out2["ood_g"],
                                     self.perturb_cfg.score_variant)[0])

        self._raw.append(raw)
        w = self.decider.window
        smoothed = float(np.mean(self._raw[max(0, len(self._raw) - w):]))
        flag = smoothed < self.decider.phi
        self._smoothed.append(smoothed)
        self._flags.append(flag)

        step_out = build_step_output(out)
        return step_out, flag

    def finalize(self) -> OODTrace:
        return OODTrace(
            raw_scores=np.array(self._raw),
            smoothed_scores=np.array(self._smoothed),
            decisions=np.array(self._flags, dtype=bool),
        )


def write_trace(trace: OODTrace, path: str) -> None:
    """Line-delimited records: frame_index, raw, smoothed, exit flag."""
    with open(path, "w", encoding="utf-8") as f:
        for t in range(len(trace.raw_scores)):
            f.write(f"{t},{trace.raw_scores[t]!r},{trace.smoothed_scores[t]!r},"
                    f"{int(trace.decisions[t])}\n")

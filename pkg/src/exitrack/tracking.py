"""One-pass tracking over a sequence.

The tracker is initialized from the first-frame ground-truth box and
never reinitialized. Each step crops a square search window around the
previous prediction, runs the network, and maps the predicted corners
back to frame coordinates. Every `template_update_period` frames the
dynamic template is re-cropped from the current prediction when the
update score exceeds 0.5. An optional exit decider turns per-frame OOD
scores into exit flags; flagged frames are reported as the EXIT
sentinel while the internal track state keeps the raw prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import EXIT_BOX, BBox
from .net import TrackerNet
from .sequences import Sequence

__all__ = [
    "StepOutput",
    "TrackerState",
    "TrackResult",
    "to_tensor",
    "crop_window",
    "init_state",
    "build_step_output",
    "forward_step",
    "track_sequence",
]

TEMPLATE_FACTOR = 2.0
SEARCH_FACTOR = 4.0
MIN_BOX_SIDE = 1.0
MIN_WINDOW = 4


@dataclass
class StepOutput:
    """Per-frame head outputs; bbox is in search-crop coordinates."""

    bbox: BBox
    bbox_frame: BBox
    update_score: float
    ood_h: np.ndarray
    ood_g: float
    ood_logits: np.ndarray


@dataclass
class TrackerState:
    initial_template: torch.Tensor
    dynamic_template: torch.Tensor
    last_box: BBox
    step: int = 0
    last_features: dict = field(default_factory=dict, repr=False)


@dataclass
class TrackResult:
    outputs: list[StepOutput]
    raw_boxes: list[BBox]
    reported_boxes: list[BBox]
    trace: object | None = None
    crops: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]] | None = None


def to_tensor(frame: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 -> (3, H, W) float in [0, 1]."""
    return torch.from_numpy(frame.astype(np.float32) / 255.0).permute(2, 0, 1)


def crop_window(frame: np.ndarray, cx: float, cy: float, side: float,
                out_size: int) -> tuple[torch.Tensor, tuple[float, float], float]:
    """Square crop resized to out_size; returns (tensor, origin, scale).

    The window is shifted (and capped) to lie inside the frame. A crop
    pixel coordinate v maps back to frame coordinate v / scale + origin.
    """
    h, w = frame.shape[:2]
    side_i = int(round(max(side, MIN_WINDOW)))
    side_i = min(side_i, w, h)
    ox = int(round(min(max(cx - side_i / 2.0, 0), w - side_i)))
    oy = int(round(min(max(cy - side_i / 2.0, 0), h - side_i)))
    patch = to_tensor(frame[oy:oy + side_i, ox:ox + side_i])
    scale = out_size / side_i
    if side_i != out_size:
        patch = torch.nn.functional.interpolate(
            patch.unsqueeze(0), size=(out_size, out_size),
            mode="bilinear", align_corners=False).squeeze(0)
    return patch, (float(ox), float(oy)), scale


def _crop_template(net: TrackerNet, frame: np.ndarray, box: BBox) -> torch.Tensor:
    cx, cy = box.center
    side = TEMPLATE_FACTOR * max(box.w, box.h)
    patch, _, _ = crop_window(frame, cx, cy, side, net.cfg.template_size)
    return patch


def init_state(net: TrackerNet, frame: np.ndarray, box: BBox) -> TrackerState:
    if box.is_exit:
        raise ValueError("cannot initialize tracking on an absent target")
    tmpl = _crop_template(net, frame, box)
    return TrackerState(initial_template=tmpl, dynamic_template=tmpl.clone(),
                        last_box=box)


def _corners_to_bbox(corners: np.ndarray) -> BBox:
    x1, x2 = sorted((float(corners[0]), float(corners[2])))
    y1, y2 = sorted((float(corners[1]), float(corners[3])))
    w = x2 - x1
    h = y2 - y1
    if w < MIN_BOX_SIDE:
        cx = (x1 + x2) / 2.0
        x1, w = cx - MIN_BOX_SIDE / 2.0, MIN_BOX_SIDE
    if h < MIN_BOX_SIDE:
        cy = (y1 + y2) / 2.0
        y1, h = cy - MIN_BOX_SIDE / 2.0, MIN_BOX_SIDE
    return BBox(x1, y1, w, h)


def build_step_output(out: dict) -> StepOutput:
    """StepOutput view of a batch-of-one forward result."""
    corners = out["corners"][0].detach().numpy()
    return StepOutput(
        bbox=_corners_to_bbox(corners),
        bbox_frame=EXIT_BOX,  # filled by the caller once mapped
        update_score=float(out["update_score"][0]),
        ood_h=out["ood_h"][0].detach().numpy().copy(),
        ood_g=float(out["ood_g"][0]),
        ood_logits=out["ood_f"][0].detach().numpy().copy(),
    )


def forward_step(net: TrackerNet, state: TrackerState,
                 search: torch.Tensor) -> tuple[StepOutput, dict]:
    """Run the network on one prepared search crop (crop coordinates only)."""
    out = net(state.initial_template.unsqueeze(0),
              state.dynamic_template.unsqueeze(0),
              search.unsqueeze(0))
    step_out = build_step_output(out)
    state.last_features = dict(out["features"])
    return step_out, out


def track_sequence(net: TrackerNet, seq: Sequence, decider=None,
                   collect_crops: bool = False) -> TrackResult:
    """One-pass evaluation of a sequence from its first ground-truth box."""
    net.eval()
    first = seq.annotations[0].bbox
    frame0 = seq.load_frame(0)
    state = init_state(net, frame0, first)
    period = net.cfg.template_update_period

    outputs: list[StepOutput] = []
    raw_boxes: list[BBox] = []
    reported: list[BBox] = []
    crops = [] if collect_crops else None
    if decider is not None:
        decider.reset()

    for t in range(len(seq)):
        frame = frame0 if t == 0 else seq.load_frame(t)
        cx, cy = state.last_box.center
        side = SEARCH_FACTOR * max(state.last_box.w, state.last_box.h)
        search, origin, scale = crop_window(frame, cx, cy, side,
                                            net.cfg.search_size)
        if collect_crops:
            crops.append((state.initial_template.clone(),
                          state.dynamic_template.clone(), search.clone()))

        if decider is not None:
            step_out, flag = decider.observe(net, state, search)
        else:
            with torch.no_grad():
                step_out, _ = forward_step(net, state, search)
            flag = False

        crop_box = step_out.bbox
        frame_box = BBox(crop_box.x / scale + origin[0],
                         crop_box.y / scale + origin[1],
                         max(crop_box.w / scale, MIN_BOX_SIDE),
                         max(crop_box.h / scale, MIN_BOX_SIDE))
        step_out.bbox_frame = frame_box

        if t == 0:
            # frame 0 is the given initialization; keep its ground truth box
            raw_box = first
        else:
            raw_box = frame_box
        raw_boxes.append(raw_box)
        reported.append(EXIT_BOX if flag else raw_box)
        outputs.append(step_out)

        if t > 0 and t % period == 0 and step_out.update_score > 0.5:
            state.dynamic_template = _crop_template(net, frame, raw_box)
        state.last_box = raw_box
        state.step = t + 1

    trace = decider.finalize() if decider is not None else None
    return TrackResult(outputs=outputs, raw_boxes=raw_boxes,
                       reported_boxes=reported, trace=trace, crops=crops)

"""Scripted conveyor pick-and-place episodes gated by exit flags.

The robot holds an item and tracks the target slot. It may place only
while the exit signal is off and the (predicted) target box has dwelled
in the place zone for K consecutive frames. Placing while the target is
truly absent drops the item on the belt and fails the episode; an exit
flag sends the robot to HOLDING until the target reappears. There is no
robot kinematics here, only the decision trace.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .geometry import BBox

__all__ = [
    "Phase",
    "TaskState",
    "PlaceZone",
    "EpisodeResult",
    "EpisodeStepError",
    "step",
    "run_episode",
    "format_episode_log",
]


class Phase(str, enum.Enum):
    TRACKING = "TRACKING"
    HOLDING = "HOLDING"
    PLACING = "PLACING"
    DONE = "DONE"
    FAILED = "FAILED"


class EpisodeStepError(RuntimeError):
    """step() was called on a finished episode."""


@dataclass(frozen=True)
class TaskState:
    phase: Phase = Phase.TRACKING
    held_item: bool = True
    frames_in_hold: int = 0
    placed_on_target: bool | None = None


@dataclass(frozen=True)
class PlaceZone:
    """Target-center rectangle plus the dwell requirement.

    The zone counts as reached once the box center has been inside the
    rectangle for `dwell` consecutive frames.
    """

    x: float
    y: float
    w: float
    h: float
    dwell: int = 3

    def contains_center(self, box: BBox) -> bool:
        if box.is_exit:
            return False
        cx, cy = box.center
        return self.x <= cx <= self.x + self.w and self.y <= cy <= self.y + self.h


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    placed_on_target: bool
    place_frame: int | None
    holds: int


def step(state: TaskState, frame_gt_visible: bool, exit_flag: bool,
         in_place_zone: bool) -> TaskState:
    """Advance the gating state machine by one frame.

    PLACING resolves on the following tick: DONE when the item went onto
    the visible target, FAILED when it went onto the bare belt.
    """
    if state.phase in (Phase.DONE, Phase.FAILED):
        raise EpisodeStepError(f"episode already finished ({state.phase.value})")
    if state.phase is Phase.PLACING:
        done = Phase.DONE if state.placed_on_target else Phase.FAILED
        return replace(state, phase=done, held_item=False)
    if state.phase is Phase.HOLDING:
        if exit_flag:
            return replace(state, frames_in_hold=state.frames_in_hold + 1)
        return replace(state, phase=Phase.TRACKING)
    # TRACKING
    if exit_flag:
        return replace(state, phase=Phase.HOLDING,
                       frames_in_hold=state.frames_in_hold + 1)
    if in_place_zone:
        return replace(state, phase=Phase.PLACING,
                       placed_on_target=bool(frame_gt_visible))
    return state


def run_episode(seq, exit_flags, zone: PlaceZone, pred_boxes=None):
    """Roll the state machine over a sequence; returns (result, log).

    pred_boxes defaults to the ground-truth annotations (a perfect
    tracker); pass tracker outputs to simulate the real system. The log
    holds one (frame, phase, exit_flag, in_zone) record per step.
    """
    flags = np.asarray(exit_flags, dtype=bool)
    if len(flags) != len(seq):
        raise ValueError(f"{seq.id}: {len(flags)} flags for {len(seq)} frames")
    boxes = list(pred_boxes) if pred_boxes is not None else seq.boxes
    if len(boxes) != len(seq):
        raise ValueError(f"{seq.id}: {len(boxes)} boxes for {len(seq)} frames")

    visibility = seq.visibility
    state = TaskState()
    holds = 0
    place_frame = None
    log = []
    streak = 0
    for t in range(len(seq)):
        streak = streak + 1 if zone.contains_center(boxes[t]) else 0
        in_zone = streak >= zone.dwell
        prev_phase = state.phase
        state = step(state, bool(visibility[t]), bool(flags[t]), in_zone)
        if prev_phase is Phase.TRACKING and state.phase is Phase.HOLDING:
            holds += 1
        if state.phase is Phase.PLACING and prev_phase is Phase.TRACKING:
            place_frame = t
        log.append((t, state.phase.value, bool(flags[t]), in_zone))
        if state.phase in (Phase.DONE, Phase.FAILED):
            break
    if state.phase is Phase.PLACING:
        # sequence ended mid-place; resolve with the recorded outcome
        state = step(state, False, False, False)
        log.append((len(log), state.phase.value, False, False))

    success = state.phase is Phase.DONE
    return EpisodeResult(
        success=success,
        placed_on_target=bool(state.placed_on_target) if place_frame is not None else False,
        place_frame=place_frame,
        holds=holds,
    ), log


def format_episode_log(log) -> str:
    return "\n".join(f"{t},{phase},{int(flag)},{int(zone)}"
                     for t, phase, flag, zone in log)

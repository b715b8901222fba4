"""Deterministic synthetic conveyor-belt sequences with ground truth.

A colored shape (the target) rides a moving belt past the camera while
distractor shapes of other shape/color pairs share the belt. The target
can be absent for configured frame windows (an empty belt slot) or by
leaving the camera frame; absent frames are annotated with the EXIT
sentinel. Identical specs render bit-identical sequences.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import EXIT_BOX, BBox
from .sequences import FrameAnnotation, Sequence, write_sequence

__all__ = [
    "SHAPES",
    "COLORS",
    "SceneSpec",
    "render",
    "generate",
    "generate_split",
    "spec_to_kv",
    "spec_from_kv",
]

SHAPES = ("square", "circle", "triangle", "diamond")

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 90, 230),
    "yellow": (230, 210, 50),
    "magenta": (210, 60, 200),
    "cyan": (60, 200, 210),
}

# default target class inventory: distinct colors keep classes separable
DEFAULT_CLASSES = (
    ("red", "square"),
    ("green", "circle"),
    ("blue", "triangle"),
    ("yellow", "diamond"),
    ("magenta", "circle"),
    ("cyan", "square"),
)

_BG = np.array((72, 72, 76), dtype=np.uint8)
_BELT = np.array((58, 58, 62), dtype=np.uint8)
_SLAT = np.array((86, 86, 90), dtype=np.uint8)
_BELT_Y = (10, 54)  # belt band rows at the default 64px frame height
_SLAT_PERIOD = 16.0


@dataclass
class SceneSpec:
    """Full recipe for one rendered sequence."""

    seed: int
    frame_size: tuple[int, int] = (64, 64)  # (W, H)
    n_frames: int = 80
    belt_speed: float = 0.5
    n_distractors: int = 2
    target_shape: str = "square"
    target_color: str = "red"
    target_size: float = 12.0
    start_x: float = 14.0
    lane_y: float = 32.0
    camera_jitter: float = 0.3
    exit_windows: tuple[tuple[int, int], ...] = ()  # half-open [start, end)
    id: str = ""

    def validate(self) -> None:
        w, h = self.frame_size
        if w < 8 or h < 8:
            raise ValueError("frame_size too small")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.belt_speed < 0:
            raise ValueError("belt_speed must be >= 0")
        if self.n_distractors < 0:
            raise ValueError("n_distractors must be >= 0")
        if self.target_shape not in SHAPES:
            raise ValueError(f"unknown shape {self.target_shape!r}")
        if self.target_color not in COLORS:
            raise ValueError(f"unknown color {self.target_color!r}")
        if self.target_size <= 0:
            raise ValueError("target_size must be > 0")
        if self.camera_jitter < 0:
            raise ValueError("camera_jitter must be >= 0")
        for start, end in self.exit_windows:
            if not (0 <= start < end <= self.n_frames):
                raise ValueError(f"exit window ({start},{end}) outside frames")
            if start == 0:
                raise ValueError("frame 0 cannot be inside an exit window")

    @property
    def class_label(self) -> str:
        return f"{self.target_color}_{self.target_shape}"

    def in_exit_window(self, t: int) -> bool:
        return any(s <= t < e for s, e in self.exit_windows)


def _shape_mask(shape: str, cx: float, cy: float, size: float,
                xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    half = size / 2.0
    if shape == "square":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
    if shape == "diamond":
        return np.abs(xx - cx) + np.abs(yy - cy) <= half
    if shape == "triangle":
        # apex up: width grows linearly from apex to base
        rel = (yy - (cy - half)) / size
        return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * half)
    raise ValueError(f"unknown shape {shape!r}")


def _fully_outside(box: BBox, w: int, h: int) -> bool:
    return box.x >= w or box.x2 <= 0 or box.y >= h or box.y2 <= 0


def render(spec: SceneSpec) -> tuple[list[np.ndarray], list[BBox]]:
    """Render all frames and per-frame annotations for a spec."""
    spec.validate()
    w, h = spec.frame_size
    rng = np.random.default_rng(spec.seed)

    jitters = rng.normal(0.0, spec.camera_jitter, size=(spec.n_frames, 2))
    slat_phase0 = rng.uniform(0, _SLAT_PERIOD)

    distractors = []
    for _ in range(spec.n_distractors):
        while True:
            shape = SHAPES[rng.integers(len(SHAPES))]
            color = list(COLORS)[rng.integers(len(COLORS))]
            if (color, shape) != (spec.target_color, spec.target_shape):
                break
        dx = rng.choice([-1.0, 1.0]) * rng.uniform(18.0, 44.0)
        dy = rng.choice([-1.0, 1.0]) * rng.uniform(11.0, 15.0)
        size = rng.uniform(9.0, 13.0)
        distractors.append((shape, color, dx, dy, size))

    xx, yy = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    belt_top = _BELT_Y[0] * h / 64.0
    belt_bot = _BELT_Y[1] * h / 64.0

    frames: list[np.ndarray] = []
    boxes: list[BBox] = []
    for t in range(spec.n_frames):
        jx, jy = jitters[t]
        img = np.empty((h, w, 3), dtype=np.uint8)
        img[:] = _BG
        belt = (yy >= belt_top + jy) & (yy <= belt_bot + jy)
        img[belt] = _BELT
        phase = (xx - slat_phase0 - spec.belt_speed * t - jx) % _SLAT_PERIOD
        img[belt & (phase < 2.0)] = _SLAT

        cx = spec.start_x + spec.belt_speed * t + jx
        cy = spec.lane_y + jy
        for shape, color, dx, dy, size in distractors:
            m = _shape_mask(shape, cx + dx, cy + dy, size, xx, yy)
            img[m] = COLORS[color]

        half = spec.target_size / 2.0
        box = BBox(float(cx - half), float(cy - half),
                   float(spec.target_size), float(spec.target_size))
        absent = spec.in_exit_window(t) or _fully_outside(box, w, h)
        if absent:
            boxes.append(EXIT_BOX)
        else:
            m = _shape_mask(spec.target_shape, cx, cy, spec.target_size, xx, yy)
            img[m] = COLORS[spec.target_color]
            boxes.append(box)
        frames.append(img)
    return frames, boxes


def generate(spec: SceneSpec, out_root: str) -> Sequence:
    """Render a spec and write its sequence directory under out_root."""
    frames, boxes = render(spec)
    seq_id = spec.id or f"seq_{spec.seed:08d}"
    seq_dir = os.path.join(out_root, seq_id)
    frame_paths = [
        os.path.join(seq_dir, "frames", f"{i:06d}.png") for i in range(len(frames))
    ]
    seq = Sequence(
        id=seq_id,
        class_label=spec.class_label,
        frames=frame_paths,
        annotations=[FrameAnnotation(i, b) for i, b in enumerate(boxes)],
    )
    write_sequence(seq, seq_dir, frames=frames)
    spec_to_kv(spec, os.path.join(seq_dir, "scene.txt"))
    return seq


def _random_spec(rng: np.random.Generator, seq_id: str,
                 classes=DEFAULT_CLASSES, with_exit: bool = False) -> SceneSpec:
    color, shape = classes[rng.integers(len(classes))]
    n_frames = int(rng.integers(60, 101))
    size = float(rng.uniform(10.0, 14.0))
    start_x = float(rng.uniform(12.0, 18.0))
    lane_y = float(rng.uniform(28.0, 36.0))
    # speed keeps the target inside the frame for the whole sequence
    speed = float(rng.uniform(0.75, 1.0)) * (54.0 - start_x) / (n_frames - 1)

    windows: tuple[tuple[int, int], ...] = ()
    if with_exit:
        start = int(rng.integers(1, 4))
        length = int(rng.integers(12, 29))
        windows = ((start, start + length),)
        # occasionally a second gap later in the sequence
        if n_frames >= 80 and rng.random() < 0.25:
            s2 = start + length + int(rng.integers(10, 15))
            e2 = s2 + int(rng.integers(6, 11))
            if e2 <= n_frames - 20:
                windows = windows + ((s2, e2),)

    return SceneSpec(
        seed=int(rng.integers(2**31)),
        n_frames=n_frames,
        belt_speed=speed,
        n_distractors=int(rng.integers(2, 4)),
        target_shape=shape,
        target_color=color,
        target_size=size,
        start_x=start_x,
        lane_y=lane_y,
        exit_windows=windows,
        id=seq_id,
    )


def generate_split(n_train: int, n_val: int, n_test: int, seed: int,
                   out_root: str, exit_ratio: float = 0.2,
                   classes=DEFAULT_CLASSES):
    """Write train/val/test sequence sets; returns the three lists.

    Train sequences never contain absent-target frames. The val and test
    splits contain `exit_ratio` exit sequences (rounded); the remaining
    val sequences form the in-distribution calibration subset.
    """
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError("split sizes must be positive")
    if len(classes) < 4:
        raise ValueError("need at least 4 target classes")
    rng = np.random.default_rng(seed)
    splits = {}
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        n_exit = 0 if split == "train" else round(exit_ratio * count)
        exit_idx = set(rng.permutation(count)[:n_exit].tolist())
        seqs = []
        for i in range(count):
            spec = _random_spec(rng, f"{split}_{i:04d}", classes=classes,
                                with_exit=i in exit_idx)
            seqs.append(generate(spec, os.path.join(out_root, split)))
        splits[split] = seqs
    return splits["train"], splits["val"], splits["test"]


def spec_to_kv(spec: SceneSpec, path: str) -> None:
    """Serialize a spec as a flat key=value text file."""
    w, h = spec.frame_size
    windows = ";".join(f"{s}-{e}" for s, e in spec.exit_windows)
    fields = {
        "seed": spec.seed,
        "frame_w": w,
        "frame_h": h,
        "n_frames": spec.n_frames,
        "belt_speed": repr(spec.belt_speed),
        "n_distractors": spec.n_distractors,
        "target_shape": spec.target_shape,
        "target_color": spec.target_color,
        "target_size": repr(spec.target_size),
        "start_x": repr(spec.start_x),
        "lane_y": repr(spec.lane_y),
        "camera_jitter": repr(spec.camera_jitter),
        "exit_windows": windows,
        "id": spec.id,
    }
    with open(path, "w", encoding="utf-8") as f:
        for k, v in fields.items():
            f.write(f"{k}={v}\n")


def spec_from_kv(path: str) -> SceneSpec:
    kv = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                kv[k] = v
    windows = tuple(
        tuple(int(x) for x in part.split("-"))
        for part in kv.get("exit_windows", "").split(";")
        if part
    )
    return SceneSpec(
        seed=int(kv["seed"]),
        frame_size=(int(kv["frame_w"]), int(kv["frame_h"])),
        n_frames=int(kv["n_frames"]),
        belt_speed=float(kv["belt_speed"]),
        n_distractors=int(kv["n_distractors"]),
        target_shape=kv["target_shape"],
        target_color=kv["target_color"],
        target_size=float(kv["target_size"]),
        start_x=float(kv["start_x"]),
        lane_y=float(kv["lane_y"]),
        camera_jitter=float(kv["camera_jitter"]),
        exit_windows=windows,
        id=kv.get("id", ""),
    )

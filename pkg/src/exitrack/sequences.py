"""Sequence annotation I/O and dataset statistics.

On-disk layout per sequence:

    <seq_id>/frames/<%06d>.png
    <seq_id>/groundtruth.txt     one "x,y,w,h" line per frame
    <seq_id>/meta.txt            key=value lines (class_label)

Absent-target frames are stored as the line "-1,-1,-1,-1".
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import EXIT_BOX, BBox

__all__ = [
    "FrameAnnotation",
    "Sequence",
    "DatasetStats",
    "AnnotationParseError",
    "InvalidSequenceError",
    "load_sequence",
    "load_dataset",
    "write_sequence",
    "format_box",
    "compute_stats",
    "exit_segment_lengths",
]

SENTINEL_LINE = "-1,-1,-1,-1"


class AnnotationParseError(ValueError):
    """A groundtruth line could not be parsed as a box or sentinel."""


class InvalidSequenceError(ValueError):
    """The sequence as a whole violates a structural invariant."""


@dataclass(frozen=True)
class FrameAnnotation:
    frame_index: int
    bbox: BBox

    @property
    def visible(self) -> bool:
        return not self.bbox.is_exit


@dataclass
class Sequence:
    """Ordered frames plus per-frame annotations and an object-class label."""

    id: str
    class_label: str
    frames: list[str]
    annotations: list[FrameAnnotation] = field(repr=False)

    def __post_init__(self):
        if len(self.frames) != len(self.annotations):
            raise InvalidSequenceError(
                f"{self.id}: {len(self.frames)} frames vs "
                f"{len(self.annotations)} annotations"
            )
        if not self.annotations:
            raise InvalidSequenceError(f"{self.id}: empty sequence")
        if not self.annotations[0].visible:
            raise InvalidSequenceError(
                f"{self.id}: first frame must have a visible target"
            )

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def boxes(self) -> list[BBox]:
        return [a.bbox for a in self.annotations]

    @property
    def visibility(self) -> np.ndarray:
        """Boolean per-frame array, True where the target is annotated visible."""
        return np.array([a.visible for a in self.annotations], dtype=bool)

    @property
    def has_exit(self) -> bool:
        return bool((~self.visibility).any())

    def load_frame(self, index: int) -> np.ndarray:
        """Read frame pixels as an HxWx3 uint8 array."""
        from PIL import Image

        with Image.open(self.frames[index]) as im:
            return np.asarray(im.convert("RGB"))


@dataclass(frozen=True)
class DatasetStats:
    """Exit-frequency and length statistics over a sequence collection.

    evr: fraction of sequences containing at least one absent-target frame.
    ael: mean count of absent frames per exit-containing sequence.
    avl: mean sequence length over all sequences.
    miel/mael: min/max length of a maximal run of consecutive absent frames.
    """

    evr: float
    ael: float
    avl: float
    miel: int
    mael: int
    n_classes: int


def _format_value(v: float) -> str:
    # repr round-trips doubles exactly; integers stay compact via int cast
    f = float(v)
    if f.is_integer() and abs(f) < 1e15:
        return str(int(f))
    return repr(f)


def format_box(b: BBox) -> str:
    if b.is_exit:
        return SENTINEL_LINE
    return ",".join(_format_value(v) for v in b.as_tuple())


def _parse_line(line: str, lineno: int) -> BBox:
    parts = line.strip().split(",")
    if len(parts) != 4:
        raise AnnotationParseError(
            f"line {lineno}: expected 4 comma-separated values, got {len(parts)}"
        )
    try:
        vals = [float(p) for p in parts]
    except ValueError as e:
        raise AnnotationParseError(f"line {lineno}: non-numeric field ({e})") from e
    if all(v == -1 for v in vals):
        return EXIT_BOX
    try:
        return BBox(*vals)
    except ValueError as e:
        raise AnnotationParseError(f"line {lineno}: {e}") from e


def _read_meta(path: str) -> dict[str, str]:
    meta = {}
    if os.path.isfile(path):
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line and "=" in line:
                    k, v = line.split("=", 1)
                    meta[k.strip()] = v.strip()
    return meta


def load_sequence(annotation_file: str, frame_dir: str) -> Sequence:
    """Read one sequence from its groundtruth file and frame directory.

    The class label is taken from meta.txt next to the annotation file
    when present. Frame paths are taken from the directory listing, or
    synthesized as zero-padded indices when no frames are on disk yet.
    """
    with open(annotation_file, encoding="utf-8") as f:
        lines = [ln for ln in (raw.rstrip("\n") for raw in f) if ln.strip()]
    if not lines:
        raise InvalidSequenceError(f"{annotation_file}: empty annotation file")

    annotations = [
        FrameAnnotation(i, _parse_line(line, i + 1)) for i, line in enumerate(lines)
    ]

    if os.path.isdir(frame_dir):
        listed = sorted(
            os.path.join(frame_dir, name)
            for name in os.listdir(frame_dir)
            if name.lower().endswith(".png")
        )
    else:
        listed = []
    if listed:
        if len(listed) != len(annotations):
            raise InvalidSequenceError(
                f"{annotation_file}: {len(annotations)} annotation lines vs "
                f"{len(listed)} frame files"
            )
        frames = listed
    else:
        frames = [os.path.join(frame_dir, f"{i:06d}.png") for i in range(len(lines))]

    seq_dir = os.path.dirname(os.path.abspath(annotation_file))
    meta = _read_meta(os.path.join(seq_dir, "meta.txt"))
    return Sequence(
        id=os.path.basename(seq_dir),
        class_label=meta.get("class_label", "unknown"),
        frames=frames,
        annotations=annotations,
    )


def load_dataset(root: str) -> list[Sequence]:
    """Load every sequence directory under root, sorted by id."""
    seqs = []
    for name in sorted(os.listdir(root)):
        seq_dir = os.path.join(root, name)
        gt = os.path.join(seq_dir, "groundtruth.txt")
        if os.path.isfile(gt):
            seqs.append(load_sequence(gt, os.path.join(seq_dir, "frames")))
    return seqs


def write_sequence(seq: Sequence, seq_dir: str, frames=None) -> str:
    """Write a sequence directory; returns the annotation file path.

    Annotations round-trip bit-exactly through load_sequence. When
    `frames` (an iterable of HxWx3 uint8 arrays) is given, PNG frames
    are written too.
    """
    os.makedirs(seq_dir, exist_ok=True)
    gt_path = os.path.join(seq_dir, "groundtruth.txt")
    with open(gt_path, "w", encoding="utf-8") as f:
        for ann in seq.annotations:
            f.write(format_box(ann.bbox) + "\n")
    with open(os.path.join(seq_dir, "meta.txt"), "w", encoding="utf-8") as f:
        f.write(f"class_label={seq.class_label}\n")
    if frames is not None:
        from PIL import Image

        frame_dir = os.path.join(seq_dir, "frames")
        os.makedirs(frame_dir, exist_ok=True)
        for i, arr in enumerate(frames):
            Image.fromarray(arr).save(os.path.join(frame_dir, f"{i:06d}.png"))
    return gt_path


def exit_segment_lengths(seq: Sequence) -> list[int]:
    """Lengths of maximal runs of consecutive absent-target frames."""
    lengths = []
    run = 0
    for ann in seq.annotations:
        if not ann.visible:
            run += 1
        elif run:
            lengths.append(run)
            run = 0
    if run:
        lengths.append(run)
    return lengths


def compute_stats(sequences: list[Sequence]) -> DatasetStats:
    """Aggregate exit statistics; rejects an empty sequence list.

    With no exit frames anywhere, ael/miel/mael are reported as 0.
    """
    if not sequences:
        raise ValueError("compute_stats needs at least one sequence")
    n = len(sequences)
    exit_totals = []
    segment_lengths = []
    for seq in sequences:
        segs = exit_segment_lengths(seq)
        if segs:
            exit_totals.append(sum(segs))
            segment_lengths.extend(segs)
    evr = len(exit_totals) / n
    avl = sum(len(s) for s in sequences) / n
    ael = sum(exit_totals) / len(exit_totals) if exit_totals else 0.0
    miel = min(segment_lengths) if segment_lengths else 0
    mael = max(segment_lengths) if segment_lengths else 0
    n_classes = len({s.class_label for s in sequences})
    return DatasetStats(evr=evr, ael=ael, avl=avl, miel=miel, mael=mael,
                        n_classes=n_classes)

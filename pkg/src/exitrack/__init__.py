"""Exit-aware single-object tracking at desk scale.

A toy transformer tracker whose decomposed-confidence head flags when
the tracked target has left the frame, plus the synthetic conveyor data
generator, calibration and evaluation harness, and a gated pick-and-place
simulation.

Modules:
    geometry   box algebra (IoU, generalized IoU, normalized center distance)
    sequences  annotation file I/O and dataset statistics
    conveyor   deterministic synthetic conveyor-belt sequence generator
    net        the tracker network and its three heads
    losses     box/score/classification loss terms
    training   joint and two-stage optimization loops
    tracking   one-pass sequence tracking with template updates
    ood        score perturbation, smoothing, and exit-threshold calibration
    metrics    success AUC / OP75 / normalized precision, FPR, AUROC
    tasksim    exit-gated conveyor pick-and-place state machine
    cli        gen / train / calibrate / eval / simulate entry points
"""

from .geometry import BBox, EXIT_BOX, giou, iou, norm_center_distance
from .sequences import (DatasetStats, Sequence, compute_stats, load_dataset,
                        load_sequence, write_sequence)
from .conveyor import SceneSpec, generate, generate_split, render
from .net import NetConfig, TrackerNet, load_checkpoint, save_checkpoint
from .ood import ExitDecider, OODTrace, PerturbConfig
from .metrics import MetricsReport

__version__ = "0.1.0"

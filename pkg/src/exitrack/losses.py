"""Loss terms for the tracker heads.

Box and classification terms apply only to frames whose target is
visible; the update-score term always applies.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

__all__ = ["giou_tensor", "compute_losses", "LossInconsistencyError"]


class LossInconsistencyError(ValueError):
    """Supplied labels contradict the ground-truth boxes."""


def giou_tensor(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Generalized IoU for (x1, y1, x2, y2) corner rows.

    Predicted corners may be unordered early in training; their sides are
    clamped at zero so the value stays in [-1, 1].
    """
    pw = (pred[:, 2] - pred[:, 0]).clamp(min=0)
    ph = (pred[:, 3] - pred[:, 1]).clamp(min=0)
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    area_p = pw * ph
    area_g = gw * gh

    iw = (torch.min(pred[:, 2], gt[:, 2]) - torch.max(pred[:, 0], gt[:, 0])).clamp(min=0)
    ih = (torch.min(pred[:, 3], gt[:, 3]) - torch.max(pred[:, 1], gt[:, 1])).clamp(min=0)
    inter = iw * ih
    union = area_p + area_g - inter

    hw = torch.max(pred[:, 2], gt[:, 2]) - torch.min(pred[:, 0], gt[:, 0])
    hh = torch.max(pred[:, 3], gt[:, 3]) - torch.min(pred[:, 1], gt[:, 1])
    hull = (hw * hh).clamp(min=1e-9)

    return inter / union.clamp(min=1e-9) - (hull - union) / hull


def compute_losses(outputs: dict, gt_boxes: torch.Tensor, visible: torch.Tensor,
                   class_idx: torch.Tensor,
                   weights: tuple[float, float, float, float],
                   span: float = 1.0) -> dict:
    """Weighted loss terms for one batch.

    gt_boxes: (B, 4) [x, y, w, h] in search-crop pixels; rows of all -1
    mark absent targets and must carry visible = False.
    visible: (B,) bool; class_idx: (B,) long. span is the crop extent in
    pixels, used to normalize coordinates for the L1 term.
    Returns unweighted terms plus the weighted total.
    """
    w_giou, w_l1, w_bce, w_ce = weights
    corners = outputs["corners"]
    sentinel = (gt_boxes == -1).all(dim=1)
    if (sentinel & visible).any():
        raise LossInconsistencyError("visible label set on a sentinel box")

    dtype = corners.dtype
    visible = visible.to(torch.bool)
    zero = corners.new_zeros(())

    if visible.any():
        vis_corners = corners[visible]
        gt = gt_boxes[visible].to(dtype)
        gt_corners = torch.stack(
            [gt[:, 0], gt[:, 1], gt[:, 0] + gt[:, 2], gt[:, 1] + gt[:, 3]], dim=1)
        giou_term = (1.0 - giou_tensor(vis_corners, gt_corners)).mean()
        l1_term = F.l1_loss(vis_corners / span, gt_corners / span)
        ce_term = F.cross_entropy(outputs["ood_f"][visible], class_idx[visible])
    else:
        giou_term = zero.clone()
        l1_term = zero.clone()
        ce_term = zero.clone()

    bce_term = F.binary_cross_entropy(
        outputs["update_score"].clamp(1e-7, 1 - 1e-7), visible.to(dtype))

    total = w_giou * giou_term + w_l1 * l1_term + w_bce * bce_term + w_ce * ce_term
    return {
        "giou": giou_term,
        "l1": l1_term,
        "bce": bce_term,
        "ce": ce_term,
        "total": total,
    }

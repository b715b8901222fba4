"""Toy transformer tracker with three heads.

Dataflow: template crops and the search crop go through a shared conv
backbone; their token sequences are concatenated and encoded; a single
learned target query is decoded against the memory. The query/encoder
similarity map drives a corner head (soft-argmax over the coordinate
grid), a small MLP on the query feature predicts the template-update
score, and a decomposed-confidence head predicts per-class evidence h,
a domain probability g, and class logits f = h / g.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

OOD_INPUTS = ("backbone", "encoder", "similarity", "target_query")
TRAIN_MODES = ("joint", "two_stage")

__all__ = [
    "NetConfig",
    "TrackerNet",
    "OODHead",
    "soft_argmax",
    "save_checkpoint",
    "load_checkpoint",
    "OOD_INPUTS",
    "TRAIN_MODES",
]

# g is floored here to keep f = h / g finite if the sigmoid underflows
G_FLOOR = 1e-6


@dataclass
class NetConfig:
    """Architecture and loss-weight settings."""

    ood_input: str = "backbone"
    train_mode: str = "joint"
    template_update_period: int = 10
    feature_dim: int = 64
    n_classes: int = 6
    loss_weights: tuple[float, float, float, float] = (2.0, 5.0, 1.0, 1.0)
    search_size: int = 64
    template_size: int = 32
    n_heads: int = 4

    def validate(self) -> None:
        if self.ood_input not in OOD_INPUTS:
            raise ValueError(f"ood_input must be one of {OOD_INPUTS}")
        if self.train_mode not in TRAIN_MODES:
            raise ValueError(f"train_mode must be one of {TRAIN_MODES}")
        if self.template_update_period < 1:
            raise ValueError("template_update_period must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.feature_dim % 8 or self.feature_dim % self.n_heads:
            raise ValueError("feature_dim must be divisible by 8 and n_heads")
        if self.search_size % 8 or self.template_size % 8:
            raise ValueError("input sizes must be divisible by the stride (8)")


def soft_argmax(prob: torch.Tensor, grid_len: int, span: float) -> torch.Tensor:
    """Expected (x, y) of a spatial probability map.

    prob is (B, G*G) with rows summing to 1 over a G x G grid whose cell
    centers cover [0, span]. A one-hot row yields that cell's center; a
    uniform row yields the grid centroid.
    """
    stride = span / grid_len
    centers = (torch.arange(grid_len, dtype=prob.dtype, device=prob.device) + 0.5) * stride
    gy, gx = torch.meshgrid(centers, centers, indexing="ij")
    x = prob @ gx.reshape(-1)
    y = prob @ gy.reshape(-1)
    return torch.stack([x, y], dim=-1)


class Backbone(nn.Module):
    """Three stride-2 conv stages; total stride 8."""

    def __init__(self, dim: int):
        super().__init__()
        self.stages = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.GroupNorm(4, 32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GroupNorm(8, 64),
            nn.ReLU(inplace=True),
            nn.Conv2d(64, dim, 3, stride=2, padding=1),
            nn.GroupNorm(8, dim),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


class CornerHead(nn.Module):
    """Per-corner heatmap over the similarity-weighted search features."""

    def __init__(self, dim: int, grid_len: int, span: float):
        super().__init__()
        self.grid_len = grid_len
        self.span = span
        self.tl = nn.Sequential(
            nn.Conv2d(dim, 32, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 1, 3, padding=1),
        )
        self.br = nn.Sequential(
            nn.Conv2d(dim, 32, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 1, 3, padding=1),
        )

    def forward(self, weighted: torch.Tensor) -> torch.Tensor:
        b = weighted.shape[0]
        corners = []
        for branch in (self.tl, self.br):
            logits = branch(weighted).reshape(b, -1)
            prob = F.softmax(logits, dim=-1)
            corners.append(soft_argmax(prob, self.grid_len, self.span))
        return torch.cat(corners, dim=-1)  # (B, 4): x1, y1, x2, y2


class OODHead(nn.Module):
    """Decomposed confidence: evidence h per class, domain score g, f = h/g."""

    def __init__(self, in_dim: int, dim: int, n_classes: int):
        super().__init__()
        self.trunk = nn.Sequential(nn.Linear(in_dim, dim), nn.ReLU(inplace=True))
        self.evidence = nn.Linear(dim, n_classes)
        self.domain_norm = nn.LayerNorm(dim)
        self.domain = nn.Linear(dim, 1)

    def forward(self, feat: torch.Tensor):
        z = self.trunk(feat)
        h = self.evidence(z)
        g = torch.sigmoid(self.domain(self.domain_norm(z))).clamp(min=G_FLOOR)
        f = h / g
        return h, g, f


class TrackerNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.feature_dim
        self.search_grid = cfg.search_size // 8
        self.template_grid = cfg.template_size // 8
        n_search = self.search_grid**2
        n_tmpl = self.template_grid**2

        self.backbone = Backbone(d)
        self.pos_search = nn.Parameter(torch.zeros(n_search, d))
        self.pos_template_init = nn.Parameter(torch.zeros(n_tmpl, d))
        self.pos_template_dyn = nn.Parameter(torch.zeros(n_tmpl, d))
        nn.init.normal_(self.pos_search, std=0.02)
        nn.init.normal_(self.pos_template_init, std=0.02)
        nn.init.normal_(self.pos_template_dyn, std=0.02)

        self.encoder = nn.TransformerEncoderLayer(
            d, cfg.n_heads, dim_feedforward=2 * d, dropout=0.0, batch_first=True)
        self.decoder = nn.TransformerDecoderLayer(
            d, cfg.n_heads, dim_feedforward=2 * d, dropout=0.0, batch_first=True)
        self.target_query = nn.Parameter(torch.zeros(1, d))
        nn.init.normal_(self.target_query, std=0.02)

        self.corner_head = CornerHead(d, self.search_grid, float(cfg.search_size))
        self.update_head = nn.Sequential(
            nn.Linear(d, d), nn.ReLU(inplace=True), nn.Linear(d, 1))

        ood_in = 1 if cfg.ood_input == "similarity" else d
        self.ood_head = OODHead(ood_in, d, cfg.n_classes)

    def bbox_parameters(self):
        """Parameters of the localization path (frozen in stage 2)."""
        mods = [self.backbone, self.encoder, self.decoder, self.corner_head]
        for m in mods:
            yield from m.parameters()
        yield self.pos_search
        yield self.pos_template_init
        yield self.pos_template_dyn
        yield self.target_query

    def score_parameters(self):
        """Parameters of the update-score and OOD heads."""
        yield from self.update_head.parameters()
        yield from self.ood_head.parameters()

    def _tokens(self, img: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        feat = self.backbone(img)  # (B, D, G, G)
        tokens = feat.flatten(2).transpose(1, 2)  # (B, G*G, D)
        return tokens + pos, feat

    def forward(self, template_init: torch.Tensor, template_dyn: torch.Tensor,
                search: torch.Tensor) -> dict:
        """Run one step for a batch of (initial template, dynamic template, search).

        Returns corners in search-crop pixels plus head outputs and the
        intermediate features.
        """
        t0, f_z0 = self._tokens(template_init, self.pos_template_init)
        t1, f_zd = self._tokens(template_dyn, self.pos_template_dyn)
        sx, f_x = self._tokens(search, self.pos_search)
        memory = self.encoder(torch.cat([t0, t1, sx], dim=1))
        enc_search = memory[:, -sx.shape[1]:, :]  # (B, Ns, D)

        b = search.shape[0]
        query = self.target_query.unsqueeze(0).expand(b, -1, -1)
        f_tq = self.decoder(query, memory).squeeze(1)  # (B, D)

        scale = f_tq.shape[-1] ** 0.5
        similarity = torch.einsum("bd,bnd->bn", f_tq, enc_search) / scale

        attn = F.softmax(similarity, dim=-1).unsqueeze(-1)
        weighted = (enc_search * attn).transpose(1, 2).reshape(
            b, -1, self.search_grid, self.search_grid)
        corners = self.corner_head(weighted)

        update_score = torch.sigmoid(self.update_head(f_tq)).squeeze(-1)

        if self.cfg.ood_input == "backbone":
            ood_feat = f_x.mean(dim=(2, 3))
        elif self.cfg.ood_input == "encoder":
            ood_feat = enc_search.mean(dim=1)
        elif self.cfg.ood_input == "similarity":
            ood_feat = similarity.mean(dim=1, keepdim=True)
        else:  # target_query
            ood_feat = f_tq
        h, g, f = self.ood_head(ood_feat)

        return {
            "corners": corners,
            "update_score": update_score,
            "ood_h": h,
            "ood_g": g.squeeze(-1),
            "ood_f": f,
            "features": {
                "f_z": (f_z0, f_zd),
                "f_x": f_x,
                "enc_search": enc_search,
                "f_tq": f_tq,
                "similarity": similarity,
            },
        }


CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, net: TrackerNet, classes: list[str]) -> None:
    """Single-file checkpoint with a versioned header."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "net_config": asdict(net.cfg),
        "classes": list(classes),
        "state": {k: v.cpu() for k, v in sorted(net.state_dict().items())},
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> tuple[TrackerNet, list[str]]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    cfg_kv = dict(payload["net_config"])
    cfg_kv["loss_weights"] = tuple(cfg_kv["loss_weights"])
    cfg = NetConfig(**cfg_kv)
    net = TrackerNet(cfg)
    net.load_state_dict(payload["state"])
    net.eval()
    return net, list(payload["classes"])

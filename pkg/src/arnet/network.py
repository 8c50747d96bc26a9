"""Full decoder assembly, deep-supervision heads and the hybrid loss."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .backbone import BackboneStub, FeaturePyramid, check_input_size
from .ciim import CIIM
from .mse import MSE
from .nn import Module, PredictionHead
from .priors import BoundaryExtraction, RegionExtraction, boundary_gt
from .tensor import Tensor

BOUNDARY_WEIGHT = 3.0
LOSS_SMOOTH = 1.0


@dataclass
class ModelConfig:
    no_fap: bool = False
    no_hga: bool = False
    no_re: bool = False
    no_be: bool = False
    no_mse: bool = False
    no_ciim: bool = False
    se_instead_of_fap: bool = False
    hga_mode: str = "elementwise"

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        out = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                if f.type in ("bool", bool) and isinstance(v, str):
                    v = v.strip().lower() in ("1", "true", "yes", "on")
                out[f.name] = v
        return cls(**out)


@dataclass
class PredictionSet:
    P1: Tensor
    P2: Tensor
    P3: Tensor
    B_full: Optional[Tensor]
    B: Optional[Tensor] = None
    R: Optional[Tensor] = None

    @property
    def masks(self):
        return (self.P1, self.P2, self.P3)


class ARNet(Module):
    def __init__(self, config: ModelConfig = None, seed: int = 0, dtype=np.float64, backbone: Module = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        self.dtype = np.dtype(dtype)
        self.backbone = backbone if backbone is not None else BackboneStub(rng, dtype=dtype)
        self.re = None if cfg.no_re else RegionExtraction(rng, dtype=dtype)
        self.be = None if cfg.no_be else BoundaryExtraction(rng, dtype=dtype)
        if cfg.no_ciim:
            self.ciim = []
        else:
            self.ciim = [CIIM(rng, use_fap=not cfg.no_fap, use_hga=not cfg.no_hga,
                              se_instead_of_fap=cfg.se_instead_of_fap, hga_mode=cfg.hga_mode,
                              use_boundary=not cfg.no_be, use_region=not cfg.no_re, dtype=dtype)
                         for _ in range(3)]
        self.mse = [] if cfg.no_mse else [MSE(rng, dtype=dtype) for _ in range(3)]
        self.heads = [PredictionHead(64, rng, dtype=dtype) for _ in range(3)]

    def checkpoint_names(self):
        """Map internal parameter names to the namespaced checkpoint keys."""
        for name, _ in list(self.named_parameters()) + list(self.named_buffers()):
            yield name, _public_name(name)

    def stage(self, i: int, f_in: Tensor, f_in_prime: Tensor, B, R) -> Tensor:
        """One decode level: CIIM (or plain addition) then MSE. ``i`` is 0-based, top level = 2."""
        if self.config.no_ciim:
            f = T.add(T.upsample_bilinear(f_in, 2), f_in_prime)
            for g in (B, R):
                if g is not None:
                    f = T.add(f, T.resize_bilinear(g, f.shape[2:]))
        else:
            f = self.ciim[i](f_in, f_in_prime, B, R)
        return self.mse[i](f) if self.mse else f

    def forward(self, image: Tensor) -> PredictionSet:
        n, _, H, W = image.shape
        check_input_size(H, W)
        p: FeaturePyramid = self.backbone(image)
        R = self.re(p) if self.re is not None else None
        B = self.be(p) if self.be is not None else None
        F3 = self.stage(2, p.X4, p.X3, B, R)
        F2 = self.stage(1, F3, p.X2, B, R)
        F1 = self.stage(0, F2, p.X1, B, R)
        size = (H, W)
        P1 = self.heads[0](F1, size)
        P2 = self.heads[1](F2, size)
        P3 = self.heads[2](F3, size)
        B_full = T.upsample_bilinear(B, 4) if B is not None else None
        return PredictionSet(P1, P2, P3, B_full, B, R)

    # checkpoint plumbing

    def export_state(self) -> dict:
        return {_public_name(k): v for k, v in self.state_dict().items()}

    def import_state(self, state: dict):
        inv = {_public_name(k): k for k in self.state_dict()}
        self.load_state_dict({inv[k]: v for k, v in state.items() if k in inv}, strict=True)

    def config_hash(self) -> str:
        text = ";".join(f"{k}={v}" for k, v in sorted(self.config.as_dict().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:12]


_PREFIXES = (("ciim.", "ciim"), ("mse.", "mse"), ("heads.", "head"))


def _public_name(name: str) -> str:
    """``ciim.0.fap...`` -> ``ciim1.fap...``; backbone/re/be keep their prefix."""
    for internal, public in _PREFIXES:
        if name.startswith(internal):
            idx, _, rest = name[len(internal):].partition(".")
            return f"{public}{int(idx) + 1}.{rest}"
    return name


# ---------------------------------------------------------------------------
# losses

def bce_loss(p_logits: Tensor, g: np.ndarray) -> Tensor:
    return T.bce_with_logits(p_logits, g)


def iou_loss(p_logits: Tensor, g: np.ndarray, smooth: float = LOSS_SMOOTH) -> Tensor:
    return T.soft_iou_loss(p_logits, g, smooth)


def dice_loss(b_prob: Tensor, g_boundary: np.ndarray, smooth: float = LOSS_SMOOTH) -> Tensor:
    return T.dice_loss(b_prob, g_boundary, smooth)


@dataclass
class LossParts:
    total: Tensor
    bce: float
    iou: float
    dice: float
    n_mask_terms: int
    n_boundary_terms: int


def total_loss(preds: PredictionSet, g_mask: np.ndarray, g_boundary: Optional[np.ndarray] = None,
               boundary_weight: float = BOUNDARY_WEIGHT) -> LossParts:
    """Sum of BCE + IoU over the three heads plus the weighted boundary Dice term."""
    terms = []
    bce_sum = iou_sum = 0.0
    for P in preds.masks:
        lb = bce_loss(P, g_mask)
        li = iou_loss(P, g_mask)
        bce_sum += lb.item()
        iou_sum += li.item()
        terms += [lb, li]
    n_mask = len(preds.masks)
    dice_val = 0.0
    n_boundary = 0
    if preds.B_full is not None:
        if g_boundary is None:
            g_boundary = boundary_gt(g_mask)
        ld = dice_loss(preds.B_full, g_boundary)
        dice_val = ld.item()
        terms.append(T.scale(ld, boundary_weight))
        n_boundary = 1
    return LossParts(T.add_n(terms), bce_sum, iou_sum, dice_val, n_mask, n_boundary)

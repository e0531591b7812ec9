"""Differentiable training objectives and the loss schedule.

Every function takes torch tensors and is dtype-agnostic so the gradient
checks can run in float64.  Teacher-side quantities are expected to arrive
already detached; nothing here blocks gradients on its own except the
uncertainty weights, which are treated as constants.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from protoseg.geometry import SegMask
from protoseg.protobank import PrototypeBank, TeacherPrototypeSet, build_contrast_sets

logger = logging.getLogger(__name__)

CE_EPS = 1e-12
DICE_SMOOTH = 1e-5
UNCERTAINTY_EPS = 1e-6


class TrainingAborted(RuntimeError):
    """Raised when a loss component turns non-finite."""


@dataclass
class LossBundle:
    l_sup: float
    l_con: float
    l_u: float
    l_aux: float
    l_pc: float
    l_c: float
    l_total: float
    lambda_c: float
    lambda_aux: float
    lambda_pc: float
    lambda_u: float

    FIELDS = ("l_sup", "l_con", "l_u", "l_aux", "l_pc", "l_c", "l_total",
              "lambda_c", "lambda_aux", "lambda_pc", "lambda_u")

    def as_row(self) -> list[float]:
        return [getattr(self, name) for name in self.FIELDS]


def _as_batch(probs: torch.Tensor) -> torch.Tensor:
    # (C, H, W) -> (1, C, H, W)
    return probs.unsqueeze(0) if probs.dim() == 3 else probs


def supervised_loss(probs: torch.Tensor, gt: SegMask) -> torch.Tensor:
    """Half cross-entropy plus half soft dice against a ground-truth mask.

    probs: (C, H, W) or (B, C, H, W) softmax outputs; gt.labels must match the
    spatial shape (with a leading batch axis when probs is batched).
    """
    if gt.provenance != "ground-truth":
        raise ValueError("supervised loss requires ground-truth labels")
    probs = _as_batch(probs)
    labels = torch.as_tensor(np.asarray(gt.labels), dtype=torch.long)
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    if labels.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ValueError("probability map and labels are not aligned")
    num_classes = probs.shape[1]
    one_hot = F.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(probs.dtype)
    p_true = (probs * one_hot).sum(dim=1)
    ce = -(p_true + CE_EPS).log().mean()
    dims = (0, 2, 3)
    inter = (probs * one_hot).sum(dim=dims)
    card = probs.sum(dim=dims) + one_hot.sum(dim=dims)
    dice = 1.0 - ((2.0 * inter + DICE_SMOOTH) / (card + DICE_SMOOTH)).mean()
    return 0.5 * (ce + dice)


def contrastive_consistency_loss(
    anchor: torch.Tensor,
    positives: list[torch.Tensor],
    negatives: list[torch.Tensor],
    tau: float,
) -> torch.Tensor:
    """Similarity-weighted InfoNCE over one anchor prototype.

    All vectors are L2-normalized before dotting.  Positive weights are the
    anchor-positive dots normalized to sum to one; if that sum is not
    positive the weights fall back to uniform.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if len(positives) == 0:
        return anchor.sum() * 0.0
    a = F.normalize(anchor, dim=0)
    pos = F.normalize(torch.stack(positives), dim=1)
    d_pos = pos @ a  # (K,)
    pos_sum = d_pos.sum()
    if float(pos_sum.detach()) > 1e-8:
        weights = d_pos / pos_sum
    else:
        weights = torch.full_like(d_pos, 1.0 / len(positives))
    if len(negatives) == 0:
        log_prob = torch.zeros_like(d_pos)
    else:
        neg = F.normalize(torch.stack(negatives), dim=1)
        d_neg = neg @ a  # (M,)
        logits = torch.cat(
            [d_pos.unsqueeze(1), d_neg.unsqueeze(0).expand(len(positives), -1)], dim=1
        ) / tau
        log_prob = d_pos / tau - torch.logsumexp(logits, dim=1)
    return -(weights * log_prob).sum()


def uncertainty_weighted_pc_loss(bank: PrototypeBank, tau: float) -> torch.Tensor:
    """Sum of per-anchor contrastive losses weighted by a softmax over
    negated prototype uncertainties.  Weights are constants (no gradient)."""
    if len(bank) == 0:
        logger.warning("uncertainty_weighted_pc_loss: empty prototype bank")
        return torch.tensor(0.0)
    keys = list(bank.keys())
    ent = torch.tensor([bank[k].uncertainty if bank[k].uncertainty is not None else 0.0
                        for k in keys], dtype=torch.float64)
    weights = torch.softmax(-ent, dim=0)
    total = None
    for key, w in zip(keys, weights):
        sets = build_contrast_sets(bank, key)
        term = contrastive_consistency_loss(
            bank[key].vector,
            [vec for _, vec in sets.positives],
            [vec for _, vec in sets.negatives],
            tau,
        )
        term = float(w) * term
        total = term if total is None else total + term
    return total


def pixel_prototype_aux_loss(
    features: torch.Tensor,
    labels: np.ndarray,
    teacher_protos: TeacherPrototypeSet,
    tau: float,
) -> torch.Tensor:
    """Cosine InfoNCE of each pixel feature against its class's teacher
    prototype, with other classes' prototypes as negatives.

    Pixels whose class has no teacher prototype are skipped; the mean runs
    over contributing pixels only.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    classes = teacher_protos.classes()
    if not classes:
        logger.warning("pixel_prototype_aux_loss: no teacher prototypes")
        return torch.tensor(0.0)
    labels = np.asarray(labels)
    if features.shape[:2] != labels.shape:
        raise ValueError("features and labels are not spatially aligned")
    protos = torch.stack([teacher_protos.get(c) for c in classes]).to(features.dtype)
    protos = F.normalize(protos, dim=1)
    class_to_idx = {c: i for i, c in enumerate(classes)}
    targets = np.array([class_to_idx.get(int(v), -1) for v in labels.reshape(-1)])
    keep = np.nonzero(targets >= 0)[0]
    if len(keep) == 0:
        logger.warning("pixel_prototype_aux_loss: no pixel has a matching prototype")
        return torch.tensor(0.0)
    flat = F.normalize(features.reshape(-1, features.shape[-1])[torch.from_numpy(keep)], dim=1)
    sims = flat @ protos.T / tau  # (N, K)
    tgt = torch.from_numpy(targets[keep])
    log_prob = sims.gather(1, tgt.unsqueeze(1)).squeeze(1) - torch.logsumexp(sims, dim=1)
    return -log_prob.mean()


def consistency_loss(
    p_s: torch.Tensor, p_t: torch.Tensor, valid: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean squared error between two probability maps, optionally restricted
    to spatially valid pixels (e.g. after inverting a crop)."""
    p_s, p_t = _as_batch(p_s), _as_batch(p_t)
    if p_s.shape != p_t.shape:
        raise ValueError(f"shape mismatch {tuple(p_s.shape)} vs {tuple(p_t.shape)}")
    sq = (p_s - p_t) ** 2
    if valid is None:
        return sq.mean()
    if valid.dim() == 2:
        valid = valid.unsqueeze(0)
    valid = valid.to(sq.dtype).unsqueeze(1)  # (B, 1, H, W)
    denom = valid.sum() * p_s.shape[1]
    if float(denom) == 0.0:
        return sq.sum() * 0.0
    return (sq * valid).sum() / denom


def pixel_uncertainty(probs: torch.Tensor) -> torch.Tensor:
    """Per-pixel prediction entropy -sum_c v ln(v + eps), clamped at zero."""
    probs = _as_batch(probs)
    u = -(probs * (probs + UNCERTAINTY_EPS).log()).sum(dim=1)
    return u.clamp(min=0.0)


def uncertainty_loss(u_s: torch.Tensor, u_t: torch.Tensor) -> torch.Tensor:
    """Root-sum-square uncertainty of both branches, averaged over 2*H*W."""
    if u_s.shape != u_t.shape:
        raise ValueError(f"shape mismatch {tuple(u_s.shape)} vs {tuple(u_t.shape)}")
    n = u_s.reshape(u_s.shape[0], -1).shape[-1] if u_s.dim() > 2 else u_s.numel()
    if u_s.dim() > 2:
        # batched: mean of per-image losses
        s = u_s.reshape(u_s.shape[0], -1).pow(2).sum(dim=1).sqrt()
        t = u_t.reshape(u_t.shape[0], -1).pow(2).sum(dim=1).sqrt()
        return ((s + t) / (2.0 * n)).mean()
    return (u_s.pow(2).sum().sqrt() + u_t.pow(2).sum().sqrt()) / (2.0 * n)


def lambda_c_schedule(t: int, ramp_steps: int = 30000) -> float:
    """Gaussian ramp-up of the consistency weight, clamped at 0.1 past the
    ramp horizon."""
    if t < 0:
        raise ValueError("step must be nonnegative")
    if t >= ramp_steps:
        return 0.1
    return 0.1 * math.exp(-5.0 * (1.0 - t / ramp_steps) ** 2)


def total_loss(
    l_sup: torch.Tensor,
    l_con: torch.Tensor,
    l_u: torch.Tensor,
    l_aux: torch.Tensor,
    l_pc: torch.Tensor,
    t: int,
    lambda_aux: float = 0.3,
    lambda_pc: float = 0.1,
    lambda_u: float = 0.01,
    ramp_steps: int = 30000,
) -> tuple[torch.Tensor, LossBundle]:
    """Combine the active components into the training objective.

    Inactive components should be passed as zero tensors.  Returns the
    differentiable total plus a float-valued bundle for logging.
    """
    parts = {"l_sup": l_sup, "l_con": l_con, "l_u": l_u, "l_aux": l_aux, "l_pc": l_pc}
    for name, value in parts.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise TrainingAborted(f"non-finite loss component: {name}")
    lam_c = lambda_c_schedule(t, ramp_steps)
    l_c = l_con + lambda_u * l_u
    total = l_sup + lam_c * l_c + lambda_aux * l_aux + lambda_pc * l_pc
    def _f(v):
        return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

    # logged values are recombined in float64 so the bundle identities hold
    # to full double precision regardless of the tensor dtype
    f_sup, f_con, f_u, f_aux, f_pc = map(_f, (l_sup, l_con, l_u, l_aux, l_pc))
    f_c = f_con + lambda_u * f_u
    bundle = LossBundle(
        l_sup=f_sup, l_con=f_con, l_u=f_u, l_aux=f_aux, l_pc=f_pc, l_c=f_c,
        l_total=f_sup + lam_c * f_c + lambda_aux * f_aux + lambda_pc * f_pc,
        lambda_c=lam_c, lambda_aux=lambda_aux, lambda_pc=lambda_pc, lambda_u=lambda_u,
    )
    return total, bundle

"""Two-stage semi-supervised training loop.

Stage one is supervised warm-up on labeled images only; stage two adds the
student-teacher machinery: pseudo-labels from the teacher, per-batch
prototype banks from the student features, teacher prototype updates and the
full objective.  All randomness is derived per step from the root seed, so a
resumed run reproduces the uninterrupted loss stream exactly.
"""

import csv
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from protoseg import losses as losses_mod
from protoseg.data import Sample, SplitManifest, augment, invert_probabilities
from protoseg.geometry import SegMask, signed_distance_map
from protoseg.losses import LossBundle
from protoseg.metrics import evaluate_masks
from protoseg.model import SegmentationNet, ema_update_weights
from protoseg.protobank import (
    TeacherPrototypeSet,
    class_mean_feature,
    extract_prototypes,
    merge_banks,
    prototype_uncertainty,
)

LOSS_CSV_HEADER = ["step"] + list(LossBundle.FIELDS) + ["lr"]


@dataclass
class TrainConfig:
    """Every hyperparameter, schedule constant, toggle and seed of a run."""

    num_classes: int = 2
    image_size: int = 64
    in_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64, 64, 64)
    fused_channels: int = 256
    proj_dim: int = 128

    lambda_aux: float = 0.3
    lambda_pc: float = 0.1
    lambda_u: float = 0.01
    tau: float = 0.05
    mu: float = 0.99          # prototype EMA
    gamma: float = 0.999
    mu_w: float = 0.99        # weight EMA
    ramp_steps: int = 30000   # lambda_c ramp horizon
    t_max: int = 20000
    warmup_steps: int = -1    # -1 resolves to t_max // 10

    lr: float = 0.05
    lr_decay_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    labeled_ratio: float = 0.5

    use_con: bool = True
    use_u: bool = True
    use_aux: bool = True
    use_pc: bool = True
    consistency_on_labeled: bool = True
    pseudo_from_teacher: bool = True
    teacher_aug_crop: bool = False
    max_bin: int = 24
    proto_head_weight: float = 0.1

    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.warmup_steps < 0:
            self.warmup_steps = self.t_max // 10

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def poly_lr(base_lr: float, t: int, t_max: int, power: float) -> float:
    if t >= t_max:
        return 0.0
    return base_lr * (1.0 - t / t_max) ** power


def _nearest_downsample(labels: np.ndarray, stride: int) -> np.ndarray:
    return labels[::stride, ::stride]


class Trainer:
    """Owns the student/teacher parameter sets, the optimizer, the teacher
    prototype state and the step counter."""

    def __init__(self, config: TrainConfig, samples: list[Sample],
                 manifest: SplitManifest):
        self.config = config
        self.samples = {s.id: s for s in samples}
        self.manifest = manifest
        if not manifest.labeled:
            raise ValueError("labeled pool is empty")

        torch.manual_seed(config.seed)
        kwargs = dict(in_channels=config.in_channels, num_classes=config.num_classes,
                      widths=config.widths, fused_channels=config.fused_channels,
                      proj_dim=config.proj_dim)
        self.student = SegmentationNet(**kwargs)
        self.teacher = SegmentationNet(**kwargs)
        self.teacher.load_state_dict(self.student.state_dict())
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.optimizer = torch.optim.SGD(
            self.student.parameters(), lr=config.lr,
            momentum=config.momentum, weight_decay=config.weight_decay)
        self.protos = TeacherPrototypeSet()
        self.step_count = 0
        self.metric_history: list[dict] = []

    # ------------------------------------------------------------- batches
    def _pick(self, rng, pool: list[str], k: int) -> list[str]:
        if not pool:
            return []
        replace = len(pool) < k
        return list(rng.choice(pool, size=k, replace=replace))

    def _batch_ids(self, t: int) -> tuple[list[str], list[str]]:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 1000003, t])
        if t < cfg.warmup_steps or not self.manifest.unlabeled:
            return self._pick(rng, self.manifest.labeled, cfg.batch_size), []
        n_lab = max(1, int(round(cfg.batch_size * cfg.labeled_ratio)))
        n_unl = cfg.batch_size - n_lab
        return (self._pick(rng, self.manifest.labeled, n_lab),
                self._pick(rng, self.manifest.unlabeled, n_unl))

    def _images_tensor(self, samples: list[Sample]) -> torch.Tensor:
        arr = np.stack([s.image for s in samples])[:, None]
        return torch.from_numpy(arr.astype(np.float32))

    # ---------------------------------------------------------------- step
    def train_step(self, t: int | None = None) -> LossBundle:
        cfg = self.config
        if t is None:
            t = self.step_count
        lab_ids, unl_ids = self._batch_ids(t)
        lab = [self.samples[i] for i in lab_ids]
        unl = [self.samples[i] for i in unl_ids]
        warmup = t < cfg.warmup_steps or not unl

        lr_t = poly_lr(cfg.lr, t, cfg.t_max, cfg.lr_decay_power)
        for group in self.optimizer.param_groups:
            group["lr"] = lr_t

        batch = lab + unl
        x = self._images_tensor(batch)
        out_s = self.student(x)

        zero = out_s.logits.sum() * 0.0
        l_sup = zero.clone()
        for i, s in enumerate(lab):
            l_sup = l_sup + losses_mod.supervised_loss(out_s.probs[i], s.mask)
        l_sup = l_sup / max(1, len(lab))

        head_ce = self._proto_head_loss(out_s, lab)

        l_con = l_u = l_aux = l_pc = zero
        if not warmup:
            l_con, l_u, l_aux, l_pc = self._joint_losses(t, batch, lab, unl, out_s, zero)

        total, bundle = losses_mod.total_loss(
            l_sup, l_con, l_u, l_aux, l_pc, t,
            lambda_aux=cfg.lambda_aux, lambda_pc=cfg.lambda_pc,
            lambda_u=cfg.lambda_u, ramp_steps=cfg.ramp_steps)

        self.optimizer.zero_grad()
        (total + cfg.proto_head_weight * head_ce).backward()
        self.optimizer.step()
        ema_update_weights(self.student, self.teacher, cfg.mu_w)
        self.protos.advance()
        self.step_count = t + 1
        return bundle

    def _proto_head_loss(self, out_s, lab: list[Sample]) -> torch.Tensor:
        """Small CE training the prototype classifier on labeled pixels at
        feature resolution."""
        if not lab:
            return out_s.logits.sum() * 0.0
        stride = self.student.feature_stride
        feats, targets = [], []
        for i, s in enumerate(lab):
            small = _nearest_downsample(s.mask.labels, stride)
            feats.append(out_s.projected[i].permute(1, 2, 0).reshape(-1, self.config.proj_dim))
            targets.append(torch.from_numpy(small.reshape(-1).copy()))
        logits = self.student.proto_head(torch.cat(feats))
        return F.cross_entropy(logits, torch.cat(targets))

    def _joint_losses(self, t, batch, lab, unl, out_s, zero):
        cfg = self.config
        stride = self.student.feature_stride

        # teacher forward on augmented views; geometric part inverted back
        aug_images, records = [], []
        for i, s in enumerate(batch):
            aug, rec = augment(s, seed=[cfg.seed, 77, t, i],
                               allow_crop=cfg.teacher_aug_crop)
            aug_images.append(Sample(image=aug.image, mask=None, id=s.id))
            records.append(rec)
        with torch.no_grad():
            out_t = self.teacher(self._images_tensor(aug_images))
        pt_list, valid_list = [], []
        for i, rec in enumerate(records):
            pt_i, valid_i = invert_probabilities(out_t.probs[i].numpy(), rec)
            pt_list.append(pt_i)
            valid_list.append(valid_i)
        pt = torch.from_numpy(np.stack(pt_list).astype(np.float32))
        valid = torch.from_numpy(np.stack(valid_list))

        # pseudo-labels for unlabeled images
        pseudo_src = pt if cfg.pseudo_from_teacher else out_s.probs.detach()
        masks: list[SegMask] = []
        for i, s in enumerate(batch):
            if s.mask is not None and i < len(lab):
                masks.append(s.mask)
            else:
                labels = pseudo_src[i].argmax(dim=0).numpy()
                masks.append(SegMask(labels=labels, num_classes=cfg.num_classes,
                                     provenance="pseudo"))

        # consistency + uncertainty on the configured image subset
        sel = slice(None) if cfg.consistency_on_labeled else slice(len(lab), None)
        l_con = l_u = zero
        if cfg.use_con:
            l_con = losses_mod.consistency_loss(out_s.probs[sel], pt[sel], valid[sel])
        if cfg.use_u:
            u_s = losses_mod.pixel_uncertainty(out_s.probs[sel])
            u_t = losses_mod.pixel_uncertainty(pt[sel])
            l_u = losses_mod.uncertainty_loss(u_s, u_t)

        # student prototype bank over the whole batch, feature resolution
        small_masks = [
            SegMask(labels=_nearest_downsample(m.labels, stride),
                    num_classes=cfg.num_classes, provenance=m.provenance)
            for m in masks
        ]
        proj_s = out_s.projected.permute(0, 2, 3, 1)  # (B, h, w, D)
        l_pc = zero
        if cfg.use_pc:
            banks = [extract_prototypes(proj_s[i], signed_distance_map(small_masks[i]),
                                        max_bin=cfg.max_bin, built_from=f"step{t}")
                     for i in range(len(batch))]
            bank = merge_banks(banks, built_from=f"step{t}")
            for entry in bank.entries.values():
                entry.uncertainty = prototype_uncertainty(
                    entry.vector, self.student.prototype_classifier)
            if len(bank):
                l_pc = losses_mod.uncertainty_weighted_pc_loss(bank, cfg.tau)

        # teacher prototype update from batch class means
        with torch.no_grad():
            proj_t = out_t.projected.permute(0, 2, 3, 1)
            flat_s = proj_s.reshape(-1, cfg.proj_dim).detach()
            flat_t = proj_t.reshape(-1, cfg.proj_dim)
            flat_labels = np.concatenate([m.labels.reshape(-1) for m in small_masks])
            for c in range(cfg.num_classes):
                p1 = class_mean_feature(flat_s.unsqueeze(0), flat_labels[None, :], c)
                if p1 is None:
                    continue
                v = class_mean_feature(flat_t.unsqueeze(0), flat_labels[None, :], c)
                self.protos.update(c, p1, v, cfg.mu, cfg.gamma)

        l_aux = zero
        if cfg.use_aux and self.protos.classes():
            terms = [losses_mod.pixel_prototype_aux_loss(
                proj_s[i], small_masks[i].labels, self.protos, cfg.tau)
                for i in range(len(batch))]
            l_aux = torch.stack(terms).mean()
        return l_con, l_u, l_aux, l_pc

    # ----------------------------------------------------------------- run
    def run(self, num_steps: int, losses_csv: str | None = None,
            checkpoint_dir: str | None = None) -> list[LossBundle]:
        cfg = self.config
        bundles = []
        fh = writer = None
        if losses_csv:
            exists = os.path.exists(losses_csv) and self.step_count > 0
            fh = open(losses_csv, "a" if exists else "w", newline="")
            writer = csv.writer(fh)
            if not exists:
                writer.writerow(LOSS_CSV_HEADER)
        try:
            end = min(self.step_count + num_steps, cfg.t_max)
            while self.step_count < end:
                t = self.step_count
                bundle = self.train_step(t)
                bundles.append(bundle)
                if writer:
                    writer.writerow([t] + [repr(v) for v in bundle.as_row()]
                                    + [repr(poly_lr(cfg.lr, t, cfg.t_max, cfg.lr_decay_power))])
                if (checkpoint_dir and cfg.checkpoint_every
                        and self.step_count % cfg.checkpoint_every == 0):
                    self.save_checkpoint(checkpoint_dir)
            if checkpoint_dir:
                self.save_checkpoint(checkpoint_dir)
        finally:
            if fh:
                fh.close()
        return bundles

    # ------------------------------------------------------------ evaluate
    def evaluate(self, ids: list[str], use_teacher: bool = False) -> dict:
        """Per-class and mean metrics over a split, averaged over images
        first and classes second."""
        if not ids:
            raise ValueError("split is empty")
        model = self.teacher if use_teacher else self.student
        per_class: dict[int, dict[str, list[float]]] = {
            c: {m: [] for m in ("dice", "jaccard", "hd95", "assd")}
            for c in range(1, self.config.num_classes)
        }
        with torch.no_grad():
            for sid in ids:
                s = self.samples[sid]
                out = model(self._images_tensor([s]))
                pred = SegMask(labels=out.probs[0].argmax(dim=0).numpy(),
                               num_classes=self.config.num_classes)
                report = evaluate_masks(pred, s.mask)
                for c, row in report.per_class.items():
                    for m, v in row.items():
                        if not math.isnan(v):
                            per_class[c][m].append(v)
        result = {}
        for c, rows in per_class.items():
            result[c] = {m: (float(np.mean(v)) if v else float("nan"))
                         for m, v in rows.items()}
        result["mean"] = {
            m: float(np.mean([result[c][m] for c in per_class
                              if not math.isnan(result[c][m])]))
            if any(not math.isnan(result[c][m]) for c in per_class) else float("nan")
            for m in ("dice", "jaccard", "hd95", "assd")
        }
        return result

    # ---------------------------------------------------------- checkpoint
    def save_checkpoint(self, ckpt_dir: str) -> None:
        os.makedirs(ckpt_dir, exist_ok=True)
        manifest = {
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "step": self.step_count,
            "metric_history": self.metric_history,
        }
        with open(os.path.join(ckpt_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)
        torch.save({
            "student": self.student.state_dict(),
            "teacher": self.teacher.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "protos": self.protos.state_dict(),
            "step": self.step_count,
        }, os.path.join(ckpt_dir, "state.pt"))

    @classmethod
    def load_checkpoint(cls, ckpt_dir: str, samples: list[Sample],
                        manifest: SplitManifest,
                        config: TrainConfig | None = None) -> "Trainer":
        with open(os.path.join(ckpt_dir, "manifest.json")) as fh:
            meta = json.load(fh)
        saved_config = TrainConfig.from_dict(meta["config"])
        if config is not None and config.hash() != meta["config_hash"]:
            raise ValueError("config hash mismatch: refusing to resume")
        trainer = cls(saved_config, samples, manifest)
        state = torch.load(os.path.join(ckpt_dir, "state.pt"), weights_only=False)
        trainer.student.load_state_dict(state["student"])
        trainer.teacher.load_state_dict(state["teacher"])
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.protos.load_state_dict(state["protos"])
        trainer.step_count = int(state["step"])
        trainer.metric_history = meta.get("metric_history", [])
        return trainer


# ------------------------------------------------------------------ ablation
ABLATION_GRID = [
    {"use_con": True, "use_u": False, "use_aux": False, "use_pc": False},
    {"use_con": False, "use_u": True, "use_aux": False, "use_pc": False},
    {"use_con": True, "use_u": True, "use_aux": False, "use_pc": False},
    {"use_con": False, "use_u": False, "use_aux": True, "use_pc": True},
    {"use_con": True, "use_u": True, "use_aux": True, "use_pc": False},
    {"use_con": True, "use_u": True, "use_aux": True, "use_pc": True},
]


def run_ablation(base_config: TrainConfig, grid: list[dict], samples: list[Sample],
                 manifest: SplitManifest, seeds: list[int], num_steps: int,
                 out_csv: str | None = None) -> list[dict]:
    """Train one arm per grid row (same data, same seeds) and collect test
    metrics.  Returns one result row per arm with per-seed values plus mean
    and std of the test Dice."""
    rows = []
    for arm_idx, toggles in enumerate(grid):
        dices, jaccards = [], []
        for seed in seeds:
            cfg = TrainConfig.from_dict({**base_config.to_dict(), **toggles,
                                         "seed": seed})
            trainer = Trainer(cfg, samples, manifest)
            trainer.run(num_steps)
            metrics = trainer.evaluate(manifest.test)
            dices.append(metrics["mean"]["dice"])
            jaccards.append(metrics["mean"]["jaccard"])
        row = {"arm": arm_idx, **toggles,
               "dice_per_seed": dices, "jaccard_per_seed": jaccards,
               "dice_mean": float(np.mean(dices)), "dice_std": float(np.std(dices)),
               "jaccard_mean": float(np.mean(jaccards)),
               "jaccard_std": float(np.std(jaccards))}
        rows.append(row)
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["arm", "use_con", "use_u", "use_aux", "use_pc",
                             "dice_mean", "dice_std", "jaccard_mean", "jaccard_std",
                             "dice_per_seed", "jaccard_per_seed"])
            for row in rows:
                writer.writerow([row["arm"], row["use_con"], row["use_u"],
                                 row["use_aux"], row["use_pc"],
                                 row["dice_mean"], row["dice_std"],
                                 row["jaccard_mean"], row["jaccard_std"],
                                 ";".join(repr(v) for v in row["dice_per_seed"]),
                                 ";".join(repr(v) for v in row["jaccard_per_seed"])])
    return rows

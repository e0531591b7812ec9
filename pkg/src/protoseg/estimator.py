"""Scikit-learn style front end for the semi-supervised segmenter.

Unlabeled samples follow the sklearn semi-supervised convention: their mask
rows are filled with -1.  `fit` trains the full student-teacher pipeline in
memory; `predict` returns argmax label maps.
"""

import numpy as np
import torch
from sklearn.base import BaseEstimator

from protoseg.data import Sample, SplitManifest, normalize_image
from protoseg.geometry import SegMask
from protoseg.trainer import TrainConfig, Trainer

UNLABELED = -1


def check_images(X) -> np.ndarray:
    """Validate a (n, H, W) image stack."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 3:
        raise ValueError(f"expected (n_samples, H, W) images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image stack")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    return X


def check_masks(y, n_samples: int, shape: tuple[int, int], num_classes: int) -> np.ndarray:
    """Validate a (n, H, W) mask stack; all--1 rows mark unlabeled samples."""
    y = np.asarray(y)
    if y.shape != (n_samples,) + shape:
        raise ValueError(f"masks must have shape {(n_samples,) + shape}, got {y.shape}")
    labeled = ~(y == UNLABELED).all(axis=(1, 2))
    vals = y[labeled]
    if labeled.any() and (vals.min() < 0 or vals.max() >= num_classes):
        raise ValueError(f"labeled mask values must lie in [0, {num_classes})")
    return y.astype(np.int64)


class ProtoConsistencySegmenter(BaseEstimator):
    """Semi-supervised image segmenter with prototype contrastive
    consistency training.

    Parameters mirror the training configuration; see TrainConfig for the
    semantics.  `steps` bounds the number of optimizer steps in fit.
    """

    def __init__(self, num_classes=2, steps=500, warmup_steps=-1, lr=0.05,
                 batch_size=8, tau=0.05, lambda_aux=0.3, lambda_pc=0.1,
                 lambda_u=0.01, mu=0.99, gamma=0.999, mu_w=0.99,
                 widths=(16, 32, 64, 64, 64), use_con=True, use_u=True,
                 use_aux=True, use_pc=True, seed=0):
        self.num_classes = num_classes
        self.steps = steps
        self.warmup_steps = warmup_steps
        self.lr = lr
        self.batch_size = batch_size
        self.tau = tau
        self.lambda_aux = lambda_aux
        self.lambda_pc = lambda_pc
        self.lambda_u = lambda_u
        self.mu = mu
        self.gamma = gamma
        self.mu_w = mu_w
        self.widths = widths
        self.use_con = use_con
        self.use_u = use_u
        self.use_aux = use_aux
        self.use_pc = use_pc
        self.seed = seed

    def _config(self, image_size: int) -> TrainConfig:
        warmup = self.warmup_steps if self.warmup_steps >= 0 else max(1, self.steps // 10)
        return TrainConfig(
            num_classes=self.num_classes, image_size=image_size,
            widths=tuple(self.widths), t_max=max(self.steps, 1),
            warmup_steps=warmup, lr=self.lr, batch_size=self.batch_size,
            tau=self.tau, lambda_aux=self.lambda_aux, lambda_pc=self.lambda_pc,
            lambda_u=self.lambda_u, mu=self.mu, gamma=self.gamma, mu_w=self.mu_w,
            use_con=self.use_con, use_u=self.use_u, use_aux=self.use_aux,
            use_pc=self.use_pc, seed=self.seed)

    def fit(self, X, y):
        """Train on images X (n, H, W) and masks y (n, H, W); samples whose
        mask is entirely -1 are treated as unlabeled."""
        X = check_images(X)
        y = check_masks(y, X.shape[0], X.shape[1:], self.num_classes)
        labeled_rows = ~(y == UNLABELED).all(axis=(1, 2))
        if not labeled_rows.any():
            raise ValueError("fit requires at least one labeled sample")

        samples, labeled_ids, unlabeled_ids = [], [], []
        for i in range(X.shape[0]):
            sid = f"sample_{i:05d}"
            if labeled_rows[i]:
                mask = SegMask(labels=y[i], num_classes=self.num_classes)
                labeled_ids.append(sid)
            else:
                mask = None
                unlabeled_ids.append(sid)
            samples.append(Sample(image=normalize_image(X[i]), mask=mask, id=sid))

        frac = len(labeled_ids) / max(1, len(labeled_ids) + len(unlabeled_ids))
        manifest = SplitManifest(labeled=labeled_ids, unlabeled=unlabeled_ids,
                                 val=[], test=[], labeled_fraction=frac,
                                 seed=self.seed)
        config = self._config(image_size=X.shape[1])
        self.trainer_ = Trainer(config, samples, manifest)
        self.trainer_.run(self.steps)
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Softmax probability maps, shape (n, C, H, W)."""
        if not hasattr(self, "trainer_"):
            raise RuntimeError("estimator is not fitted")
        X = check_images(X)
        out = []
        with torch.no_grad():
            for i in range(X.shape[0]):
                img = torch.from_numpy(normalize_image(X[i])[None, None])
                out.append(self.trainer_.student(img).probs[0].numpy())
        return np.stack(out)

    def predict(self, X) -> np.ndarray:
        """Argmax label maps, shape (n, H, W)."""
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y) -> float:
        """Mean foreground Dice over the provided labeled samples."""
        from protoseg.metrics import dice_jaccard
        X = check_images(X)
        y = check_masks(y, X.shape[0], X.shape[1:], self.num_classes)
        preds = self.predict(X)
        dices = []
        for i in range(X.shape[0]):
            if (y[i] == UNLABELED).all():
                continue
            gt = SegMask(labels=y[i], num_classes=self.num_classes)
            pred = SegMask(labels=preds[i], num_classes=self.num_classes)
            for c in range(1, self.num_classes):
                dices.append(dice_jaccard(pred, gt, c)[0])
        if not dices:
            raise ValueError("score requires at least one labeled sample")
        return float(np.mean(dices))

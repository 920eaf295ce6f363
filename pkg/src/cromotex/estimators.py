"""scikit-learn style wrappers around preprocessing and the training pipeline."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .data import PairedDataset, split_by_subject
from .model import ecg_encoder_forward
from .signal import TARGET_LENGTH, preprocess
from .validation import check_binary_labels, check_ecg_batch, check_feature_matrix


class EcgPreprocessor(BaseEstimator, TransformerMixin):
    """Resample to 100 Hz, remove baseline wander, crop to 10 s, scale leads to [-1, 1]."""

    def __init__(self, sample_rate: int = 500, window_seconds: float = 0.6):
        self.sample_rate = sample_rate
        self.window_seconds = window_seconds

    def fit(self, X, y=None):
        X = check_ecg_batch(X, dtype=np.float64)
        self.n_samples_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_samples_in_")
        X = check_ecg_batch(X, dtype=np.float64)
        return preprocess(X, self.sample_rate, self.window_seconds).astype(np.float32)


class CrossModalEcgClassifier(BaseEstimator, ClassifierMixin):
    """ECG classifier trained with optional teacher alignment.

    ``fit`` takes preprocessed ECGs (N, 12, 1000), binary labels and, unless
    ``variant='direct'``, the paired second-modality features. Rows whose ECG
    is all zeros count as missing and are used for the teacher only. A
    subject-level validation split (``val_fraction``) selects the best epoch of
    each stage.
    """

    def __init__(self, config: Optional[TrainConfig] = None, variant: str = "full", val_fraction: float = 0.125,
                 random_state: int = 0):
        self.config = config
        self.variant = variant
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        from .pipeline import variant_config
        return variant_config(self.config or TrainConfig(), self.variant)

    def fit(self, X, y, modality_b=None, subject_ids=None):
        from . import pipeline as P

        cfg = self._config()
        X = check_ecg_batch(X, length=TARGET_LENGTH)
        y = check_binary_labels(y, len(X))
        if modality_b is None:
            if self.variant != "direct":
                raise ValueError(f"variant {self.variant!r} needs modality_b features")
            modality_b = np.zeros((len(X), 1), np.float32)
        feats = check_feature_matrix(modality_b, len(X))
        ids = np.arange(len(X), dtype=np.int64) if subject_ids is None else np.asarray(subject_ids, dtype=np.int64)
        if ids.shape != (len(X),):
            raise ValueError("subject_ids must have one entry per sample")
        present = np.any(X != 0, axis=(1, 2))
        data = PairedDataset(X, feats, y, ids, present)
        seed = self.random_state
        assignment = split_by_subject(ids, (1.0 - self.val_fraction, self.val_fraction, 0.0), P.stage_seed(seed, "split"))
        splits = P.DataSplits(data, assignment)
        if len(splits.val.paired()) == 0:
            raise ValueError("validation split has no ECG rows; lower val_fraction or add samples")

        self.reports_ = {}
        if self.variant == "direct":
            encoder = P.fresh_encoder(cfg, seed)
        else:
            teacher, self.reports_["teacher"] = P.train_teacher(cfg, splits, seed)
            if cfg.ablation.no_ssl:
                encoder = P.fresh_encoder(cfg, seed)
            else:
                encoder, self.reports_["pretrain"] = P.pretrain_ssl(cfg, splits, seed)
            encoder, self.reports_["align"] = P.align_crossmodal(cfg, splits, encoder, teacher, seed)
        self.params_, self.reports_["finetune"] = P.finetune(cfg, splits, encoder, seed, evaluate_test=False)
        self.config_ = cfg
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        from .pipeline import predict_proba
        check_is_fitted(self, "params_")
        X = check_ecg_batch(X, length=TARGET_LENGTH)
        p = predict_proba(self.params_, X, self.config_)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def transform(self, X) -> np.ndarray:
        """Pooled encoder embeddings (N, embed_dim)."""
        check_is_fitted(self, "params_")
        X = check_ecg_batch(X, length=TARGET_LENGTH)
        out = [ecg_encoder_forward(self.params_, X[i], self.config_.encoder, "eval")[0]
               for i in np.array_split(np.arange(len(X)), max(1, len(X) // 256))]
        return np.concatenate(out)

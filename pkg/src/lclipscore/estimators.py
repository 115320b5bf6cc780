"""scikit-learn style wrappers over the distillation, scoring and CIDEr-D code."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .distill import StageConfig, student_from_teacher, train_stage1, train_stage2
from .encoder import EncoderConfig, build_model
from .errors import ContractError
from .metric import BatchScorer
from .ngram import build_idf, cider_d


def _check_patches(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim != 3:
        raise ContractError(f"expected (n_images, n_patches, patch_dim) patches, got shape {X.shape}")
    return X


class LCLIPDistiller(TransformerMixin, BaseEstimator):
    """Two-stage distillation of a compressed student from ``teacher``.

    ``fit(X, y)`` takes patch arrays and caption token-id lists; ``transform``
    returns global image embeddings.
    """

    def __init__(self, teacher=None, vision=(6, 3, 32, 4, 64, 8), text=(4, 2, 32, 4, 64, 12), rank=8,
                 joint_dim=32, stage1_lr=5e-3, stage1_epochs=40, stage1_batch=32, stage2_lr=1e-4,
                 stage2_epochs=5, stage2_batch=4, augmentation=True, seed=0, dtype=torch.float32):
        self.teacher = teacher
        self.vision = vision
        self.text = text
        self.rank = rank
        self.joint_dim = joint_dim
        self.stage1_lr = stage1_lr
        self.stage1_epochs = stage1_epochs
        self.stage1_batch = stage1_batch
        self.stage2_lr = stage2_lr
        self.stage2_epochs = stage2_epochs
        self.stage2_batch = stage2_batch
        self.augmentation = augmentation
        self.seed = seed
        self.dtype = dtype

    def _build(self, patch_dim: int):
        if self.teacher is None:
            raise ContractError("LCLIPDistiller needs a teacher")
        vocab = self.teacher.vocab
        model = build_model(EncoderConfig(*self.vision), EncoderConfig(*self.text), vocab, self.rank,
                            self.joint_dim, self.seed, patch_dim=patch_dim, dtype=self.dtype)
        return student_from_teacher(model, self.teacher)

    def fit(self, X, y: Sequence[Sequence[int]]):
        X = _check_patches(X)
        if len(y) != len(X):
            raise ContractError(f"{len(X)} images but {len(y)} captions")
        images = torch.as_tensor(X, dtype=self.dtype)
        model = self._build(X.shape[2])
        s1 = StageConfig(1, self.stage1_lr, self.stage1_batch, self.stage1_epochs, seed=self.seed)
        s2 = StageConfig(2, self.stage2_lr, self.stage2_batch, self.stage2_epochs, freeze_text=True,
                         seed=self.seed, augmentation=self.augmentation)
        model, self.stage1_curve_ = train_stage1(model, self.teacher, images, list(y), s1)
        model, self.stage2_curve_ = train_stage2(model, self.teacher, (images, list(y)), s2)
        self.model_ = model
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _check_patches(X)
        with torch.no_grad():
            v0, _ = self.model_.encode_images(torch.as_tensor(X, dtype=self.model_.dtype))
        return v0.double().numpy()


class LCLIPScorer(BaseEstimator):
    """Scores ``{"id", "image", "candidate", "refs"?}`` records with a trained model.

    ``fit(features)`` stores the image-key to patches mapping; ``predict`` returns scores
    with NaN for records that failed.
    """

    def __init__(self, model=None, tokenizer=None, w=2.5, use_refs=False, symmetric_scaling=False):
        self.model = model
        self.tokenizer = tokenizer
        self.w = w
        self.use_refs = use_refs
        self.symmetric_scaling = symmetric_scaling

    def fit(self, features, y=None):
        if self.model is None or self.tokenizer is None:
            raise ContractError("LCLIPScorer needs a model and a tokenizer")
        self.features_ = dict(features)
        return self

    def predict(self, records) -> np.ndarray:
        check_is_fitted(self, "features_")
        scorer = BatchScorer(self.model, self.tokenizer, self.features_, self.w, self.use_refs,
                             self.symmetric_scaling)
        out = scorer.score(records)
        self.failures_ = scorer.failures
        key = "ref_l_clipscore" if self.use_refs else "l_clipscore"
        return np.array([np.nan if getattr(r, key) is None else getattr(r, key) for r in out])


class CiderD(BaseEstimator):
    """CIDEr-D with document frequencies learned by ``fit`` from reference sets."""

    def __init__(self, sigma=6.0):
        self.sigma = sigma

    def fit(self, reference_corpus, y=None):
        self.idf_ = build_idf(reference_corpus)
        return self

    def predict(self, candidates, references) -> np.ndarray:
        check_is_fitted(self, "idf_")
        if len(candidates) != len(references):
            raise ContractError("candidates and references differ in length")
        return np.array([cider_d(c, r, self.idf_, self.sigma) for c, r in zip(candidates, references)])

"""scikit-learn style wrapper around the caption model and its training stages.

``fit`` on a fresh estimator pretrains; with ``warm_start=True`` a second
``fit`` continues from the current weights (vanilla fine-tuning), and passing
``replay`` plus a fitted ``teacher`` runs K-Replay instead. ``predict``
returns greedy captions and ``score`` is corpus CIDEr-D.
"""
from __future__ import annotations

import copy
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .corpus import CaptionExample, ImageFeatures, build_vocab, detokenize, tokenize
from .evalkit import EvalPair, cider_d
from .losses import KDConfig
from .model import ModelConfig, greedy_decode_batch, init_model
from .replay import make_keyword
from .trainer import ReplayItem, TrainConfig, kreplay_finetune, pretrain, vanilla_finetune


def check_images(X, n_features: int | None = None) -> list[ImageFeatures]:
    """Coerce ``X`` to a list of region matrices with a common feature size.

    Accepts a 3-d array (n_images, n_regions, n_features), a sequence of 2-d
    arrays with varying region counts, or ``ImageFeatures`` objects.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        items = list(X)
    elif isinstance(X, (list, tuple)):
        items = list(X)
    else:
        raise ValueError("X must be a 3-d array or a sequence of (n_regions, n_features) arrays")
    if not items:
        raise ValueError("X contains no images")
    out = []
    for i, item in enumerate(items):
        if isinstance(item, ImageFeatures):
            out.append(item)
            continue
        regions = check_array(item, dtype=np.float64, ensure_all_finite=True, input_name=f"X[{i}]")
        out.append(ImageFeatures(regions, f"x{i}"))
    dims = {im.regions.shape[1] for im in out}
    if len(dims) != 1:
        raise ValueError(f"images disagree on feature size: {sorted(dims)}")
    if n_features is not None and dims != {n_features}:
        raise ValueError(f"X has {dims.pop()} features per region, expected {n_features}")
    return out


def check_captions(y, n: int) -> list[str]:
    y = list(y)
    if len(y) != n:
        raise ValueError(f"got {n} images but {len(y)} captions")
    if not all(isinstance(t, str) for t in y):
        raise ValueError("captions must be strings")
    return y


class KReplayCaptioner(BaseEstimator):
    def __init__(self, d_model=64, num_layers=2, num_heads=4, max_len=24, dropout=0.1,
                 learning_rate=3e-4, batch_size=32, replay_per_batch=8, max_steps=1000,
                 lambda_know=1.0, lambda_kd=1.0, temperature=16.0, ablation="none",
                 decode_max_len=20, warm_start=False, random_state=0):
        self.d_model = d_model
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.max_len = max_len
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.replay_per_batch = replay_per_batch
        self.max_steps = max_steps
        self.lambda_know = lambda_know
        self.lambda_kd = lambda_kd
        self.temperature = temperature
        self.ablation = ablation
        self.decode_max_len = decode_max_len
        self.warm_start = warm_start
        self.random_state = random_state

    def _train_config(self, stage: str) -> TrainConfig:
        return TrainConfig(
            stage=stage, lambda_know=self.lambda_know, kd=KDConfig(self.temperature, self.lambda_kd),
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            replay_per_batch=self.replay_per_batch if stage == "kreplay" else 0,
            max_steps=self.max_steps, seed=self.random_state, ablation=self.ablation,
        ).validate()

    def fit(self, X, y, replay=None, teacher: "KReplayCaptioner | None" = None):
        """Train on images ``X`` with captions ``y``.

        ``replay`` is an ``(images, keywords)`` pair; it requires a fitted
        ``teacher`` sharing this estimator's vocabulary and a warm start.
        """
        continuing = self.warm_start and hasattr(self, "model_")
        images = check_images(X, self.n_features_in_ if continuing else None)
        captions = check_captions(y, len(images))

        if not continuing:
            if replay is not None:
                raise ValueError("replay training needs a warm-started, already fitted estimator")
            self.vocab_ = build_vocab(captions)
            self.n_features_in_ = images[0].regions.shape[1]
            cfg = ModelConfig(vocab_size=len(self.vocab_), feature_dim=self.n_features_in_, d_model=self.d_model,
                              num_layers=self.num_layers, num_heads=self.num_heads, max_len=self.max_len,
                              dropout=self.dropout, seed=self.random_state)
            model = init_model(cfg)
        else:
            model = self.model_

        examples = [CaptionExample(im, tokenize(t, self.vocab_)) for im, t in zip(images, captions)]
        if replay is not None:
            if teacher is None:
                raise ValueError("replay training needs a fitted teacher")
            check_is_fitted(teacher, "model_")
            if teacher.vocab_.sha256() != self.vocab_.sha256():
                raise ValueError("teacher vocabulary differs from this estimator's")
            r_images, r_keywords = replay
            r_images = check_images(r_images, self.n_features_in_)
            if len(r_keywords) != len(r_images):
                raise ValueError("replay images and keywords differ in length")
            ids = {k: i for i, k in enumerate(dict.fromkeys(r_keywords))}
            items = [ReplayItem(im, make_keyword(k, self.vocab_, ids[k])) for im, k in zip(r_images, r_keywords)]
            t_model = copy.deepcopy(teacher.model_)
            t_model.stage = "vanilla_ft"
            model, record = kreplay_finetune(model, t_model, examples, items, self._train_config("kreplay"))
        elif continuing:
            model, record = vanilla_finetune(model, examples, self._train_config("vanilla_ft"))
        else:
            model, record = pretrain(model, examples, self._train_config("pretrain"))
        self.model_ = model
        self.stage_ = model.stage
        self.record_ = record
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X, self.n_features_in_)
        seqs = greedy_decode_batch(self.model_, images, self.decode_max_len)
        return np.array([detokenize(s, self.vocab_) for s in seqs], dtype=object)

    def score(self, X, y, sample_weight=None) -> float:
        """Corpus CIDEr-D of the predictions; ``y`` holds a caption or a list of captions per image."""
        preds = self.predict(X)
        refs = [[r] if isinstance(r, str) else list(r) for r in y]
        if len(refs) != len(preds):
            raise ValueError(f"got {len(preds)} images but {len(refs)} reference sets")
        return cider_d([EvalPair(p, r) for p, r in zip(preds, refs)])

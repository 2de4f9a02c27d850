"""Scikit-learn style facade over the staged pipeline.

The stages proper exchange artifacts through files, which is what the
command line exposes. This class owns a working directory and drives
the whole chain from one fit call, then keeps the trained encoder and
decoder in memory for prediction. Hyper-parameters mirror the run
config fields one to one.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from topdownseg.config import DEFAULT_BETAS, RunConfig
from topdownseg.datasets import load_manifest
from topdownseg.decoder import DecoderConfig, decode, load_decoder
from topdownseg.encoder import EncoderConfig, encode, load_weights
from topdownseg.evaluation import IGNORE_LABEL, evaluate
from topdownseg.imutil import resize_bilinear
from topdownseg.pipeline import (
    decoder_classes,
    run_paths,
    stage_cluster,
    stage_mine,
    stage_pseudo,
    stage_train,
)


class TopDownSegmenter(BaseEstimator):
    """Unsupervised segmenter with the usual fit/predict surface.

    fit takes the path to a dataset manifest, not an array; the training
    data lives on disk and the pipeline streams it image by image.
    Prediction then works on in-memory images. Artifacts land in
    ``work_dir`` when given (and can be inspected or reused by the
    command-line stages), otherwise in a temporary directory tied to the
    estimator's lifetime.
    """

    def __init__(
        self,
        k: int = 3,
        betas: tuple[float, ...] = DEFAULT_BETAS,
        t_bg: float = 0.1,
        rounds: int = 3,
        epochs: int = 20,
        lr: float = 1e-3,
        batch_size: int = 16,
        seed: int = 0,
        encoder: EncoderConfig | None = None,
        encoder_weights: str | None = None,
        decoder_layers: int = 2,
        decoder_heads: int = 2,
        work_dir: str | None = None,
    ):
        self.k = k
        self.betas = betas
        self.t_bg = t_bg
        self.rounds = rounds
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.encoder = encoder
        self.encoder_weights = encoder_weights
        self.decoder_layers = decoder_layers
        self.decoder_heads = decoder_heads
        self.work_dir = work_dir

    def _build_config(self, manifest_path: str, out: Path) -> RunConfig:
        return RunConfig(
            manifest=str(manifest_path),
            out=str(out),
            k=self.k,
            betas=tuple(self.betas),
            t_bg=self.t_bg,
            rounds=self.rounds,
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            seed=self.seed,
            encoder=self.encoder if self.encoder is not None else EncoderConfig(),
            encoder_weights=self.encoder_weights,
            decoder_layers=self.decoder_layers,
            decoder_heads=self.decoder_heads,
        )

    def fit(self, X, y=None):
        """Run mine, cluster, pseudo, and train on the manifest at X.

        X is a path to a dataset manifest; y is ignored (the method is
        unsupervised) and present for interface compatibility.
        """
        if self.work_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="topdownseg-")
            out = Path(self._tmp.name)
        else:
            out = Path(self.work_dir)
        config = self._build_config(X, out)
        stage_mine(config)
        stage_cluster(config)
        stage_pseudo(config)
        stage_train(config)

        manifest = load_manifest(config.manifest)
        k_dec = decoder_classes(config, manifest)
        decoder_config = DecoderConfig(
            k=k_dec, embed_dim=config.encoder.embed_dim,
            layers=config.decoder_layers, heads=config.decoder_heads,
            seed=config.seed)
        self.config_ = config
        self.encoder_ = load_weights(config.encoder_weights, config.encoder)
        self.decoder_ = load_decoder(run_paths(config).decoder, decoder_config)
        self.classes_ = np.arange(k_dec)
        return self

    def _as_image_list(self, X) -> tuple[list[np.ndarray], bool]:
        single = isinstance(X, np.ndarray) and X.ndim == 3
        images = [np.asarray(image, dtype=np.float64)
                  for image in ([X] if single else X)]
        for image in images:
            if image.ndim != 3 or image.shape[2] != 3:
                raise ValueError(
                    f"images must be (H, W, 3) in [0, 1], got shape {image.shape}")
        return images, single

    def _probability_maps(self, image: np.ndarray) -> np.ndarray:
        side = self.config_.encoder.image_size
        resized = np.clip(resize_bilinear(image, (side, side)), 0.0, 1.0)
        tokens = encode(self.encoder_, resized)[0].patch
        return decode(self.decoder_, tokens, image.shape[:2]).full_probs

    def predict_proba(self, X):
        """Per-pixel class probabilities, (K, H, W) per image."""
        check_is_fitted(self, "decoder_")
        images, single = self._as_image_list(X)
        maps = [self._probability_maps(image) for image in images]
        return maps[0] if single else maps

    def transform(self, X):
        """Alias of predict_proba; the natural feature map here."""
        return self.predict_proba(X)

    def predict(self, X):
        """Per-pixel cluster labels, (H, W) int64 per image."""
        check_is_fitted(self, "decoder_")
        images, single = self._as_image_list(X)
        preds = [
            np.argmax(self._probability_maps(image), axis=0) for image in images
        ]
        return preds[0] if single else preds

    def score(self, X, y):
        """Hungarian-matched mean IoU of predictions against masks in y."""
        check_is_fitted(self, "decoder_")
        images, single = self._as_image_list(X)
        gts = [np.asarray(m).astype(np.int64) for m in ([y] if single else y)]
        top = 0
        for gt in gts:
            valid = gt[gt != IGNORE_LABEL]
            if valid.size:
                top = max(top, int(valid.max()))
        preds = [
            np.argmax(self._probability_maps(image), axis=0) for image in images
        ]
        report = evaluate(preds, gts, k_pred=len(self.classes_), k_gt=top + 1)
        return report.miou

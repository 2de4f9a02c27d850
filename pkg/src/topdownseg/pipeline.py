"""Stage orchestration. Stages talk to each other through files only.

Five stages, each rerunnable in isolation: mine sweeps sliding windows
over the training images and stores one class-token feature per crop;
cluster groups those features into a concept bank; pseudo responds every
image (both splits) against the bank and fills a label bank; train runs
the bootstrapped student/teacher loop and writes decoder weights plus a
per-round report; eval scores the validation split and writes metrics.

Intermediate artifacts (crop features, concept bank, label bank) live in
the cache directory, which is the TRANSFGU_CACHE environment variable
when set and the run's out directory otherwise. Final artifacts (decoder
weights, round report, metrics, renders) always land in out. Every stage
is deterministic given its inputs: rerunning a stage rewrites its
artifacts byte for byte.
"""

from __future__ import annotations

import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from topdownseg.concepts import discover, load_bank, save_bank
from topdownseg.config import ConfigError, RunConfig
from topdownseg.cropping import binarize_attention, classify_patch, crop_resize, generate_windows
from topdownseg.datasets import (
    DatasetManifest,
    load_manifest,
    read_image,
    read_mask,
)
from topdownseg.decoder import DecoderConfig, MaskDecoder, decode, load_decoder, save_decoder
from topdownseg.encoder import VisionEncoder, encode, load_weights
from topdownseg.evaluation import (
    EvalReport,
    evaluate,
    load_remap_table,
    remap_labels,
)
from topdownseg.archive import load_archive, save_archive
from topdownseg.imutil import resize_bilinear
from topdownseg.pseudolabels import LabelBank, synthesize_pseudo_label
from topdownseg.training import METRICS_HEADER, run_bootstrap
from topdownseg.viz import render_record

CACHE_ENV = "TRANSFGU_CACHE"

# Crop roles as stored in the feature archive. Archives hold floats
# only, so the role strings travel as small integer codes.
CROP_CODES = {"fg": 0.0, "bg": 1.0, "neutral": 2.0, "any": 3.0}


class MissingArtifactError(Exception):
    """A stage input is absent; the message names the stage that makes it."""


@dataclass(frozen=True)
class RunPaths:
    """Artifact locations for one run."""

    out: Path
    cache: Path

    @property
    def crops(self) -> Path:
        return self.cache / "crops.tfgu"

    @property
    def concepts(self) -> Path:
        return self.cache / "concepts.tfgu"

    @property
    def bank_dir(self) -> Path:
        return self.cache / "bank"

    @property
    def decoder(self) -> Path:
        return self.out / "decoder.tfgu"

    @property
    def rounds(self) -> Path:
        return self.out / "rounds.tsv"

    @property
    def metrics(self) -> Path:
        return self.out / "metrics.txt"

    @property
    def viz_dir(self) -> Path:
        return self.out / "viz"

    def ensure(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        self.cache.mkdir(parents=True, exist_ok=True)


def run_paths(config: RunConfig) -> RunPaths:
    out = Path(config.out)
    cache_env = os.environ.get(CACHE_ENV)
    cache = Path(cache_env) if cache_env else out
    return RunPaths(out=out, cache=cache)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(
            f"missing artifact {path}; run the {stage} stage first")
    return path


def _manifest(config: RunConfig) -> DatasetManifest:
    manifest = load_manifest(config.manifest)
    if config.k_fg is not None and manifest.protocol != "things_and_stuff":
        raise ConfigError(
            "k_fg/k_bg apply to the things_and_stuff protocol only; "
            f"the manifest declares {manifest.protocol!r}")
    return manifest


def decoder_classes(config: RunConfig, manifest: DatasetManifest) -> int:
    """Output channels of the mask head.

    Under things_only the discovered concepts cover foreground objects
    and class 0 is a dedicated background channel, so the head needs one
    class more than there are concepts. The other protocols treat every
    concept as a first-class region.
    """
    return config.k + 1 if manifest.protocol == "things_only" else config.k


def _remap(manifest: DatasetManifest) -> dict[int, int] | None:
    if manifest.remap is None:
        return None
    return load_remap_table(manifest.resolve(manifest.remap))


def gt_classes(manifest: DatasetManifest) -> int:
    """Ground-truth label count after any remap.

    A remap table defines the evaluated class space outright. Without
    one, the manifest's k counts foreground classes under things_only
    (value 0 is background, so the space is one larger) and all classes
    under the other protocols.
    """
    table = _remap(manifest)
    if table is not None:
        return max(table.values()) + 1
    return manifest.k + 1 if manifest.protocol == "things_only" else manifest.k


def _encoder_input(image: np.ndarray, side: int) -> np.ndarray:
    return np.clip(resize_bilinear(image, (side, side)), 0.0, 1.0)


def stage_mine(config: RunConfig) -> Path:
    """Sweep crops over the training split and store one feature per crop.

    Output archive: "features" (N, d) class-token vectors and "roles"
    (N,) codes per CROP_CODES. Under no_fg_bg every crop is "any"; the
    other protocols rate each window against the binarized class
    attention of its source image.
    """
    paths = run_paths(config)
    paths.ensure()
    manifest = _manifest(config)
    entries = manifest.split_entries("train")
    if not entries:
        raise ConfigError(f"{config.manifest}: no train images to mine")
    model = load_weights(config.encoder_weights, config.encoder)
    side = config.encoder.image_size
    skip_roles = manifest.protocol == "no_fg_bg"

    features: list[np.ndarray] = []
    roles: list[float] = []
    for entry in entries:
        image = read_image(manifest.resolve(entry.image_path))
        windows = generate_windows(image.shape[:2], config.betas)
        if not windows:
            continue
        if skip_roles:
            prior_full = None
        else:
            bundle = encode(model, _encoder_input(image, side))[0]
            prior_full = binarize_attention(bundle.cls_attention).at_resolution(
                image.shape[:2])
        # Bilinear output can creep past 1.0 by a rounding step; the
        # encoder's range check is strict.
        crops = np.clip(np.stack(
            [crop_resize(image, rect, target_side=side) for rect in windows]),
            0.0, 1.0)
        for rect, crop_bundle in zip(windows, encode(model, crops)):
            role = "any" if skip_roles else classify_patch(rect, prior_full)
            features.append(np.asarray(crop_bundle.cls, dtype=np.float32))
            roles.append(CROP_CODES[role])
    if not features:
        raise ConfigError("no crops generated; every beta window was skipped")
    save_archive(paths.crops, {
        "features": np.stack(features),
        "roles": np.asarray(roles, dtype=np.float32),
    })
    return paths.crops


def stage_cluster(config: RunConfig) -> Path:
    """Group mined crop features into the concept bank."""
    paths = run_paths(config)
    paths.ensure()
    manifest = _manifest(config)
    store = load_archive(_require(paths.crops, "mine"))
    features = np.asarray(store["features"], dtype=np.float64)
    codes = np.asarray(store["roles"], dtype=np.float64)
    if features.ndim != 2 or codes.shape != (features.shape[0],):
        raise ConfigError(f"{paths.crops}: malformed crop store")
    empty = features[:0]
    try:
        if manifest.protocol == "things_only":
            bank = discover(features[codes == CROP_CODES["fg"]], empty,
                            k_fg=config.k, k_bg=0, seed=config.seed)
        elif manifest.protocol == "things_and_stuff":
            fg = features[codes == CROP_CODES["fg"]]
            bg = features[codes == CROP_CODES["bg"]]
            if config.k_fg is not None:
                bank = discover(fg, bg, k_fg=config.k_fg, k_bg=config.k_bg,
                                seed=config.seed)
            else:
                bank = discover(fg, bg, k=config.k, seed=config.seed)
        else:
            bank = discover(features[codes == CROP_CODES["any"]], empty,
                            k_fg=config.k, k_bg=0, seed=config.seed,
                            fg_role="any")
    except ValueError as err:
        raise ConfigError(f"concept discovery failed: {err}") from None
    save_bank(bank, paths.concepts)
    return paths.concepts


def stage_pseudo(config: RunConfig) -> Path:
    """Fill the label bank with one record per image, both splits.

    The validation split is banked too: the training stage scores the
    raw pseudo labels as its baseline row, and the viz stage renders
    records for either split. The bank directory is wiped first so a
    rerun produces an identical tree.
    """
    paths = run_paths(config)
    paths.ensure()
    manifest = _manifest(config)
    if not manifest.entries:
        raise ConfigError(f"{config.manifest}: manifest has no images")
    concept_bank = load_bank(_require(paths.concepts, "cluster"))
    model = load_weights(config.encoder_weights, config.encoder)
    fg_only = manifest.protocol == "things_only"
    if paths.bank_dir.exists():
        shutil.rmtree(paths.bank_dir)
    bank = LabelBank(paths.bank_dir)
    for entry in manifest.entries:
        image = read_image(manifest.resolve(entry.image_path))
        record = synthesize_pseudo_label(
            model, concept_bank, image, entry.image_path,
            fg_only=fg_only, t_bg=config.t_bg)
        bank.put(record)
    return paths.bank_dir


def _scored_entries(manifest: DatasetManifest):
    entries = [e for e in manifest.split_entries("val") if e.mask_path]
    table = _remap(manifest)
    pairs = []
    for entry in entries:
        gt = read_mask(manifest.resolve(entry.mask_path))
        if table is not None:
            gt = remap_labels(gt, table)
        pairs.append((entry, gt.astype(np.int64)))
    return pairs


def _predictor(
    config: RunConfig, model: VisionEncoder, decoder: MaskDecoder,
) -> Callable[[np.ndarray], np.ndarray]:
    side = config.encoder.image_size

    def predict(image: np.ndarray) -> np.ndarray:
        tokens = encode(model, _encoder_input(image, side))[0].patch
        maps = decode(decoder, tokens, image.shape[:2])
        return np.argmax(maps.full_probs, axis=0)

    return predict


def stage_train(config: RunConfig) -> tuple[Path, Path]:
    """Run the bootstrap loop; write decoder weights and the round report."""
    paths = run_paths(config)
    paths.ensure()
    manifest = _manifest(config)
    _require(paths.bank_dir / LabelBank.INDEX_NAME, "pseudo")
    bank = LabelBank(paths.bank_dir)
    model = load_weights(config.encoder_weights, config.encoder)
    entries = manifest.split_entries("train")
    if not entries:
        raise ConfigError(f"{config.manifest}: no train images")
    images = [
        (e.image_path, read_image(manifest.resolve(e.image_path)))
        for e in entries
    ]
    missing = [ident for ident, _ in images if ident not in bank]
    if missing:
        raise MissingArtifactError(
            f"label bank has no record for {missing[0]!r}; rerun the pseudo stage")

    k_dec = decoder_classes(config, manifest)
    decoder_config = DecoderConfig(
        k=k_dec, embed_dim=config.encoder.embed_dim,
        layers=config.decoder_layers, heads=config.decoder_heads,
        seed=config.seed)

    metrics_fn = _make_metrics_fn(config, manifest, bank, model, k_dec)
    student, rows = run_bootstrap(
        model, bank, images, decoder_config,
        rounds=config.rounds, epochs=config.epochs, lr=config.lr,
        batch_size=config.batch_size, weights=config.loss, seed=config.seed,
        metrics_fn=metrics_fn)
    save_decoder(student, paths.decoder)
    lines = [METRICS_HEADER] + [row.line() for row in rows]
    paths.rounds.write_text("".join(line + "\n" for line in lines), "utf-8")
    return paths.decoder, paths.rounds


def _make_metrics_fn(
    config: RunConfig,
    manifest: DatasetManifest,
    bank: LabelBank,
    model: VisionEncoder,
    k_dec: int,
) -> Callable[[MaskDecoder | None], tuple[float, float]] | None:
    """Validation scorer for the round report; None when nothing to score.

    A None decoder scores the raw pseudo labels straight from the bank,
    which fills the report's baseline row.
    """
    scored = _scored_entries(manifest)
    if not scored:
        return None
    k_gt = gt_classes(manifest)
    val_images = [
        (e.image_path, read_image(manifest.resolve(e.image_path)))
        for e, _ in scored
    ]
    gts = [gt for _, gt in scored]
    held_out = [ident for ident, _ in val_images if ident not in bank]
    if held_out:
        raise MissingArtifactError(
            f"label bank has no record for {held_out[0]!r}; rerun the pseudo stage")

    def score(decoder: MaskDecoder | None) -> tuple[float, float]:
        if decoder is None:
            preds = [
                bank.get(ident).label.astype(np.int64)
                for ident, _ in val_images
            ]
        else:
            predict = _predictor(config, model, decoder)
            preds = [predict(image) for _, image in val_images]
        report = evaluate(preds, gts, k_pred=k_dec, k_gt=k_gt)
        return report.miou, report.pixel_acc

    return score


def stage_eval(config: RunConfig, pred_dir: str | Path | None = None) -> EvalReport:
    """Score the validation split and write metrics.txt.

    With pred_dir, predictions are read from <pred_dir>/<image stem>.png
    instead of running the decoder; that scores externally produced
    masks (or sanity-checks the metric against the ground truth itself).
    """
    paths = run_paths(config)
    paths.ensure()
    manifest = _manifest(config)
    scored = _scored_entries(manifest)
    if not scored:
        raise ConfigError(f"{config.manifest}: no validation masks to score")
    k_gt = gt_classes(manifest)

    preds: list[np.ndarray] = []
    if pred_dir is not None:
        pred_dir = Path(pred_dir)
        for entry, _ in scored:
            mask_path = pred_dir / (Path(entry.image_path).stem + ".png")
            if not mask_path.exists():
                raise MissingArtifactError(f"missing prediction mask {mask_path}")
            preds.append(read_mask(mask_path).astype(np.int64))
        k_pred = max(int(p.max(initial=0)) for p in preds) + 1
    else:
        k_pred = decoder_classes(config, manifest)
        decoder_config = DecoderConfig(
            k=k_pred, embed_dim=config.encoder.embed_dim,
            layers=config.decoder_layers, heads=config.decoder_heads,
            seed=config.seed)
        decoder = load_decoder(_require(paths.decoder, "train"), decoder_config)
        model = load_weights(config.encoder_weights, config.encoder)
        predict = _predictor(config, model, decoder)
        for entry, _ in scored:
            preds.append(predict(read_image(manifest.resolve(entry.image_path))))

    report = evaluate(preds, [gt for _, gt in scored], k_pred=k_pred, k_gt=k_gt)
    paths.metrics.write_text(report.to_text(), "utf-8")
    return report


def _slug(image_id: str) -> str:
    stem = image_id.rsplit(".", 1)[0] if "." in image_id else image_id
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in stem)


def stage_viz(
    config: RunConfig,
    image_ids: Sequence[str] | None = None,
    limit: int = 4,
) -> list[Path]:
    """Render bank records to PNGs under out/viz.

    Without explicit ids the first ``limit`` bank entries (sorted by id)
    are rendered. Each record yields the source image, the colorized
    label, one heat raster per concept channel, and a joined panel.
    """
    paths = run_paths(config)
    paths.ensure()
    manifest = _manifest(config)
    _require(paths.bank_dir / LabelBank.INDEX_NAME, "pseudo")
    bank = LabelBank(paths.bank_dir)
    if image_ids:
        ids = list(image_ids)
    else:
        if limit < 1:
            raise ConfigError(f"limit must be positive, got {limit}")
        ids = bank.ids()[:limit]
    written: list[Path] = []
    for ident in ids:
        try:
            record = bank.get(ident)
        except KeyError:
            raise ConfigError(f"image id {ident!r} is not in the label bank") from None
        image = read_image(manifest.resolve(ident))
        written.extend(render_record(image, record, paths.viz_dir, _slug(ident)))
    return written


def run_all(config: RunConfig, skip_eval: bool = False) -> EvalReport | None:
    """Run mine, cluster, pseudo, and train in order, then eval.

    skip_eval covers manifests whose validation split has no masks.
    """
    stage_mine(config)
    stage_cluster(config)
    stage_pseudo(config)
    stage_train(config)
    if skip_eval:
        return None
    return stage_eval(config)

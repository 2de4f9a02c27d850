"""Teacher-student bootstrapping over mined pseudo labels.

Each round trains a freshly re-initialized mask head ("student") on
pseudo labels that mix the stored response maps with the predictions of
the previous round's trained head ("teacher"). The mix happens on the
continuous [0, 1] maps, per channel, before any argmax, so the teacher
can flip a pixel only where the mined evidence is weak. Round one has
no teacher yet and a uniform predictor would shift every channel by the
same constant, so the mix degenerates to the raw response argmax.

Supervision is computed at the student's token grid rather than at full
image resolution: the labels are nearest-equivalent under integer
upsampling, so the cross entropy is the same number either way and the
round avoids materializing per-pixel maps.
"""

from __future__ import annotations

from copy import deepcopy
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch

from topdownseg.augment import apply_to_image, apply_to_responses, sample_augmentation
from topdownseg.decoder import DecoderConfig, MaskDecoder, class_embeddings, decode
from topdownseg.encoder import VisionEncoder, encode
from topdownseg.imutil import resize_bilinear, resize_nearest
from topdownseg.losses import (
    LossWeights,
    loss_diversity,
    loss_peer,
    loss_uncertainty,
    shuffle_labels,
    total_loss,
)
from topdownseg.pseudolabels import IGNORE_LABEL, LabelBank, PseudoLabel


class TrainingDivergence(RuntimeError):
    """A loss stopped being finite; the message names the failing step."""


def bootstrap_labels(
    responses: np.ndarray,
    teacher_probs: np.ndarray | None = None,
    out_hw: tuple[int, int] | None = None,
) -> np.ndarray:
    """Argmax of the per-channel average of responses and teacher output.

    Both stacks are (K, h, w) in [0, 1]. teacher_probs=None stands for
    the uniform teacher of the first round, whose constant channels
    cannot change the argmax, so the average is skipped entirely. Ties
    go to the lowest class index. out_hw, when given, nearest-upsamples
    the label grid to image size.
    """
    arr = np.asarray(responses, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"responses must be (K, h, w), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("responses contain non-finite values")
    if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
        raise ValueError("responses must be normalized to [0, 1]")
    if teacher_probs is not None:
        probs = np.asarray(teacher_probs, dtype=np.float64)
        if probs.shape != arr.shape:
            raise ValueError(
                f"teacher grid {probs.shape} does not match responses {arr.shape}")
        if not np.isfinite(probs).all():
            raise ValueError("teacher probabilities contain non-finite values")
        if probs.min() < -1e-6 or probs.max() > 1.0 + 1e-6:
            raise ValueError("teacher probabilities must lie in [0, 1]")
        arr = 0.5 * (arr + probs)
    dtype = np.uint8 if arr.shape[0] - 1 < IGNORE_LABEL else np.uint16
    label = arr.argmax(axis=0).astype(dtype)
    if out_hw is not None:
        label = resize_nearest(label, out_hw)
    return label


def stacked_responses(record: PseudoLabel) -> np.ndarray:
    """Response channels of a bank record, background first when present.

    The result's channel order matches the mask head's class order, so
    channel c supervises head class c directly.
    """
    if record.bg is None:
        return np.asarray(record.responses, dtype=np.float64)
    return np.concatenate(
        [np.asarray(record.bg, dtype=np.float64)[None],
         np.asarray(record.responses, dtype=np.float64)])


@dataclass
class BootstrapState:
    """One round's actors. The teacher is read-only for the round."""

    round_index: int
    teacher: MaskDecoder | None
    student: MaskDecoder
    bank: LabelBank
    seed: int = 0

    def __post_init__(self):
        if self.round_index < 1:
            raise ValueError("round_index starts at 1")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    peer: float
    diversity: float
    uncertainty: float
    total: float


METRICS_HEADER = "round\tmiou\tpixel_acc\tpeer\tdiversity\tuncertainty\ttotal"


@dataclass(frozen=True)
class RoundMetrics:
    """One line of the per-round report; None renders as '-'."""

    round_label: str
    miou: float | None
    pixel_acc: float | None
    peer: float | None = None
    diversity: float | None = None
    uncertainty: float | None = None
    total: float | None = None

    def line(self) -> str:
        cells = [self.round_label]
        for value in (self.miou, self.pixel_acc, self.peer, self.diversity,
                      self.uncertainty, self.total):
            cells.append("-" if value is None else f"{value:.6f}")
        return "\t".join(cells)


def _teacher_targets(
    state: BootstrapState,
    encoder_model: VisionEncoder,
    images: Sequence[tuple[str, np.ndarray]],
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pair every image with its continuous supervision stack.

    The teacher is applied to the whole image once per round; its patch
    probabilities live on the same token grid as the stored responses,
    which is checked rather than assumed.
    """
    side = encoder_model.config.image_size
    k = state.student.config.k
    pairs = []
    for image_id, image in images:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"image {image_id!r} must be (H, W, 3), got {arr.shape}")
        stack = stacked_responses(state.bank.get(image_id))
        if stack.shape[0] != k:
            raise ValueError(
                f"bank record {image_id!r} has {stack.shape[0]} channels, "
                f"student head expects {k}")
        if state.teacher is not None:
            resized = np.clip(resize_bilinear(arr, (side, side)), 0.0, 1.0)
            tokens = encode(encoder_model, resized[None])[0].patch
            if tokens.shape[:2] != stack.shape[1:]:
                raise ValueError(
                    f"bank grid {stack.shape[1:]} does not match "
                    f"token grid {tokens.shape[:2]}")
            probs = decode(state.teacher, tokens, (side, side)).patch_probs
            stack = 0.5 * (stack + probs)
        pairs.append((arr, stack))
    return pairs


def train_round(
    state: BootstrapState,
    encoder_model: VisionEncoder,
    images: Sequence[tuple[str, np.ndarray]],
    *,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 16,
    weights: LossWeights = LossWeights(),
) -> list[EpochStats]:
    """Fit the student on augmented crops of the bootstrapped labels.

    Mutates state.student in place and returns per-epoch mean losses.
    Randomness (sample order, crop boxes, photometric jitter, label
    shuffles) comes from one stream seeded by (seed, round, epoch), so
    a rerun reproduces the loss curve bit for bit.
    """
    if not images:
        raise ValueError("need at least one training image")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if state.teacher is not None:
        state.teacher.eval()
        for p in state.teacher.parameters():
            p.requires_grad_(False)

    side = encoder_model.config.image_size
    grid = encoder_model.config.grid_size
    k = state.student.config.k
    pairs = _teacher_targets(state, encoder_model, images)
    optimizer = torch.optim.Adam(state.student.parameters(), lr=lr)
    history: list[EpochStats] = []
    for epoch in range(epochs):
        rng = np.random.default_rng([state.seed, state.round_index, epoch])
        alpha = weights.alpha_at(epoch, epochs)
        epoch_weights = replace(weights, alpha=alpha)
        order = rng.permutation(len(pairs))
        sums = np.zeros(4)
        seen = 0
        for step, start in enumerate(range(0, len(pairs), batch_size)):
            crops, labels = [], []
            for idx in order[start:start + batch_size]:
                image, stack = pairs[idx]
                aug = sample_augmentation(rng, image.shape[:2])
                crops.append(apply_to_image(image, aug, (side, side)))
                aligned = apply_to_responses(
                    stack, aug, image.shape[:2], (grid, grid))
                labels.append(aligned.argmax(axis=0))
            shuffle_seed = int(rng.integers(2 ** 63 - 1))
            bundles = encode(encoder_model, np.stack(crops))
            tokens = torch.from_numpy(
                np.stack([b.patch.reshape(grid * grid, -1) for b in bundles])
            ).to(state.student.dtype)
            target = torch.from_numpy(np.stack(labels)).long()
            shuffled = shuffle_labels(target, k, seed=shuffle_seed)

            state.student.train()
            probs = state.student(tokens)
            maps = probs.permute(0, 2, 1).reshape(-1, k, grid, grid)
            embeddings = class_embeddings(state.student)
            loss = total_loss(maps, target, shuffled, embeddings, epoch_weights)
            if not torch.isfinite(loss):
                raise TrainingDivergence(
                    f"non-finite loss at round {state.round_index}, "
                    f"epoch {epoch}, step {step}")
            # log the parts before the step so they describe the same
            # parameters the total was computed from
            with torch.no_grad():
                parts = (
                    float(loss_peer(maps, target, shuffled, alpha)),
                    float(loss_diversity(embeddings)),
                    float(loss_uncertainty(maps)),
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            n = len(crops)
            sums += n * np.asarray([*parts, float(loss.detach())])
            seen += n
        means = sums / seen
        history.append(EpochStats(epoch, *means))
    return history


def _frozen_copy(model: MaskDecoder) -> MaskDecoder:
    twin = MaskDecoder(model.config, dtype=model.dtype)
    twin.load_state_dict(deepcopy(model.state_dict()))
    twin.eval()
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


def run_bootstrap(
    encoder_model: VisionEncoder,
    bank: LabelBank,
    images: Sequence[tuple[str, np.ndarray]],
    decoder_config: DecoderConfig,
    *,
    rounds: int = 3,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 16,
    weights: LossWeights = LossWeights(),
    seed: int = 0,
    metrics_fn: Callable[[MaskDecoder | None], tuple[float, float]] | None = None,
) -> tuple[MaskDecoder, list[RoundMetrics]]:
    """Multi-round loop: train, promote student to teacher, reset, repeat.

    Every round restarts the student from the same seeded initial
    parameters; only the supervision improves between rounds. metrics_fn
    scores a head on held-out data (None means score the raw pseudo
    labels) and fills the mIoU/accuracy columns of the report; the loss
    columns hold the final epoch's means.
    """
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    student = MaskDecoder(decoder_config)
    initial = deepcopy(student.state_dict())
    rows: list[RoundMetrics] = []
    scored = metrics_fn(None) if metrics_fn is not None else (None, None)
    rows.append(RoundMetrics("initial", scored[0], scored[1]))
    teacher: MaskDecoder | None = None
    for round_index in range(1, rounds + 1):
        student.load_state_dict(initial)
        state = BootstrapState(round_index, teacher, student, bank, seed)
        history = train_round(
            state, encoder_model, images,
            epochs=epochs, lr=lr, batch_size=batch_size, weights=weights)
        scored = metrics_fn(student) if metrics_fn is not None else (None, None)
        last = history[-1] if history else None
        rows.append(RoundMetrics(
            str(round_index), scored[0], scored[1],
            peer=None if last is None else last.peer,
            diversity=None if last is None else last.diversity,
            uncertainty=None if last is None else last.uncertainty,
            total=None if last is None else last.total))
        teacher = _frozen_copy(student)
    return student, rows

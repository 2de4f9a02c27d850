"""Run configuration: one YAML file holds every pipeline knob.

Paths, the seed, and stage selection arrive as command-line flags;
everything that changes the numbers lives here so a run can be audited
from its config file alone. Unknown keys are rejected rather than
ignored, which turns typos into errors instead of silently running with
defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from topdownseg.encoder import EncoderConfig
from topdownseg.losses import LossWeights

DEFAULT_BETAS = (0.5, 0.4, 0.3, 0.2)


class ConfigError(Exception):
    """A config file that cannot be used; the message names the field."""


@dataclass(frozen=True)
class RunConfig:
    manifest: str
    out: str
    k: int
    k_fg: int | None = None
    k_bg: int | None = None
    betas: tuple[float, ...] = DEFAULT_BETAS
    t_bg: float = 0.1
    rounds: int = 3
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    encoder_weights: str | None = None
    decoder_layers: int = 2
    decoder_heads: int = 2
    loss: LossWeights = LossWeights()

    def __post_init__(self):
        if not self.manifest:
            raise ConfigError("manifest path is required")
        if not self.out:
            raise ConfigError("out directory is required")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if (self.k_fg is None) != (self.k_bg is None):
            raise ConfigError("give both k_fg and k_bg, or neither")
        if self.k_fg is not None:
            if self.k_fg < 0 or self.k_bg < 0:
                raise ConfigError("k_fg and k_bg must be non-negative")
            if self.k_fg + self.k_bg != self.k:
                raise ConfigError(
                    f"k_fg + k_bg = {self.k_fg + self.k_bg} does not equal k = {self.k}")
        if not self.betas:
            raise ConfigError("betas must not be empty")
        for beta in self.betas:
            if not 0.0 < beta <= 1.0:
                raise ConfigError(f"betas must lie in (0, 1], got {beta}")
        if not 0.0 <= self.t_bg <= 1.0:
            raise ConfigError(f"t_bg must lie in [0, 1], got {self.t_bg}")
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.decoder_layers < 1 or self.decoder_heads < 1:
            raise ConfigError("decoder layers and heads must be positive")


def _require_mapping(node, origin: str) -> dict:
    if node is None:
        return {}
    if not isinstance(node, dict):
        raise ConfigError(f"{origin} must be a mapping")
    return dict(node)


def _reject_unknown(mapping: dict, allowed: set[str], origin: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown {origin} keys: {', '.join(unknown)}")


def _pull(mapping: dict, key: str, kind, origin: str, optional: bool = False):
    """Typed lookup. bool is not accepted where a number is expected."""
    if key not in mapping or mapping[key] is None:
        if optional:
            return None
        raise ConfigError(f"{origin}: missing required key {key!r}")
    value = mapping[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        kinds = kind if isinstance(kind, tuple) else (kind,)
        names = "/".join(k.__name__ for k in kinds)
        raise ConfigError(f"{origin}: {key} must be {names}, got {value!r}")
    return value


_TOP_KEYS = {
    "manifest", "out", "k", "k_fg", "k_bg", "betas", "t_bg", "rounds",
    "epochs", "lr", "batch_size", "seed", "encoder", "encoder_weights",
    "decoder", "loss",
}
_ENCODER_KEYS = {"image_size", "patch_size", "depth", "embed_dim",
                 "attn_dim", "heads", "mlp_ratio", "seed"}
_DECODER_KEYS = {"layers", "heads"}
_LOSS_KEYS = {"omega1", "omega2", "alpha_start", "alpha_end"}


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a YAML run config."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text("utf-8"))
    except yaml.YAMLError as err:
        raise ConfigError(f"{path.name}: invalid YAML: {err}") from None
    top = _require_mapping(raw, path.name)
    _reject_unknown(top, _TOP_KEYS, "config")

    encoder_map = _require_mapping(top.get("encoder"), "encoder")
    _reject_unknown(encoder_map, _ENCODER_KEYS, "encoder")
    weights_path = top.get("encoder_weights")
    if weights_path is not None and not isinstance(weights_path, str):
        raise ConfigError("encoder_weights must be a path string")
    try:
        encoder = EncoderConfig(**encoder_map)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"encoder: {err}") from None

    decoder_map = _require_mapping(top.get("decoder"), "decoder")
    _reject_unknown(decoder_map, _DECODER_KEYS, "decoder")

    loss_map = _require_mapping(top.get("loss"), "loss")
    _reject_unknown(loss_map, _LOSS_KEYS, "loss")
    loss_kwargs = {
        key: float(_pull(loss_map, key, (int, float), "loss"))
        for key in _LOSS_KEYS if key in loss_map
    }
    if "alpha_start" in loss_kwargs:
        loss_kwargs["alpha"] = loss_kwargs["alpha_start"]
    try:
        loss = LossWeights(**loss_kwargs)
    except ValueError as err:
        raise ConfigError(f"loss: {err}") from None

    betas_node = top.get("betas", list(DEFAULT_BETAS))
    if not isinstance(betas_node, (list, tuple)):
        raise ConfigError("betas must be a list of numbers")
    betas = []
    for value in betas_node:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"betas entries must be numbers, got {value!r}")
        betas.append(float(value))

    kwargs = dict(
        manifest=_pull(top, "manifest", str, "config"),
        out=_pull(top, "out", str, "config"),
        k=_pull(top, "k", int, "config"),
        k_fg=_pull(top, "k_fg", int, "config", optional=True),
        k_bg=_pull(top, "k_bg", int, "config", optional=True),
        betas=tuple(betas),
        encoder=encoder,
        encoder_weights=weights_path,
        loss=loss,
    )
    for key, kind in (("t_bg", (int, float)), ("rounds", int), ("epochs", int),
                      ("lr", (int, float)), ("batch_size", int), ("seed", int)):
        if key in top:
            value = _pull(top, key, kind, "config")
            kwargs[key] = float(value) if kind == (int, float) else value
    if "layers" in decoder_map:
        kwargs["decoder_layers"] = _pull(decoder_map, "layers", int, "decoder")
    if "heads" in decoder_map:
        kwargs["decoder_heads"] = _pull(decoder_map, "heads", int, "decoder")
    return RunConfig(**kwargs)


def override(config: RunConfig, seed: int | None = None,
             out: str | None = None) -> RunConfig:
    """Apply command-line overrides on top of a loaded config."""
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["out"] = out
    return replace(config, **updates) if updates else config

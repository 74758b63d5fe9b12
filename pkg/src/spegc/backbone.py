"""Patch-MLP segmentation backbone, source pretraining, and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tape as T
from .numerics import NonFiniteError
from .rng import Rng
from .stream import N_CLASSES, SOURCE, StreamSample, foreground_dice, generate_stream
from .tape import Value

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
# fixed input standardisation for [0, 1] intensities
INPUT_CENTER, INPUT_SCALE = 0.5, 0.25
PARAM_NAMES = ("enc_w", "enc_b", "feat_w", "feat_b", "head_w", "head_b")


class CheckpointError(ValueError):
    pass


@dataclass
class BackboneConfig:
    patch: int = 5
    hidden: int = 32
    feature_dim: int = 16
    n_classes: int = N_CLASSES
    dropout: float = 0.1

    def __post_init__(self):
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError("patch size must be a positive odd integer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")


def extract_patches(image: np.ndarray, patch: int = 5) -> np.ndarray:
    """Reflect-padded ``patch x patch`` neighbourhoods, one row per pixel (row-major)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < patch:
        raise ValueError(f"image of shape {image.shape} smaller than patch {patch}")
    r = patch // 2
    padded = np.pad(image, r, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch))
    flat = win.reshape(image.shape[0] * image.shape[1], patch * patch)
    return (flat - INPUT_CENTER) / INPUT_SCALE


class Backbone:
    """linear -> ReLU -> dropout -> linear (features) -> linear head -> softmax, per pixel."""

    def __init__(self, config: BackboneConfig | None = None, params: dict[str, Value] | None = None):
        self.config = config or BackboneConfig()
        self.params: dict[str, Value] = params or {}

    @classmethod
    def init(cls, config: BackboneConfig, rng: Rng) -> "Backbone":
        c = config
        d_in = c.patch * c.patch
        shapes = {
            "enc_w": (d_in, c.hidden), "enc_b": (1, c.hidden),
            "feat_w": (c.hidden, c.feature_dim), "feat_b": (1, c.feature_dim),
            "head_w": (c.feature_dim, c.n_classes), "head_b": (1, c.n_classes),
        }
        params = {}
        for name, shape in shapes.items():
            if name.endswith("_b"):
                params[name] = T.param(np.zeros(shape), name)
            else:
                std = math.sqrt(2.0 / shape[0])
                params[name] = T.param(rng.child("init", PARAM_NAMES.index(name)).normal(0.0, std, shape), name)
        return cls(config, params)

    def _check(self):
        if set(self.params) != set(PARAM_NAMES):
            raise RuntimeError("backbone is not initialised")

    def dropout_mask(self, n_rows: int, rng: Rng) -> np.ndarray:
        rate = self.config.dropout
        keep = rng.random((n_rows, self.config.hidden)) >= rate
        return keep / (1.0 - rate)

    # untaped path over whole images ---------------------------------------------
    def forward(self, image: np.ndarray, dropout_active: bool = False, rng: Rng | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
        """Feature map ``H x W x feature_dim`` and class probabilities ``H x W x C``."""
        self._check()
        H, W = np.asarray(image).shape
        feats, probs = self.forward_patches(extract_patches(image, self.config.patch),
                                            dropout_active, rng)
        return feats.reshape(H, W, -1), probs.reshape(H, W, -1)

    def forward_patches(self, patches: np.ndarray, dropout_active: bool = False,
                        rng: Rng | None = None) -> tuple[np.ndarray, np.ndarray]:
        p = {k: v.data for k, v in self.params.items()}
        hid = np.maximum(patches @ p["enc_w"] + p["enc_b"], 0.0)
        if dropout_active and self.config.dropout > 0:
            if rng is None:
                raise ValueError("dropout needs an rng")
            hid = hid * self.dropout_mask(hid.shape[0], rng)
        feats = hid @ p["feat_w"] + p["feat_b"]
        logits = feats @ p["head_w"] + p["head_b"]
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return feats, z / z.sum(axis=1, keepdims=True)

    def predict(self, image: np.ndarray) -> np.ndarray:
        return self.forward(image)[1].argmax(axis=2)

    # taped path ------------------------------------------------------------------
    def features(self, patches, dropout_mask: np.ndarray | None = None) -> Value:
        self._check()
        p = self.params
        hid = T.relu(T.lift(patches) @ p["enc_w"] + p["enc_b"])
        if dropout_mask is not None:
            hid = hid * dropout_mask
        return hid @ p["feat_w"] + p["feat_b"]

    def logits(self, feats: Value) -> Value:
        return feats @ self.params["head_w"] + self.params["head_b"]

    def head(self, feats: Value) -> Value:
        return T.softmax(self.logits(feats), axis=1)

    # state -------------------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def copy(self) -> "Backbone":
        return Backbone(self.config, {k: T.param(v.data, k) for k, v in self.params.items()})


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 8
    n_images: int = 64
    size: int = 48
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)


@dataclass
class PretrainResult:
    model: Backbone
    initial_loss: float
    final_loss: float
    loss_history: list[float]
    source_dice: dict[str, float]


def cross_entropy(model: Backbone, patches: np.ndarray, labels: np.ndarray,
                  dropout_mask: np.ndarray | None = None) -> Value:
    logp = T.log_softmax(model.logits(model.features(patches, dropout_mask)), axis=1)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return T.scale(T.sum_(logp * onehot), -1.0 / labels.size)


def _source_loss(model: Backbone, patches: np.ndarray, labels: np.ndarray) -> float:
    feats, probs = model.forward_patches(patches)
    return float(-np.mean(np.log(np.maximum(probs[np.arange(labels.size), labels], 1e-300))))


def pretrain(model: Backbone, samples: Sequence[StreamSample], epochs: int = 30,
             lr: float = 0.001, momentum: float = 0.9, batch_size: int = 8,
             rng: Rng | None = None) -> PretrainResult:
    """Mini-batch SGD with momentum on per-pixel cross-entropy over labelled source images."""
    if not samples:
        raise ValueError("no source samples")
    rng = rng or Rng(0)
    patch = model.config.patch
    X = [extract_patches(s.image, patch) for s in samples]
    Y = [s.mask.ravel() for s in samples]
    all_X, all_Y = np.vstack(X), np.concatenate(Y)
    initial = _source_loss(model, all_X, all_Y)
    history = [initial]
    velocity = {k: np.zeros_like(v.data) for k, v in model.params.items()}
    for epoch in range(epochs):
        order = rng.child("epoch", epoch).permutation(len(samples))
        for b, start in enumerate(range(0, len(samples), batch_size)):
            idx = order[start:start + batch_size]
            xb = np.vstack([X[i] for i in idx])
            yb = np.concatenate([Y[i] for i in idx])
            mask = model.dropout_mask(xb.shape[0], rng.child("dropout", epoch, b)) \
                if model.config.dropout > 0 else None
            loss = cross_entropy(model, xb, yb, mask)
            if not math.isfinite(loss.item()):
                raise NonFiniteError("pretrain", f"loss diverged at epoch {epoch}, batch {b}")
            grads = T.backward(loss, model.params)
            for k, p in model.params.items():
                velocity[k] = momentum * velocity[k] + grads[k]
                p.data -= lr * velocity[k]
        history.append(_source_loss(model, all_X, all_Y))
        log.info("pretrain epoch %d loss %.5f", epoch, history[-1])
    dice = {"disc": 0.0, "cup": 0.0}
    for s in samples:
        for key, v in foreground_dice(model.predict(s.image), s.mask).items():
            dice[key] += v / len(samples)
    return PretrainResult(model, initial, history[-1], history, dice)


def pretrain_source(cfg: PretrainConfig | None = None) -> PretrainResult:
    """Initialise a backbone and train it on a freshly generated clean source set."""
    cfg = cfg or PretrainConfig()
    if cfg.epochs < 0 or cfg.n_images < 1 or cfg.batch_size < 1:
        raise ValueError("epochs must be >= 0, n_images and batch_size >= 1")
    samples = generate_stream(cfg.seed, [SOURCE], cfg.n_images, size=cfg.size, purpose="source")
    model = Backbone.init(cfg.backbone, Rng(cfg.seed).child("backbone"))
    return pretrain(model, samples, cfg.epochs, cfg.lr, cfg.momentum, cfg.batch_size,
                    Rng(cfg.seed).child("pretrain"))


# checkpoints -------------------------------------------------------------------------

def checkpoint_payload(model: Backbone, config: dict, extra: dict | None = None) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config,
        "backbone": asdict(model.config),
        "weights": {k: model.params[k].data.tolist() for k in PARAM_NAMES},
        **(extra or {}),
    }


def save_checkpoint(path: str | Path, model: Backbone, config: dict, extra: dict | None = None) -> None:
    text = json.dumps(checkpoint_payload(model, config, extra), sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[Backbone, dict]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format_version {version!r}, expected {CHECKPOINT_FORMAT_VERSION}")
    config = BackboneConfig(**payload["backbone"])
    weights = payload["weights"]
    if set(weights) != set(PARAM_NAMES):
        raise CheckpointError(f"{path}: weight names {sorted(weights)} do not match")
    params = {k: T.param(np.asarray(weights[k], dtype=np.float64), k) for k in PARAM_NAMES}
    return Backbone(config, params), payload

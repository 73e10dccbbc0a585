"""Frozen synthetic encoders and the learnable prompt state.

The image encoder is replaced by class-conditional Gaussian features around
unit anchors. The text encoder pools prompt tokens by their mean, projects
them with a fixed matrix and adds the pooled vector to a per-class text
anchor. Every feature handed to the losses is unit length, so cosine
similarity is a plain dot product.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODES = ("general", "class_aware", "integrated")


@dataclass(frozen=True)
class EncoderSpec:
    embed_dim: int
    num_classes: int
    feature_noise: float = 0.3
    seed: int = 0
    # None draws text anchors independently of image anchors; a number
    # draws them as unit(img_anchor + text_noise * g / sqrt(d)) instead
    text_noise: float | None = None

    def __post_init__(self) -> None:
        if self.embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be non-negative")
        if self.text_noise is not None and self.text_noise < 0:
            raise ValueError("text_noise must be non-negative")

    @property
    def token_dim(self) -> int:
        return self.embed_dim


@dataclass(frozen=True)
class FrozenEncoders:
    img_anchors: np.ndarray  # (C, d)
    txt_anchors: np.ndarray  # (C, d)
    text_projection: np.ndarray  # (d_tok, d)
    feature_noise: float = 0.0

    @property
    def num_classes(self) -> int:
        return self.img_anchors.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.img_anchors.shape[1]


@dataclass
class PromptState:
    general: np.ndarray  # (M, d_tok)
    class_aware: np.ndarray  # (C, T, d_tok)
    align_map: np.ndarray  # (d, d)

    def copy(self) -> "PromptState":
        return PromptState(self.general.copy(), self.class_aware.copy(), self.align_map.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.general.ravel(), self.class_aware.ravel(), self.align_map.ravel()])

    def assign_flat(self, vec: np.ndarray) -> None:
        a = self.general.size
        b = a + self.class_aware.size
        self.general[...] = vec[:a].reshape(self.general.shape)
        self.class_aware[...] = vec[a:b].reshape(self.class_aware.shape)
        self.align_map[...] = vec[b:].reshape(self.align_map.shape)

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.general))
            and np.all(np.isfinite(self.class_aware))
            and np.all(np.isfinite(self.align_map))
        )

    def save(self, path) -> Path:
        """Write a checkpoint as ``.npz`` (one row-major ``.npy`` per block)."""
        path = Path(path)
        with path.open("wb") as fh:
            np.savez(fh, general=self.general, class_aware=self.class_aware, align_map=self.align_map)
        return path

    @classmethod
    def load(cls, path) -> "PromptState":
        with np.load(Path(path)) as data:
            return cls(data["general"].copy(), data["class_aware"].copy(), data["align_map"].copy())


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def init_encoders(spec: EncoderSpec) -> FrozenEncoders:
    rng = np.random.default_rng(spec.seed)
    c, d = spec.num_classes, spec.embed_dim
    img = _unit_rows(rng.standard_normal((c, d)))
    txt_raw = rng.standard_normal((c, d))
    if spec.text_noise is None:
        txt = _unit_rows(txt_raw)
    else:
        txt = _unit_rows(img + spec.text_noise * txt_raw / np.sqrt(d))
    proj = rng.standard_normal((spec.token_dim, d)) / np.sqrt(spec.token_dim)
    return FrozenEncoders(img, txt, proj, spec.feature_noise)


def init_prompts(
    spec: EncoderSpec, num_general: int, num_class_tokens: int, init_scale: float, seed: int
) -> PromptState:
    if num_general < 1 or num_class_tokens < 1:
        raise ValueError("prompt lengths must be >= 1")
    rng = np.random.default_rng(seed)
    d_tok, d = spec.token_dim, spec.embed_dim
    general = init_scale * rng.standard_normal((num_general, d_tok))
    class_aware = init_scale * rng.standard_normal((spec.num_classes, num_class_tokens, d_tok))
    return PromptState(general, class_aware, np.zeros((d, d)))


def _check_class(enc: FrozenEncoders, class_id: int) -> None:
    if not 0 <= int(class_id) < enc.num_classes:
        raise ValueError(f"class id {class_id} outside [0, {enc.num_classes})")


def sample_features(
    enc: FrozenEncoders, labels, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Draw one unit feature per label: unit(img_anchor[y] + sigma * g)."""
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= enc.num_classes):
        raise ValueError("labels outside the class range")
    noise = rng.standard_normal((labels.size, enc.embed_dim))
    return _unit_rows(enc.img_anchors[labels] + sigma * noise)


def sample_feature(enc: FrozenEncoders, class_id: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    _check_class(enc, class_id)
    return sample_features(enc, [class_id], sigma, rng)[0]


def pooled_tokens(state: PromptState, mode: str) -> np.ndarray:
    """Mean-pooled prompt tokens per class for ``mode``; shape (C, d_tok)."""
    p_g = state.general.mean(axis=0)
    if mode == "general":
        return np.broadcast_to(p_g, (state.class_aware.shape[0], p_g.size))
    q = state.class_aware.mean(axis=1)
    if mode == "class_aware":
        return q
    if mode == "integrated":
        m, t = state.general.shape[0], state.class_aware.shape[1]
        return (m * p_g + t * q) / (m + t)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def text_features(enc: FrozenEncoders, state: PromptState, mode: str) -> np.ndarray:
    """Unit text features for every class; shape (C, d)."""
    return _unit_rows(pooled_tokens(state, mode) @ enc.text_projection + enc.txt_anchors)


def text_feature(enc: FrozenEncoders, state: PromptState, class_id: int, mode: str) -> np.ndarray:
    _check_class(enc, class_id)
    return text_features(enc, state, mode)[int(class_id)]


def visual_shift(state: PromptState) -> np.ndarray:
    return state.align_map @ state.general.mean(axis=0)


def visual_prompted(enc: FrozenEncoders, state: PromptState, z: np.ndarray) -> np.ndarray:
    """Shift image features by the mapped general prompt and renormalize.

    Works on a single vector or on a batch of row vectors.
    """
    return _unit_rows(np.asarray(z, dtype=np.float64) + visual_shift(state))

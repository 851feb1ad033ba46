"""Coupled prompt state: a single trainable pool of audio prompt rows plus
two linear maps that derive the text prefix and postfix prompts from it.

One parameter set steers both encoders: the maps are differentiable, so
text-side losses reach the audio prompts, and the prompt counts on the
text side equal the audio count by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .autodiff import ARRAY_OPS, ShapeError

PROMPT_INIT_STD = 0.02

PROMPT_PARAM_NAMES = ("audio", "s_pre_w", "s_pre_b", "s_post_w", "s_post_b")


@dataclass
class PromptSet:
    """Trainable prompt state; derived text prompts are never cached."""

    audio: np.ndarray        # n_pre x d
    s_pre_w: np.ndarray      # d x d
    s_pre_b: np.ndarray      # 1 x d
    s_post_w: np.ndarray
    s_post_b: np.ndarray
    inject_layer: int = 1

    def __post_init__(self):
        if self.audio.shape[0] < 1:
            raise ValueError("at least one prompt row is required")
        d = self.audio.shape[1]
        for name in ("s_pre_w", "s_post_w"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(
                    f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        for name in PROMPT_PARAM_NAMES:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            setattr(self, name, arr)

    @property
    def n_prompts(self) -> int:
        return self.audio.shape[0]

    @property
    def dim(self) -> int:
        return self.audio.shape[1]

    def named_params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PROMPT_PARAM_NAMES}

    def set_param(self, name: str, value: np.ndarray) -> None:
        if value.shape != getattr(self, name).shape:
            raise ShapeError(
                f"update for prompt {name!r} has shape {value.shape}, "
                f"expected {getattr(self, name).shape}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        value.setflags(write=False)
        setattr(self, name, value)

    def derive_text_prompts(self) -> tuple[np.ndarray, np.ndarray]:
        """Current text prompts, recomputed from the live audio prompts."""
        return generate_text_prompts(
            ARRAY_OPS, self.audio, self.s_pre_w, self.s_pre_b,
            self.s_post_w, self.s_post_b)

    def copy(self) -> "PromptSet":
        return PromptSet(self.audio, self.s_pre_w, self.s_pre_b,
                         self.s_post_w, self.s_post_b, self.inject_layer)


def init_prompt_set(n_prompts: int, dim: int, seed: int,
                    inject_layer: int = 1) -> PromptSet:
    """Fresh prompt state: small random rows, identity maps, zero biases,
    so the text prompts start as exact copies of the audio prompts."""
    rng = np.random.default_rng(seed)
    return PromptSet(
        audio=rng.normal(0.0, PROMPT_INIT_STD, (n_prompts, dim)),
        s_pre_w=np.eye(dim),
        s_pre_b=np.zeros((1, dim)),
        s_post_w=np.eye(dim),
        s_post_b=np.zeros((1, dim)),
        inject_layer=inject_layer,
    )


def generate_text_prompts(ops, audio_prompts, s_pre_w, s_pre_b, s_post_w, s_post_b):
    """Map the audio prompt rows through the two linear couplings."""
    av = ops.raw(audio_prompts)
    if ops.raw(s_pre_w).shape[0] != av.shape[1]:
        raise ShapeError(
            f"prompt dim {av.shape[1]} does not match map "
            f"{ops.raw(s_pre_w).shape}")
    t_pre = ops.add(ops.matmul(audio_prompts, s_pre_w), s_pre_b)
    t_post = ops.add(ops.matmul(audio_prompts, s_post_w), s_post_b)
    return t_pre, t_post


@dataclass
class LayerStack:
    """Per-layer inputs of one audio forward pass, for explicit injection."""

    inputs: list
    injected_at: Optional[int] = None


def inject_audio_prompts(stack: LayerStack, prompts: Optional[np.ndarray],
                         inject_layer: int) -> LayerStack:
    """Prepend prompt rows to exactly one layer's input.

    A second injection into the same stack is rejected: the policy is one
    prompt block at one layer.
    """
    if stack.injected_at is not None:
        raise ValueError(
            f"prompts were already injected at layer {stack.injected_at}")
    if not (1 <= inject_layer <= len(stack.inputs)):
        raise ValueError(
            f"inject_layer {inject_layer} outside 1..{len(stack.inputs)}")
    if prompts is None or prompts.shape[0] == 0:
        return LayerStack(list(stack.inputs), None)
    target = stack.inputs[inject_layer - 1]
    if prompts.shape[1] != target.shape[1]:
        raise ShapeError(
            f"prompt width {prompts.shape[1]} != layer width {target.shape[1]}")
    augmented = list(stack.inputs)
    augmented[inject_layer - 1] = np.concatenate([prompts, target], axis=0)
    return LayerStack(augmented, inject_layer)


# ---------------------------------------------------------------------------
# Trainable partitions.
# ---------------------------------------------------------------------------

@dataclass
class TrainablePartition:
    """Qualified parameter names -> shapes for the strategy's trainables."""

    entries: dict[str, tuple[int, int]] = field(default_factory=dict)

    def add(self, name: str, shape: tuple[int, int]) -> None:
        if name in self.entries:
            raise ValueError(f"duplicate partition entry {name!r}")
        self.entries[name] = tuple(shape)

    def names(self) -> list[str]:
        return list(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self.entries


def count_trainable(partition: TrainablePartition) -> int:
    """Exact number of scalar trainable entries in the partition."""
    return sum(r * c for r, c in partition.entries.values())


def prompt_partition_entries(prompt_set: PromptSet) -> dict[str, tuple[int, int]]:
    return {f"prompt.{name}": getattr(prompt_set, name).shape
            for name in PROMPT_PARAM_NAMES}

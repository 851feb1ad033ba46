"""The competing training strategies, each one a declaration of what is
trainable plus how the two encoders are assembled for a forward pass.

All strategies share the same frozen-by-default dual encoders, losses and
protocol; they differ only in their trainable partition, their structural
edits (prompts, low-rank residuals), whether distillation is active, and
how the protocol schedules them (sequential, joint, or per-dataset).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .encoders import EncoderConfig, EncoderState, audio_config, text_config
from .prompts import (
    PROMPT_PARAM_NAMES,
    PromptSet,
    TrainablePartition,
    generate_text_prompts,
    init_prompt_set,
)
from . import encoders

STRATEGY_TAGS = ("ptat", "finetune_sequential", "finetune_joint",
                 "prompt_shallow", "prompt_deep", "text_prompt_only",
                 "low_rank", "upper_bound")

PROMPT_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Geometry of the full dual-encoder model plus prompt/adapter knobs."""

    audio: EncoderConfig = field(default_factory=audio_config)
    text: EncoderConfig = field(default_factory=text_config)
    n_prompts: int = 12
    inject_layer: int = 1
    low_rank: int = 4

    def __post_init__(self):
        if self.n_prompts < 1:
            raise ValueError(f"n_prompts must be >= 1, got {self.n_prompts}")
        if not (1 <= self.inject_layer <= self.audio.num_layers):
            raise ValueError(
                f"inject_layer {self.inject_layer} outside "
                f"1..{self.audio.num_layers}")
        if not (1 <= self.low_rank <= self.audio.embed_dim):
            raise ValueError(
                f"low_rank {self.low_rank} outside 1..{self.audio.embed_dim}")
        if self.audio.shared_dim != self.text.shared_dim:
            raise ValueError("encoders must project into the same shared space")

    def to_json(self, strategy_tag: str) -> str:
        payload = {"audio": asdict(self.audio), "text": asdict(self.text),
                   "n_prompts": self.n_prompts, "inject_layer": self.inject_layer,
                   "low_rank": self.low_rank, "strategy": strategy_tag}
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> tuple["ModelConfig", str]:
        payload = json.loads(text)
        cfg = cls(audio=EncoderConfig(**payload["audio"]),
                  text=EncoderConfig(**payload["text"]),
                  n_prompts=payload["n_prompts"],
                  inject_layer=payload["inject_layer"],
                  low_rank=payload["low_rank"])
        return cfg, payload["strategy"]


def desk_model_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def _namespaced(params: Mapping, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass(frozen=True)
class Strategy:
    """Immutable descriptor: partition builder + forward assembly."""

    tag: str
    distillation: bool
    protocol: str  # sequential | joint | per_dataset
    init_extras: Callable[[ModelConfig, int], dict[str, np.ndarray]]
    extra_trainables: Callable[[ModelConfig], dict[str, tuple[int, int]]]
    encode: Callable  # (ops, params, cfg, patches, onehots, batch) -> (E_a, E_t)
    train_backbone: bool = False
    train_heads: bool = True

    def partition(self, cfg: ModelConfig,
                  named_params: Mapping[str, np.ndarray]) -> TrainablePartition:
        part = TrainablePartition()
        for name, shape in self.extra_trainables(cfg).items():
            part.add(name, shape)
        if self.train_backbone:
            for name, arr in named_params.items():
                if name.startswith(("audio.", "text.")):
                    part.add(name, arr.shape)
        elif self.train_heads:
            for name in ("audio.head_w", "audio.head_b",
                         "text.head_w", "text.head_b"):
                part.add(name, named_params[name].shape)
        return part


# ---------------------------------------------------------------------------
# Forward assemblies.
# ---------------------------------------------------------------------------

def _encode_plain(ops, params, cfg: ModelConfig, patches, onehots, batch):
    e_a = encoders.encode_audio_batch(
        ops, _namespaced(params, "audio."), patches, cfg.audio, batch,
        reserved=cfg.n_prompts)
    e_t = encoders.encode_text_batch(
        ops, _namespaced(params, "text."), onehots, cfg.text, batch,
        reserved=cfg.n_prompts)
    return e_a, e_t


def _encode_ptat(ops, params, cfg: ModelConfig, patches, onehots, batch):
    prompts = params["prompt.audio"]
    t_pre, t_post = generate_text_prompts(
        ops, prompts, params["prompt.s_pre_w"], params["prompt.s_pre_b"],
        params["prompt.s_post_w"], params["prompt.s_post_b"])
    e_a = encoders.encode_audio_batch(
        ops, _namespaced(params, "audio."), patches, cfg.audio, batch,
        prompts=prompts, inject_layer=cfg.inject_layer,
        reserved=cfg.n_prompts)
    e_t = encoders.encode_text_batch(
        ops, _namespaced(params, "text."), onehots, cfg.text, batch,
        t_pre=t_pre, t_post=t_post, reserved=cfg.n_prompts)
    return e_a, e_t


def _encode_prompt_shallow(ops, params, cfg: ModelConfig, patches, onehots, batch):
    e_a = encoders.encode_audio_batch(
        ops, _namespaced(params, "audio."), patches, cfg.audio, batch,
        prompts=params["vpt.audio"], inject_layer=1, reserved=cfg.n_prompts)
    e_t = encoders.encode_text_batch(
        ops, _namespaced(params, "text."), onehots, cfg.text, batch,
        reserved=cfg.n_prompts)
    return e_a, e_t


def _encode_prompt_deep(ops, params, cfg: ModelConfig, patches, onehots, batch):
    deep = [params[f"vpt.layer{i}"] for i in range(cfg.audio.num_layers)]
    e_a = encoders.encode_audio_batch(
        ops, _namespaced(params, "audio."), patches, cfg.audio, batch,
        deep_prompts=deep, reserved=cfg.n_prompts)
    e_t = encoders.encode_text_batch(
        ops, _namespaced(params, "text."), onehots, cfg.text, batch,
        reserved=cfg.n_prompts)
    return e_a, e_t


def _encode_text_prompt_only(ops, params, cfg: ModelConfig, patches, onehots, batch):
    e_a = encoders.encode_audio_batch(
        ops, _namespaced(params, "audio."), patches, cfg.audio, batch,
        reserved=cfg.n_prompts)
    e_t = encoders.encode_text_batch(
        ops, _namespaced(params, "text."), onehots, cfg.text, batch,
        t_pre=params["tpo.t_pre"], reserved=cfg.n_prompts)
    return e_a, e_t


def _encode_low_rank(ops, params, cfg: ModelConfig, patches, onehots, batch):
    e_a = encoders.encode_audio_batch(
        ops, _namespaced(params, "audio."), patches, cfg.audio, batch,
        adapters=_namespaced(params, "lora."), reserved=cfg.n_prompts)
    e_t = encoders.encode_text_batch(
        ops, _namespaced(params, "text."), onehots, cfg.text, batch,
        reserved=cfg.n_prompts)
    return e_a, e_t


# ---------------------------------------------------------------------------
# Extra-parameter initializers and partitions.
# ---------------------------------------------------------------------------

def _no_extras(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    return {}


def _no_extra_trainables(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    return {}


def _ptat_extras(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    ps = init_prompt_set(cfg.n_prompts, cfg.audio.embed_dim, seed,
                         cfg.inject_layer)
    return {f"prompt.{name}": getattr(ps, name) for name in PROMPT_PARAM_NAMES}


def _ptat_trainables(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    d = cfg.audio.embed_dim
    return {"prompt.audio": (cfg.n_prompts, d),
            "prompt.s_pre_w": (d, d), "prompt.s_pre_b": (1, d),
            "prompt.s_post_w": (d, d), "prompt.s_post_b": (1, d)}


def _vpt_shallow_extras(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng((seed, 0x5A))
    return {"vpt.audio": rng.normal(
        0.0, PROMPT_INIT_STD, (cfg.n_prompts, cfg.audio.embed_dim))}


def _vpt_shallow_trainables(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    return {"vpt.audio": (cfg.n_prompts, cfg.audio.embed_dim)}


def _vpt_deep_extras(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng((seed, 0x5B))
    return {f"vpt.layer{i}": rng.normal(
        0.0, PROMPT_INIT_STD, (cfg.n_prompts, cfg.audio.embed_dim))
        for i in range(cfg.audio.num_layers)}


def _vpt_deep_trainables(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    return {f"vpt.layer{i}": (cfg.n_prompts, cfg.audio.embed_dim)
            for i in range(cfg.audio.num_layers)}


def _tpo_extras(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng((seed, 0x5C))
    return {"tpo.t_pre": rng.normal(
        0.0, PROMPT_INIT_STD, (cfg.n_prompts, cfg.text.embed_dim))}


def _tpo_trainables(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    return {"tpo.t_pre": (cfg.n_prompts, cfg.text.embed_dim)}


def _lora_extras(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    # down is random, up starts at zero: the adapted forward is bit-equal
    # to the frozen model until the first update
    rng = np.random.default_rng((seed, 0x10A))
    d, r = cfg.audio.embed_dim, cfg.low_rank
    out = {}
    for i in range(cfg.audio.num_layers):
        for w in ("wq", "wv"):
            out[f"lora.blk{i}.attn_{w}.down"] = rng.normal(0.0, d ** -0.5, (d, r))
            out[f"lora.blk{i}.attn_{w}.up"] = np.zeros((r, d))
    return out


def _lora_trainables(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    d, r = cfg.audio.embed_dim, cfg.low_rank
    out = {}
    for i in range(cfg.audio.num_layers):
        for w in ("wq", "wv"):
            out[f"lora.blk{i}.attn_{w}.down"] = (d, r)
            out[f"lora.blk{i}.attn_{w}.up"] = (r, d)
    return out


_REGISTRY: dict[str, Strategy] = {
    "ptat": Strategy(
        tag="ptat", distillation=True, protocol="sequential",
        init_extras=_ptat_extras, extra_trainables=_ptat_trainables,
        encode=_encode_ptat),
    "finetune_sequential": Strategy(
        tag="finetune_sequential", distillation=False, protocol="sequential",
        init_extras=_no_extras, extra_trainables=_no_extra_trainables,
        encode=_encode_plain, train_backbone=True),
    "finetune_joint": Strategy(
        tag="finetune_joint", distillation=False, protocol="joint",
        init_extras=_no_extras, extra_trainables=_no_extra_trainables,
        encode=_encode_plain, train_backbone=True),
    "prompt_shallow": Strategy(
        tag="prompt_shallow", distillation=False, protocol="sequential",
        init_extras=_vpt_shallow_extras, extra_trainables=_vpt_shallow_trainables,
        encode=_encode_prompt_shallow),
    "prompt_deep": Strategy(
        tag="prompt_deep", distillation=False, protocol="sequential",
        init_extras=_vpt_deep_extras, extra_trainables=_vpt_deep_trainables,
        encode=_encode_prompt_deep),
    "text_prompt_only": Strategy(
        tag="text_prompt_only", distillation=False, protocol="sequential",
        init_extras=_tpo_extras, extra_trainables=_tpo_trainables,
        encode=_encode_text_prompt_only),
    "low_rank": Strategy(
        tag="low_rank", distillation=False, protocol="sequential",
        init_extras=_lora_extras, extra_trainables=_lora_trainables,
        encode=_encode_low_rank),
    "upper_bound": Strategy(
        tag="upper_bound", distillation=False, protocol="per_dataset",
        init_extras=_no_extras, extra_trainables=_no_extra_trainables,
        encode=_encode_plain, train_backbone=True),
}


def build_strategy(tag: str) -> Strategy:
    """Look up a strategy descriptor by its tag."""
    if tag not in _REGISTRY:
        raise ValueError(
            f"unknown strategy {tag!r}; valid tags: {', '.join(STRATEGY_TAGS)}")
    return _REGISTRY[tag]


def apply_low_rank(state: EncoderState, rank: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Attach low-rank residual factors to every attention layer's query and
    value projections of an audio encoder; base weights stay frozen."""
    cfg = state.config
    if not cfg.is_audio:
        raise ValueError("low-rank edits target the audio encoder only")
    if not (1 <= rank <= cfg.embed_dim):
        raise ValueError(f"rank {rank} outside 1..{cfg.embed_dim}")
    rng = np.random.default_rng((seed, 0x10A))
    adapters = {}
    for i in range(cfg.num_layers):
        for w in ("wq", "wv"):
            adapters[f"blk{i}.attn_{w}.down"] = rng.normal(
                0.0, cfg.embed_dim ** -0.5, (cfg.embed_dim, rank))
            adapters[f"blk{i}.attn_{w}.up"] = np.zeros((rank, cfg.embed_dim))
    return adapters

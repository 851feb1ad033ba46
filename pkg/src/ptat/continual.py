"""The incremental protocol: per-step training against the previous
step's frozen snapshot, snapshot persistence, and sequence scheduling for
every strategy.

The previous step's model never enters a gradient graph: its outputs are
computed once per step over the training split through the plain-array
forward path and cached, which keeps teachers cheap and detachment
structural.  Training runs in float64; snapshots store float32, and every
evaluation goes through a snapshot so that metrics are reproducible from
files alone.

Snapshot file layout (little-endian): magic ``PTATSNAP``, version u32,
config-hash (32 bytes, SHA-256 of the canonical model-config JSON),
tensor count u32, then per tensor name length u16 + name bytes + rows u32
+ cols u32 + row-major float32 data, and a trailing CRC32 of everything
between the magic and the checksum.  Model metadata rides along as two
reserved tensors (``meta.config_json`` as ASCII codes, ``meta.step``).
"""

from __future__ import annotations

import hashlib
import os
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import encoders
from .autodiff import ARRAY_OPS, GRAPH_OPS, NonFiniteError
from .data import DomainSpec, PairedDataset, SequenceSpec, generate_domain, heldout_domain_spec
from .evaluation import MetricsHistory, RetrievalScores, scores_from_embeddings
from .losses import (
    BatchEmbeddings,
    LossWeights,
    SimilarityPair,
    TeacherOutputs,
    similarity_matrices,
    total_loss,
)
from .prompts import TrainablePartition, count_trainable
from .strategies import ModelConfig, Strategy, build_strategy, desk_model_config

SNAPSHOT_MAGIC = b"PTATSNAP"
SNAPSHOT_VERSION = 1

EVAL_CHUNK = 256


class SnapshotFormatError(ValueError):
    """Not a snapshot file at all."""


class SnapshotVersionError(ValueError):
    """Snapshot format version unsupported by this reader."""


class SnapshotTruncatedError(ValueError):
    """Snapshot ends before its declared content."""


class SnapshotChecksumError(ValueError):
    """Payload bytes fail the trailing CRC32."""


class SnapshotHashMismatchError(ValueError):
    """Config hash disagrees with the expected model configuration."""


class TeacherMismatchError(ValueError):
    """Teacher snapshot does not match the student's configuration."""


class TrainingDivergedError(ArithmeticError):
    """Loss went non-finite; coordinates are in the message."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    use_feature_distillation: bool = True
    use_similarity_distillation: bool = True
    # the pretraining surrogate that stands in for large-scale pretrained
    # towers: a short full-parameter warm-up on a held-out domain
    pretrain_epochs: int = 8
    pretrain_lr: float = 2e-3

    def __post_init__(self):
        for name in ("learning_rate", "weight_decay", "epochs", "batch_size",
                     "pretrain_epochs", "pretrain_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (contrastive loss)")


# ---------------------------------------------------------------------------
# Model state.
# ---------------------------------------------------------------------------

@dataclass
class ModelState:
    """Everything one strategy trains: encoder states, strategy extras,
    the trainable partition, and the number of completed steps."""

    strategy: Strategy
    config: ModelConfig
    audio: encoders.EncoderState
    text: encoders.EncoderState
    extras: dict[str, np.ndarray]
    partition: TrainablePartition
    step: int = 0

    def named_params(self) -> dict[str, np.ndarray]:
        out = {f"audio.{k}": v for k, v in self.audio.params.items()}
        out.update({f"text.{k}": v for k, v in self.text.params.items()})
        out.update(self.extras)
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        if name not in self.partition:
            raise ValueError(f"parameter {name!r} is outside the trainable partition")
        if name.startswith("audio."):
            self.audio.set_param(name[6:], value)
        elif name.startswith("text."):
            self.text.set_param(name[5:], value)
        else:
            if name not in self.extras:
                raise KeyError(f"unknown extra parameter {name!r}")
            value = np.ascontiguousarray(value, dtype=np.float64)
            value.setflags(write=False)
            self.extras[name] = value

    def config_json(self) -> str:
        return self.config.to_json(self.strategy.tag)

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.config_json().encode()).digest()


def init_model_state(strategy: Strategy, model_cfg: ModelConfig,
                     backbone: tuple[encoders.EncoderState, encoders.EncoderState],
                     seed: int) -> ModelState:
    audio = backbone[0].copy()
    text = backbone[1].copy()
    extras = {k: _readonly(v) for k, v in strategy.init_extras(model_cfg, seed).items()}
    named = {f"audio.{k}": v for k, v in audio.params.items()}
    named.update({f"text.{k}": v for k, v in text.params.items()})
    named.update(extras)
    partition = strategy.partition(model_cfg, named)
    for k in audio.params:
        audio.frozen[k] = f"audio.{k}" not in partition
    for k in text.params:
        text.frozen[k] = f"text.{k}" not in partition
    return ModelState(strategy, model_cfg, audio, text, extras, partition)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Optimizer: gradient descent with first/second-moment averaging and
# decoupled weight decay.
# ---------------------------------------------------------------------------

class MomentOptimizer:
    def __init__(self, names, learning_rate: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = self.v[name]
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            out[name] = p - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)) \
                - self.lr * self.wd * p
        return out


# ---------------------------------------------------------------------------
# Snapshots.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable float32 picture of a model after one completed step."""

    tensors: dict[str, np.ndarray]  # float32, read-only
    config_json: str
    step: int

    @property
    def config_hash(self) -> bytes:
        return hashlib.sha256(self.config_json.encode()).digest()


def snapshot_from_state(state: ModelState) -> ModelSnapshot:
    tensors = {}
    for name, arr in state.named_params().items():
        f32 = arr.astype(np.float32)
        f32.setflags(write=False)
        tensors[name] = f32
    return ModelSnapshot(tensors, state.config_json(), state.step)


class SnapshotModel:
    """A frozen model rebuilt from a snapshot; used for evaluation and as
    the distillation teacher."""

    def __init__(self, snapshot: ModelSnapshot):
        self.snapshot = snapshot
        self.config, tag = ModelConfig.from_json(snapshot.config_json)
        self.strategy = build_strategy(tag)
        self.params = {name: _readonly(arr.astype(np.float64))
                       for name, arr in snapshot.tensors.items()}

    def embed_pairs(self, dataset: PairedDataset,
                    chunk: int = EVAL_CHUNK) -> tuple[np.ndarray, np.ndarray]:
        e_audio, e_text = [], []
        samples = dataset.samples
        for lo in range(0, len(samples), chunk):
            part = samples[lo:lo + chunk]
            patches = encoders.stack_audio_patches(
                [s.audio.spectrogram for s in part], self.config.audio)
            onehots = encoders.stack_token_onehots(
                [list(s.text.tokens) for s in part], self.config.text)
            e_a, e_t = self.strategy.encode(
                ARRAY_OPS, self.params, self.config, patches, onehots, len(part))
            e_audio.append(e_a)
            e_text.append(e_t)
        return np.concatenate(e_audio, axis=0), np.concatenate(e_text, axis=0)


def save_snapshot(snapshot: ModelSnapshot, path) -> Path:
    path = Path(path)
    meta_json = np.frombuffer(snapshot.config_json.encode(), dtype=np.uint8)
    items = dict(snapshot.tensors)
    items["meta.config_json"] = meta_json.astype(np.float32).reshape(1, -1)
    items["meta.step"] = np.array([[snapshot.step]], dtype=np.float32)
    chunks = [struct.pack("<I", SNAPSHOT_VERSION), snapshot.config_hash,
              struct.pack("<I", len(items))]
    for name in sorted(items):
        encoded = name.encode()
        arr = np.ascontiguousarray(items[name], dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    blob = SNAPSHOT_MAGIC + payload + struct.pack("<I", zlib.crc32(payload))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def load_snapshot(path, expected_hash: Optional[bytes] = None) -> ModelSnapshot:
    raw = Path(path).read_bytes()
    if len(raw) < len(SNAPSHOT_MAGIC) + 4 or not raw.startswith(SNAPSHOT_MAGIC):
        raise SnapshotFormatError(f"{path}: missing {SNAPSHOT_MAGIC!r} magic")
    payload, (crc,) = raw[len(SNAPSHOT_MAGIC):-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise SnapshotChecksumError(f"{path}: payload CRC mismatch")

    view = memoryview(payload)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise SnapshotTruncatedError(
                f"{path}: needs {offset + n} payload bytes, has {len(view)}")
        piece = view[offset:offset + n]
        offset += n
        return piece

    (version,) = struct.unpack("<I", take(4))
    if version != SNAPSHOT_VERSION:
        raise SnapshotVersionError(
            f"{path}: format version {version}, reader supports {SNAPSHOT_VERSION}")
    stored_hash = bytes(take(32))
    (count,) = struct.unpack("<I", take(4))
    items: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        rows, cols = struct.unpack("<II", take(8))
        arr = np.frombuffer(take(rows * cols * 4), dtype="<f4").reshape(rows, cols)
        items[name] = arr
    if offset != len(view):
        raise SnapshotFormatError(f"{path}: {len(view) - offset} trailing bytes")

    if "meta.config_json" not in items or "meta.step" not in items:
        raise SnapshotFormatError(f"{path}: missing metadata tensors")
    config_json = bytes(items.pop("meta.config_json").astype(np.uint8).reshape(-1)).decode()
    step = int(items.pop("meta.step")[0, 0])
    digest = hashlib.sha256(config_json.encode()).digest()
    if digest != stored_hash:
        raise SnapshotHashMismatchError(f"{path}: stored config hash disagrees "
                                        f"with the embedded configuration")
    if expected_hash is not None and digest != expected_hash:
        raise SnapshotHashMismatchError(f"{path}: snapshot belongs to a different "
                                        f"model configuration")
    tensors = {}
    for name, arr in items.items():
        arr = arr.copy()
        arr.setflags(write=False)
        tensors[name] = arr
    return ModelSnapshot(tensors, config_json, step)


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------

def _prepare_inputs(dataset: PairedDataset, model_cfg: ModelConfig):
    a_cfg, t_cfg = model_cfg.audio, model_cfg.text
    patches = encoders.stack_audio_patches(
        [s.audio.spectrogram for s in dataset.samples], a_cfg)
    onehots = encoders.stack_token_onehots(
        [list(s.text.tokens) for s in dataset.samples], t_cfg)
    n = len(dataset.samples)
    return (patches.reshape(n, a_cfg.patch_count, a_cfg.patch_size),
            onehots.reshape(n, -1, t_cfg.vocab_size))


def _teacher_cache(teacher: ModelSnapshot,
                   dataset: PairedDataset) -> tuple[np.ndarray, np.ndarray]:
    model = SnapshotModel(teacher)
    return model.embed_pairs(dataset)


def _gather(stack: np.ndarray, ids: np.ndarray) -> np.ndarray:
    batch = stack[ids].reshape(-1, stack.shape[2])
    batch.setflags(write=False)
    return batch


def _train_on(state: ModelState, dataset: PairedDataset,
              teacher_embeddings, cfg: TrainConfig, epochs: int,
              learning_rate: float, step_index: int,
              loss_log: Optional[list] = None) -> list[float]:
    """Optimize the state's trainable partition on one training split."""
    strategy, model_cfg = state.strategy, state.config
    patches, onehots = _prepare_inputs(dataset, model_cfg)
    n = len(dataset.samples)
    trainable = state.partition.names()
    optimizer = MomentOptimizer(trainable, learning_rate, cfg.weight_decay)
    use_fd = cfg.use_feature_distillation and strategy.distillation
    use_sd = cfg.use_similarity_distillation and strategy.distillation
    epoch_means = []
    for epoch in range(epochs):
        order = np.random.default_rng(
            (cfg.seed, step_index, epoch, 0xE9)).permutation(n)
        batch_losses = []
        for lo in range(0, n, cfg.batch_size):
            ids = order[lo:lo + cfg.batch_size]
            if len(ids) < 2:
                continue  # a single pair has no negatives
            named = state.named_params()
            nodes = {}
            for name, arr in named.items():
                nodes[name] = ad.parameter(arr) if name in state.partition \
                    else ad.constant(arr)
            try:
                e_a, e_t = strategy.encode(
                    GRAPH_OPS, nodes, model_cfg,
                    ad.constant(_gather(patches, ids)),
                    ad.constant(_gather(onehots, ids)), len(ids))
                pair = similarity_matrices(GRAPH_OPS, e_a, e_t, cfg.weights.tau)
                teacher_out = None
                if teacher_embeddings is not None and (use_fd or use_sd):
                    t_a = teacher_embeddings[0][ids]
                    t_t = teacher_embeddings[1][ids]
                    t_sim = (t_a @ t_t.T) / cfg.weights.tau
                    teacher_out = TeacherOutputs(
                        embeddings=BatchEmbeddings(audio=t_a, text=t_t),
                        similarity=SimilarityPair(a2t=t_sim, t2a=t_sim.T,
                                                  tau=cfg.weights.tau))
                loss, _ = total_loss(
                    GRAPH_OPS, BatchEmbeddings(audio=e_a, text=e_t), pair,
                    teacher_out, cfg.weights,
                    use_feature_distillation=use_fd,
                    use_similarity_distillation=use_sd)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss at step {step_index} epoch {epoch + 1} "
                    f"batch {lo // cfg.batch_size + 1}: {exc}") from exc
            batch_losses.append(loss.value[0, 0])
            grads = ad.grads_for(ad.backward(loss), {k: nodes[k] for k in trainable})
            current = {k: named[k] for k in trainable}
            for name, new_value in optimizer.step(current, grads).items():
                state.set_param(name, new_value)
        mean = float(np.mean(batch_losses)) if batch_losses else 0.0
        epoch_means.append(mean)
        if loss_log is not None:
            loss_log.append((step_index, epoch + 1, mean))
    return epoch_means


def run_step(state: ModelState, dataset: PairedDataset,
             teacher: Optional[ModelSnapshot], cfg: TrainConfig,
             loss_log: Optional[list] = None) -> tuple[ModelState, ModelSnapshot]:
    """Train one incremental step and return the advanced state plus its
    frozen snapshot.  ``state.step`` counts completed steps, so the step
    being trained here is ``state.step + 1``; a teacher is meaningful only
    from the second step on."""
    m = state.step + 1
    if m == 1 and teacher is not None:
        raise TeacherMismatchError("the first step has no previous snapshot")
    if m > 1 and state.strategy.distillation and teacher is None:
        raise TeacherMismatchError(f"step {m} needs the step {m - 1} snapshot")
    teacher_embeddings = None
    if teacher is not None:
        if teacher.config_hash != state.config_hash():
            raise TeacherMismatchError(
                "teacher snapshot was produced by a different configuration")
        if state.strategy.distillation and \
                (cfg.use_feature_distillation or cfg.use_similarity_distillation):
            teacher_embeddings = _teacher_cache(teacher, dataset)
    _train_on(state, dataset, teacher_embeddings, cfg, cfg.epochs,
              cfg.learning_rate, m, loss_log)
    state.step = m
    return state, snapshot_from_state(state)


def pretrain_backbone(model_cfg: ModelConfig, spec: DomainSpec,
                      cfg: TrainConfig) -> tuple[encoders.EncoderState, encoders.EncoderState]:
    """The pretraining surrogate: full-parameter contrastive warm-up on a
    held-out domain, after which the backbone is frozen for prompt-based
    strategies."""
    audio = encoders.init_audio_encoder(model_cfg.audio, (cfg.seed, 0xA0D10))
    text = encoders.init_text_encoder(model_cfg.text, (cfg.seed, 0x7E27))
    surrogate = build_strategy("finetune_sequential")
    state = init_model_state(surrogate, model_cfg, (audio, text), cfg.seed)
    train = generate_domain(spec, "train")
    _train_on(state, train, None, cfg, cfg.pretrain_epochs, cfg.pretrain_lr,
              step_index=0)
    return state.audio, state.text


# ---------------------------------------------------------------------------
# Sequence protocols.
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    history: MetricsHistory
    snapshots: list[ModelSnapshot]
    state: ModelState
    epoch_losses: list  # (step, epoch, mean loss)


def run_sequence(seq: SequenceSpec, cfg: TrainConfig, strategy,
                 model_cfg: Optional[ModelConfig] = None,
                 backbone: Optional[tuple] = None,
                 on_snapshot: Optional[Callable[[int, ModelSnapshot], None]] = None,
                 ) -> RunResult:
    """Run the full incremental protocol for one strategy and one seed.

    After each step the new snapshot is evaluated on the test split of
    every domain introduced so far.  ``on_snapshot(step, snapshot)`` fires
    as each step completes (persistence hook).
    """
    if isinstance(strategy, str):
        strategy = build_strategy(strategy)
    model_cfg = model_cfg or desk_model_config()
    if backbone is None:
        backbone = pretrain_backbone(model_cfg, heldout_domain_spec(seq), cfg)
    state = init_model_state(strategy, model_cfg, backbone, cfg.seed)
    history = MetricsHistory(strategy.tag, cfg.seed,
                             count_trainable(state.partition))
    tests = {d.name: generate_domain(d, "test") for d in seq.domains}
    loss_log: list = []
    snapshots: list[ModelSnapshot] = []

    def record(step: int, snapshot: ModelSnapshot, names) -> None:
        model = SnapshotModel(snapshot)
        for name in names:
            history.add_scores(step, name, scores_from_embeddings(
                *model.embed_pairs(tests[name])))

    if strategy.protocol == "sequential":
        teacher = None
        for m, domain in enumerate(seq.domains, start=1):
            train = generate_domain(domain, "train")
            state, snapshot = run_step(state, train, teacher, cfg, loss_log)
            snapshots.append(snapshot)
            if on_snapshot:
                on_snapshot(m, snapshot)
            record(m, snapshot, [d.name for d in seq.domains[:m]])
            teacher = snapshot
    elif strategy.protocol == "joint":
        union = PairedDataset(
            name="union", split="train",
            samples=[s for d in seq.domains
                     for s in generate_domain(d, "train").samples])
        state, snapshot = run_step(state, union, None, cfg, loss_log)
        snapshots.append(snapshot)
        if on_snapshot:
            on_snapshot(1, snapshot)
        model = SnapshotModel(snapshot)
        scores = {d.name: scores_from_embeddings(*model.embed_pairs(tests[d.name]))
                  for d in seq.domains}
        for m in range(1, len(seq) + 1):
            for domain in seq.domains[:m]:
                history.add_scores(m, domain.name, scores[domain.name])
    elif strategy.protocol == "per_dataset":
        # independent full training per domain; earlier domains keep their
        # own model's numbers at later steps (there is nothing to forget)
        own_scores = {}
        for m, domain in enumerate(seq.domains, start=1):
            fresh = init_model_state(strategy, model_cfg, backbone, cfg.seed)
            train = generate_domain(domain, "train")
            fresh, snapshot = run_step(fresh, train, None, cfg, loss_log)
            snapshots.append(snapshot)
            if on_snapshot:
                on_snapshot(m, snapshot)
            model = SnapshotModel(snapshot)
            own_scores[domain.name] = scores_from_embeddings(
                *model.embed_pairs(tests[domain.name]))
            state = fresh
        for m in range(1, len(seq) + 1):
            for domain in seq.domains[:m]:
                history.add_scores(m, domain.name, own_scores[domain.name])
    else:
        raise ValueError(f"unknown protocol {state.strategy.protocol!r}")

    return RunResult(history, snapshots, state, loss_log)

"""Synthetic paired audio/text domains with a controllable gap.

Each domain owns a linear map from a latent concept space to a
spectrogram basis and another to per-position token logits.  A sample is
one latent vector rendered through both maps: the audio view adds seeded
Gaussian noise, the text view takes greedy per-position tokens.  The
fraction ``overlap_ratio`` of latents is drawn from a concept pool shared
by every domain; the rest come from a domain-private cluster, so shrinking
the ratio widens the gap between consecutive domains.

Everything is reproducible from (spec, latent id): per-sample randomness
is keyed on the pair, which is what the pairing-integrity and manifest
round-trip guarantees lean on.  Spectrogram values are rounded to float32
precision at generation time so the on-disk blob format is lossless.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SHARED_POOL_SEED = 170_201
SHARED_POOL_SIZE = 256

MANIFEST_HEADER = "ptat-manifest v1"


class ManifestError(ValueError):
    """Base class for manifest ingestion failures."""


class ManifestFormatError(ManifestError):
    """Malformed header or record line."""


class MissingBlobError(ManifestError):
    """A referenced audio blob file does not exist."""


class BlobDimensionError(ManifestError):
    """Blob byte length disagrees with the declared rows x cols."""


class BlobChecksumError(ManifestError):
    """Blob bytes fail their declared CRC32."""


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one synthetic domain."""

    name: str
    latent_dim: int
    num_train: int
    num_test: int
    audio_map: np.ndarray        # (spec_rows*spec_cols) x latent_dim
    text_logit_map: np.ndarray   # (text_len*vocab_size) x latent_dim
    noise_sigma: float
    overlap_ratio: float
    seed: int
    spec_rows: int = 32
    spec_cols: int = 16
    text_len: int = 10
    vocab_size: int = 64
    cluster_shift: float = 1.0   # offset of the private concept cluster
    latent_jitter: float = 0.35  # per-sample spread around a concept

    def __post_init__(self):
        if not (0.0 <= self.overlap_ratio <= 1.0):
            raise ValueError(f"overlap_ratio must be in [0,1], got {self.overlap_ratio}")
        expect_audio = (self.spec_rows * self.spec_cols, self.latent_dim)
        if self.audio_map.shape != expect_audio:
            raise ValueError(
                f"audio_map shape {self.audio_map.shape} != {expect_audio}")
        expect_text = (self.text_len * self.vocab_size, self.latent_dim)
        if self.text_logit_map.shape != expect_text:
            raise ValueError(
                f"text_logit_map shape {self.text_logit_map.shape} != {expect_text}")
        if np.linalg.matrix_rank(self.audio_map) == 0 \
                or np.linalg.matrix_rank(self.text_logit_map) == 0:
            raise ValueError("degenerate (rank-0) domain maps")


@dataclass(frozen=True)
class AudioSample:
    spectrogram: np.ndarray  # time x freq


@dataclass(frozen=True)
class TextSample:
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class PairedSample:
    audio: AudioSample
    text: TextSample
    latent_id: int


@dataclass
class PairedDataset:
    name: str
    split: str
    samples: list[PairedSample]

    def __len__(self) -> int:
        return len(self.samples)

    def spectrograms(self) -> list[np.ndarray]:
        return [s.audio.spectrogram for s in self.samples]

    def token_rows(self) -> list[list[int]]:
        return [list(s.text.tokens) for s in self.samples]


@dataclass(frozen=True)
class SequenceSpec:
    """Ordered incremental curriculum; distillation activates from step 2.

    ``heldout`` holds same-family domains outside the sequence, used to
    warm up the backbone before the protocol starts.
    """

    domains: tuple[DomainSpec, ...]
    heldout: tuple[DomainSpec, ...] = ()

    def __post_init__(self):
        if not self.domains:
            raise ValueError("sequence needs at least one domain")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate domain names: {names}")

    def __len__(self) -> int:
        return len(self.domains)


def _shared_pool(latent_dim: int) -> np.ndarray:
    rng = np.random.default_rng(SHARED_POOL_SEED)
    return rng.standard_normal((SHARED_POOL_SIZE, latent_dim))


def _private_center(spec: DomainSpec) -> np.ndarray:
    rng = np.random.default_rng((spec.seed, 0xC1))
    direction = rng.standard_normal(spec.latent_dim)
    return spec.cluster_shift * direction / np.linalg.norm(direction)


def sample_latent(spec: DomainSpec, latent_id: int,
                  pool: Optional[np.ndarray] = None,
                  center: Optional[np.ndarray] = None) -> np.ndarray:
    if pool is None:
        pool = _shared_pool(spec.latent_dim)
    if center is None:
        center = _private_center(spec)
    rng = np.random.default_rng((spec.seed, latent_id))
    if rng.uniform() < spec.overlap_ratio:
        concept = pool[rng.integers(0, len(pool))]
    else:
        concept = center + rng.standard_normal(spec.latent_dim)
    return concept + spec.latent_jitter * rng.standard_normal(spec.latent_dim)


def regenerate_sample(spec: DomainSpec, latent_id: int,
                      pool: Optional[np.ndarray] = None,
                      center: Optional[np.ndarray] = None) -> PairedSample:
    """Rebuild one sample from its latent id; exact down to the noise."""
    z = sample_latent(spec, latent_id, pool, center)
    noise_rng = np.random.default_rng((spec.seed, latent_id, 0xA0))
    flat = spec.audio_map @ z
    spectrogram = flat.reshape(spec.spec_rows, spec.spec_cols)
    spectrogram = spectrogram + spec.noise_sigma * noise_rng.standard_normal(
        (spec.spec_rows, spec.spec_cols))
    # round to float32 precision so manifests round-trip losslessly
    spectrogram = spectrogram.astype(np.float32).astype(np.float64)
    spectrogram.setflags(write=False)
    logits = (spec.text_logit_map @ z).reshape(spec.text_len, spec.vocab_size)
    tokens = tuple(int(t) for t in logits.argmax(axis=1))
    return PairedSample(AudioSample(spectrogram), TextSample(tokens), latent_id)


# Generation is pure in (spec, split); repeated protocol runs over one
# sequence reuse materialized datasets.  Keyed on object identity with the
# spec kept alive so ids cannot be recycled.
_DATASET_CACHE: dict[tuple[int, str], tuple[DomainSpec, PairedDataset]] = {}
_DATASET_CACHE_LIMIT = 64


def generate_domain(spec: DomainSpec, split: str = "train") -> PairedDataset:
    """Materialize one split; train and test draw disjoint latent ids."""
    key = (id(spec), split)
    hit = _DATASET_CACHE.get(key)
    if hit is not None and hit[0] is spec:
        return hit[1]
    if split == "train":
        ids = range(spec.num_train)
    elif split == "test":
        ids = range(spec.num_train, spec.num_train + spec.num_test)
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    pool = _shared_pool(spec.latent_dim)
    center = _private_center(spec)
    samples = [regenerate_sample(spec, i, pool, center) for i in ids]
    dataset = PairedDataset(spec.name, split, samples)
    if len(_DATASET_CACHE) >= _DATASET_CACHE_LIMIT:
        _DATASET_CACHE.pop(next(iter(_DATASET_CACHE)))
    _DATASET_CACHE[key] = (spec, dataset)
    return dataset


def generate_splits(spec: DomainSpec) -> tuple[PairedDataset, PairedDataset]:
    return generate_domain(spec, "train"), generate_domain(spec, "test")


def crop_or_pad(spectrogram: np.ndarray, target_len: int, seed: int = 0) -> AudioSample:
    """Canonicalize the time axis: seeded contiguous crop or zero padding."""
    spectrogram = np.asarray(spectrogram, dtype=np.float64)
    if spectrogram.size == 0:
        raise ValueError("empty spectrogram")
    if target_len <= 0:
        raise ValueError(f"target_len must be positive, got {target_len}")
    rows = spectrogram.shape[0]
    if rows == target_len:
        out = spectrogram.copy()
    elif rows > target_len:
        start = int(np.random.default_rng(seed).integers(0, rows - target_len + 1))
        out = spectrogram[start:start + target_len].copy()
    else:
        out = np.zeros((target_len, spectrogram.shape[1]))
        out[:rows] = spectrogram
    out.setflags(write=False)
    return AudioSample(out)


# ---------------------------------------------------------------------------
# Manifest ingestion/export: the escape hatch for externally prepared data.
# One text file plus raw little-endian float32 blobs, CRC-checked.
# ---------------------------------------------------------------------------

def write_manifest(dataset: PairedDataset, directory) -> Path:
    directory = Path(directory)
    blob_dir = directory / "blobs"
    blob_dir.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for sample in dataset.samples:
        spec = sample.audio.spectrogram
        blob = spec.astype("<f4").tobytes()
        rel = f"blobs/{sample.latent_id}.f32"
        (directory / rel).write_bytes(blob)
        tokens = ",".join(str(t) for t in sample.text.tokens)
        crc = zlib.crc32(blob)
        lines.append(f"{sample.latent_id}\t{rel}\t{spec.shape[0]}\t{spec.shape[1]}"
                     f"\t{tokens}\t{crc}")
    path = directory / "manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> PairedDataset:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ManifestFormatError(
            f"bad manifest header {lines[0]!r} if any; expected {MANIFEST_HEADER!r}")
    samples = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ManifestFormatError(f"line {ln}: expected 6 fields, got {len(parts)}")
        sid, rel, rows, cols, tokens, crc = parts
        rows, cols = int(rows), int(cols)
        blob_path = path.parent / rel
        if not blob_path.exists():
            raise MissingBlobError(f"line {ln}: blob missing: {blob_path}")
        blob = blob_path.read_bytes()
        if len(blob) != rows * cols * 4:
            raise BlobDimensionError(
                f"line {ln}: blob has {len(blob)} bytes, "
                f"expected {rows * cols * 4} for {rows}x{cols}")
        if zlib.crc32(blob) != int(crc):
            raise BlobChecksumError(f"line {ln}: CRC mismatch for {blob_path}")
        spec = np.frombuffer(blob, dtype="<f4").reshape(rows, cols).astype(np.float64)
        spec.setflags(write=False)
        token_tuple = tuple(int(t) for t in tokens.split(",")) if tokens else ()
        samples.append(PairedSample(AudioSample(spec), TextSample(token_tuple),
                                    int(sid)))
    return PairedDataset(path.parent.name, "external", samples)


# ---------------------------------------------------------------------------
# The default desk-scale benchmark.
# ---------------------------------------------------------------------------

def _blend_maps(base: np.ndarray, fresh: np.ndarray, blend: float) -> np.ndarray:
    # keep per-entry variance constant while interpolating between the
    # shared basis and a domain-private one
    mixed = (1.0 - blend) * base + blend * fresh
    norm = np.sqrt((1.0 - blend) ** 2 + blend ** 2)
    return mixed / norm


def make_domain_spec(name: str, seed: int, base_audio: np.ndarray,
                     base_text: np.ndarray, *, latent_dim: int,
                     num_train: int, num_test: int, overlap_ratio: float,
                     noise_sigma: float, map_blend: float,
                     cluster_shift: float = 1.0,
                     spec_rows: int = 32, spec_cols: int = 16,
                     text_len: int = 10, vocab_size: int = 64) -> DomainSpec:
    rng = np.random.default_rng((seed, 0xD0))
    scale = latent_dim ** -0.5
    fresh_audio = rng.normal(0.0, scale, base_audio.shape)
    fresh_text = rng.normal(0.0, scale, base_text.shape)
    return DomainSpec(
        name=name, latent_dim=latent_dim, num_train=num_train,
        num_test=num_test,
        audio_map=_blend_maps(base_audio, fresh_audio, map_blend),
        text_logit_map=_blend_maps(base_text, fresh_text, map_blend),
        noise_sigma=noise_sigma, overlap_ratio=overlap_ratio, seed=seed,
        spec_rows=spec_rows, spec_cols=spec_cols, text_len=text_len,
        vocab_size=vocab_size, cluster_shift=cluster_shift)


def benchmark_sequence(num_domains: int = 4, num_train: int = 2000,
                       num_test: int = 200, overlap_ratio: float = 0.3,
                       latent_dim: int = 12, noise_sigma: float = 0.1,
                       map_blend: float = 0.5, cluster_shift: float = 1.0,
                       seed: int = 7, order: Optional[Sequence[int]] = None,
                       spec_rows: int = 32, spec_cols: int = 16,
                       text_len: int = 10, vocab_size: int = 64) -> SequenceSpec:
    """Desk-scale stand-in for a stream of related retrieval corpora.

    All domains blend one shared basis with a private one (``map_blend``)
    and share ``overlap_ratio`` of their concepts, echoing a sequence of
    corpora that overlap in content but differ in character.
    """
    rng = np.random.default_rng((seed, 0xBA5E))
    scale = latent_dim ** -0.5
    base_audio = rng.normal(0.0, scale, (spec_rows * spec_cols, latent_dim))
    base_text = rng.normal(0.0, scale, (text_len * vocab_size, latent_dim))
    def build(name, domain_seed, n_train, n_test):
        return make_domain_spec(
            name, domain_seed, base_audio, base_text,
            latent_dim=latent_dim, num_train=n_train, num_test=n_test,
            overlap_ratio=overlap_ratio, noise_sigma=noise_sigma,
            map_blend=map_blend, cluster_shift=cluster_shift,
            spec_rows=spec_rows, spec_cols=spec_cols, text_len=text_len,
            vocab_size=vocab_size)

    specs = [build(f"domain{i + 1}", seed * 1000 + i + 1, num_train, num_test)
             for i in range(num_domains)]
    if order is not None:
        if sorted(order) != list(range(num_domains)):
            raise ValueError(
                f"order must permute 0..{num_domains - 1}, got {list(order)}")
        specs = [specs[i] for i in order]
    per_heldout = max(min(num_train, 1200), 1)
    heldout = tuple(build(f"heldout{i + 1}", seed * 1000 + num_domains + 77 + i,
                          per_heldout, min(num_test, 50))
                    for i in range(3))
    return SequenceSpec(tuple(specs), heldout=heldout)


def heldout_domain_specs(seq: SequenceSpec, num_train: int = 1200,
                         num_test: int = 50) -> tuple[DomainSpec, ...]:
    """The sequence's warm-up domains, or latent-shifted twins of the first
    domain when the sequence does not carry any."""
    if seq.heldout:
        return seq.heldout
    first = seq.domains[0]
    return tuple(replace(first, name=f"heldout{i + 1}",
                         seed=first.seed + 0x5EED + i,
                         num_train=num_train, num_test=num_test)
                 for i in range(3))

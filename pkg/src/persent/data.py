"""Sample/batch data model, the JSON-lines feature archive, and synthetic data.

An archive file is UTF-8 JSON lines: line 1 is the manifest object
``{"version", "d_v", "d_a", "vocab", "splits": {name: count}}``, every
following line is one record ``{"id", "split", "tokens", "visual", "audio",
"label", "text"?}``. Features are nested numeric arrays; labels are scalars
in [-3, 3].

Token id 0 is the [CLS] analogue and id 1 is the pad token; archives store
pre-tokenized ids (tokenization itself is out of scope).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ARCHIVE_VERSION = 1
CLS_ID = 0
PAD_ID = 1

SPLITS = ("train", "valid", "test")


class ArchiveError(ValueError):
    """Base class for archive validation failures."""


class DimensionMismatchError(ArchiveError):
    """A record's feature width disagrees with the manifest."""


class NonFiniteValueError(ArchiveError):
    """A feature matrix contains NaN or infinity."""


class LabelRangeError(ArchiveError):
    """A sentiment label falls outside [-3, 3]."""


class EmptySplitError(ArchiveError):
    """A requested split holds no records."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Manifest:
    """Archive header: modality widths, vocabulary size, split sizes."""

    d_v: int = 35
    d_a: int = 74
    vocab: int = 1000
    splits: dict[str, int] = field(default_factory=dict)
    version: int = ARCHIVE_VERSION

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "d_v": self.d_v,
                "d_a": self.d_a,
                "vocab": self.vocab,
                "splits": dict(self.splits),
            },
            sort_keys=True,
        )

    @classmethod
    def from_obj(cls, obj: dict) -> "Manifest":
        return cls(
            d_v=int(obj["d_v"]),
            d_a=int(obj["d_a"]),
            vocab=int(obj["vocab"]),
            splits={str(k): int(v) for k, v in obj["splits"].items()},
            version=int(obj.get("version", ARCHIVE_VERSION)),
        )


@dataclass(frozen=True)
class UtteranceSample:
    """One annotated clip: token ids, per-frame features, scalar label."""

    id: str
    split: str
    tokens: tuple[int, ...]
    visual: np.ndarray  # [T_v, d_v] float32
    audio: np.ndarray  # [T_a, d_a] float32
    label: float
    text: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "visual", _readonly(np.asarray(self.visual, dtype=np.float32)))
        object.__setattr__(self, "audio", _readonly(np.asarray(self.audio, dtype=np.float32)))
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) < 1 or self.visual.shape[0] < 1 or self.audio.shape[0] < 1:
            raise ArchiveError(f"record {self.id!r}: every sequence must have length >= 1")
        if self.visual.ndim != 2 or self.audio.ndim != 2:
            raise DimensionMismatchError(f"record {self.id!r}: features must be 2-D matrices")
        for name, mat in (("visual", self.visual), ("audio", self.audio)):
            if not np.isfinite(mat).all():
                raise NonFiniteValueError(f"record {self.id!r}: non-finite value in {name} features")
        if not np.isfinite(self.label) or not (-3.0 <= self.label <= 3.0):
            raise LabelRangeError(f"record {self.id!r}: label {self.label} outside [-3, 3]")

    def to_obj(self) -> dict:
        obj = {
            "id": self.id,
            "split": self.split,
            "tokens": list(self.tokens),
            "visual": [[float(x) for x in row] for row in self.visual],
            "audio": [[float(x) for x in row] for row in self.audio],
            "label": float(self.label),
        }
        if self.text is not None:
            obj["text"] = self.text
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> "UtteranceSample":
        return cls(
            id=str(obj["id"]),
            split=str(obj["split"]),
            tokens=tuple(obj["tokens"]),
            visual=np.asarray(obj["visual"], dtype=np.float32),
            audio=np.asarray(obj["audio"], dtype=np.float32),
            label=float(obj["label"]),
            text=obj.get("text"),
        )


@dataclass(frozen=True)
class FeatureArchive:
    """Validated collection of records plus their manifest."""

    manifest: Manifest
    records: tuple[UtteranceSample, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen_ids: dict[str, str] = {}
        counts: dict[str, int] = {}
        for rec in self.records:
            if rec.visual.shape[1] != self.manifest.d_v:
                raise DimensionMismatchError(
                    f"record {rec.id!r}: visual width {rec.visual.shape[1]} != manifest d_v {self.manifest.d_v}"
                )
            if rec.audio.shape[1] != self.manifest.d_a:
                raise DimensionMismatchError(
                    f"record {rec.id!r}: audio width {rec.audio.shape[1]} != manifest d_a {self.manifest.d_a}"
                )
            if any(t < 0 or t >= self.manifest.vocab for t in rec.tokens):
                raise ArchiveError(f"record {rec.id!r}: token id outside vocab {self.manifest.vocab}")
            if rec.id in seen_ids:
                raise ArchiveError(f"duplicate record id {rec.id!r} (splits must be disjoint)")
            seen_ids[rec.id] = rec.split
            counts[rec.split] = counts.get(rec.split, 0) + 1
        if dict(self.manifest.splits) != counts:
            raise DimensionMismatchError(
                f"manifest split counts {dict(self.manifest.splits)} != actual {counts}"
            )

    def split(self, name: str) -> tuple[UtteranceSample, ...]:
        recs = tuple(r for r in self.records if r.split == name)
        if not recs:
            raise EmptySplitError(f"split {name!r} is empty")
        return recs


def serialize_archive(archive: FeatureArchive) -> bytes:
    """Canonical on-disk form: manifest line, then one record per line."""
    lines = [archive.manifest.to_json()]
    lines.extend(json.dumps(rec.to_obj(), sort_keys=True) for rec in archive.records)
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_archive(archive: FeatureArchive, path: str | Path) -> None:
    Path(path).write_bytes(serialize_archive(archive))


def load_archive(path: str | Path) -> FeatureArchive:
    """Parse and validate an archive file.

    Raises FileNotFoundError for a missing file, and a named ArchiveError
    subclass for each distinct validation failure (dimension mismatch,
    non-finite values, out-of-range labels).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ArchiveError(f"{path}: empty archive file")
    try:
        manifest = Manifest.from_obj(json.loads(lines[0]))
        records = tuple(UtteranceSample.from_obj(json.loads(line)) for line in lines[1:] if line.strip())
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: malformed archive ({exc})") from exc
    return FeatureArchive(manifest=manifest, records=records)


# ---------------------------------------------------------------------------
# Batching


@dataclass(frozen=True)
class Batch:
    """Padded, masked mini-batch. Masks are True at valid positions."""

    ids: tuple[str, ...]
    tokens: np.ndarray  # [N, T_t] int64, PAD_ID at padded slots
    token_mask: np.ndarray  # [N, T_t] bool
    visual: np.ndarray  # [N, T_v, d_v] float32, zeros at padded slots
    visual_mask: np.ndarray  # [N, T_v] bool
    audio: np.ndarray  # [N, T_a, d_a] float32
    audio_mask: np.ndarray  # [N, T_a] bool
    labels: np.ndarray  # [N] float32

    def __post_init__(self):
        for name in ("tokens", "token_mask", "visual", "visual_mask", "audio", "audio_mask", "labels"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name))))

    @property
    def size(self) -> int:
        return len(self.ids)


def _pad_batch(samples: list[UtteranceSample], max_lens: tuple[int | None, int | None, int | None]) -> Batch:
    cap_t, cap_v, cap_a = max_lens

    def clip(n: int, cap: int | None) -> int:
        return n if cap is None else min(n, cap)

    t_t = max(clip(len(s.tokens), cap_t) for s in samples)
    t_v = max(clip(s.visual.shape[0], cap_v) for s in samples)
    t_a = max(clip(s.audio.shape[0], cap_a) for s in samples)
    n = len(samples)
    d_v = samples[0].visual.shape[1]
    d_a = samples[0].audio.shape[1]

    tokens = np.full((n, t_t), PAD_ID, dtype=np.int64)
    token_mask = np.zeros((n, t_t), dtype=bool)
    visual = np.zeros((n, t_v, d_v), dtype=np.float32)
    visual_mask = np.zeros((n, t_v), dtype=bool)
    audio = np.zeros((n, t_a, d_a), dtype=np.float32)
    audio_mask = np.zeros((n, t_a), dtype=bool)
    labels = np.zeros(n, dtype=np.float32)

    for i, s in enumerate(samples):
        # truncation drops the tail, padding fills the tail
        lt = clip(len(s.tokens), cap_t)
        lv = clip(s.visual.shape[0], cap_v)
        la = clip(s.audio.shape[0], cap_a)
        tokens[i, :lt] = s.tokens[:lt]
        token_mask[i, :lt] = True
        visual[i, :lv] = s.visual[:lv]
        visual_mask[i, :lv] = True
        audio[i, :la] = s.audio[:la]
        audio_mask[i, :la] = True
        labels[i] = s.label
    return Batch(
        ids=tuple(s.id for s in samples),
        tokens=tokens,
        token_mask=token_mask,
        visual=visual,
        visual_mask=visual_mask,
        audio=audio,
        audio_mask=audio_mask,
        labels=labels,
    )


def make_batches(
    archive: FeatureArchive,
    split: str,
    batch_size: int,
    seed: int,
    max_lens: tuple[int | None, int | None, int | None] = (None, None, None),
) -> list[Batch]:
    """Deterministic shuffled batches; a final batch of size < 2 is dropped."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (contrastive losses need negatives)")
    samples = list(archive.split(split))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    shuffled = [samples[i] for i in order]
    batches = []
    for start in range(0, len(shuffled), batch_size):
        chunk = shuffled[start : start + batch_size]
        if len(chunk) < 2:
            break
        batches.append(_pad_batch(chunk, max_lens))
    return batches


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticDims:
    """Shapes for the synthetic generator; defaults mirror the desk-scale task."""

    d_v: int = 35
    d_a: int = 74
    vocab: int = 1000
    n_factors: int = 4
    text_len: tuple[int, int] = (6, 12)
    visual_len: tuple[int, int] = (8, 16)
    audio_len: tuple[int, int] = (8, 16)
    noise: float = 0.1


# Label is linear in the latent factors, dominated by the first one so the
# empirical distribution reaches both ends of [-3, 3] at modest sample counts.
_FACTOR_WEIGHTS = np.array([2.4, 0.35, 0.15, 0.1])


def _token_bins(vocab: int, n_factors: int) -> int:
    return (vocab - 2) // n_factors


def _sample_record(
    rng: np.random.Generator, dims: SyntheticDims, split: str, index: int
) -> tuple[UtteranceSample, np.ndarray]:
    z = rng.uniform(-1.0, 1.0, size=dims.n_factors)
    label = float(np.dot(_FACTOR_WEIGHTS[: dims.n_factors], z))

    t_t = int(rng.integers(dims.text_len[0], dims.text_len[1] + 1))
    t_v = int(rng.integers(dims.visual_len[0], dims.visual_len[1] + 1))
    t_a = int(rng.integers(dims.audio_len[0], dims.audio_len[1] + 1))

    # tokens: [CLS] then noisy quantizations of the factors, round-robin
    bins = _token_bins(dims.vocab, dims.n_factors)
    tokens = [CLS_ID]
    for t in range(t_t - 1):
        f = t % dims.n_factors
        val = float(np.clip(z[f] + dims.noise * rng.normal(), -1.0, 1.0))
        tokens.append(2 + f * bins + int((val + 1.0) / 2.0 * (bins - 1)))

    mix_v = rng.normal(size=(dims.n_factors, dims.d_v)) / np.sqrt(dims.n_factors)
    mix_a = rng.normal(size=(dims.n_factors, dims.d_a)) / np.sqrt(dims.n_factors)
    visual = z @ mix_v + dims.noise * rng.normal(size=(t_v, dims.d_v))
    audio = z @ mix_a + dims.noise * rng.normal(size=(t_a, dims.d_a))

    sample = UtteranceSample(
        id=f"{split}-{index:04d}",
        split=split,
        tokens=tuple(tokens),
        visual=visual.astype(np.float32),
        audio=audio.astype(np.float32),
        label=label,
    )
    return sample, z


def generate_synthetic_with_latents(
    seed: int, n_per_split: int, dims: SyntheticDims = SyntheticDims()
) -> tuple[FeatureArchive, dict[str, np.ndarray]]:
    """Deterministic synthetic archive plus the latent factors behind each split."""
    if n_per_split < 4:
        raise ValueError("n_per_split must be >= 4")
    rng = np.random.default_rng(seed)
    records: list[UtteranceSample] = []
    latents: dict[str, np.ndarray] = {}
    for split in SPLITS:
        zs = []
        for i in range(n_per_split):
            sample, z = _sample_record(rng, dims, split, i)
            records.append(sample)
            zs.append(z)
        latents[split] = _readonly(np.stack(zs))
    manifest = Manifest(
        d_v=dims.d_v, d_a=dims.d_a, vocab=dims.vocab, splits={s: n_per_split for s in SPLITS}
    )
    return FeatureArchive(manifest=manifest, records=tuple(records)), latents


def generate_synthetic(seed: int, n_per_split: int, dims: SyntheticDims = SyntheticDims()) -> FeatureArchive:
    archive, _ = generate_synthetic_with_latents(seed, n_per_split, dims)
    return archive

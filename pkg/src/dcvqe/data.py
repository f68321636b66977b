"""Feature-file ingestion, manifests, splits, and the synthetic generator.

Feature files are a fixed binary layout: magic ``DCVQ``, u32 version (1),
u32 num_frames, u32 feature_dim, then num_frames * feature_dim little-endian
float32 values, row-major. Values are 32-bit on disk and widened to 64-bit
in memory. Manifests are line-delimited JSON: one header record carrying the
MOS scale, then one record per video; feature paths resolve relative to the
manifest's directory.

The synthetic generator stands in for a real feature-extraction backbone:
each video mixes a latent quality direction with contiguous "burst"
segments of localized distortion, and MOS is the latent quality minus a
burst-coverage penalty, so quality is linearly decodable yet has temporal
structure for the hierarchy to exploit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics

MAGIC = b"DCVQ"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Malformed feature file or manifest; carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class FeatureSequence:
    """One video's frame features plus its ground-truth score."""

    video_id: str
    features: np.ndarray  # [num_frames, feature_dim] float64
    mos: float

    def __post_init__(self):
        self.features = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError(f"features must be [S>=1, dim>=1], got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError(f"non-finite feature value in {self.video_id!r}")
        if not math.isfinite(self.mos):
            raise ValueError(f"non-finite mos for {self.video_id!r}")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def write_features(path, seq: FeatureSequence) -> None:
    payload = seq.features.astype("<f4")
    if not np.isfinite(payload).all():
        raise ValueError(f"features of {seq.video_id!r} overflow float32")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, seq.num_frames, seq.feature_dim))
        fh.write(payload.tobytes(order="C"))


def read_features(path, mos: float = 0.0, video_id: str | None = None) -> FeatureSequence:
    """Parse one feature file, validating magic, version, extents, finiteness.

    The file carries no score; ``mos`` is attached by the caller (usually
    from a manifest entry).
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header in {path}: {len(raw)} bytes", offset=len(raw))
    magic, version, num_frames, feature_dim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} in {path}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} in {path}", offset=4)
    if num_frames < 1:
        raise FormatError(f"num_frames must be >= 1, got {num_frames}", offset=8)
    if feature_dim < 1:
        raise FormatError(f"feature_dim must be >= 1, got {feature_dim}", offset=12)
    expected = _HEADER.size + num_frames * feature_dim * 4
    if len(raw) < expected:
        raise FormatError(f"payload of {path} ends at byte {len(raw)}, header promises "
                          f"{expected} bytes", offset=len(raw))
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes in {path}", offset=expected)
    values = np.frombuffer(raw, dtype="<f4", count=num_frames * feature_dim,
                           offset=_HEADER.size)
    finite = np.isfinite(values)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise FormatError(f"non-finite value at element {bad} of {path}",
                          offset=_HEADER.size + bad * 4)
    features = values.astype(np.float64).reshape(num_frames, feature_dim)
    return FeatureSequence(video_id=video_id or path.stem, features=features, mos=mos)


def truncate(seq: FeatureSequence, max_len: int) -> FeatureSequence:
    """Keep only the first ``max_len`` frames; shorter sequences pass through."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if seq.num_frames <= max_len:
        return seq
    return FeatureSequence(video_id=seq.video_id, features=seq.features[:max_len].copy(),
                           mos=seq.mos)


# ---------------------------------------------------------------------------
# manifests and splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    feature_path: str  # relative to the manifest directory
    mos: float


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    scale_min: float
    scale_max: float
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        if self.scale_min >= self.scale_max:
            raise ValueError(f"scale_min {self.scale_min} must be < scale_max {self.scale_max}")
        seen = set()
        for e in self.entries:
            if e.video_id in seen:
                raise ValueError(f"duplicate video_id {e.video_id!r}")
            seen.add(e.video_id)
            if not self.scale_min <= e.mos <= self.scale_max:
                raise ValueError(f"mos {e.mos} of {e.video_id!r} outside "
                                 f"[{self.scale_min}, {self.scale_max}]")

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.feature_path


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(json.dumps({"scale_min": manifest.scale_min,
                             "scale_max": manifest.scale_max}, sort_keys=True) + "\n")
        for e in manifest.entries:
            fh.write(json.dumps({"video_id": e.video_id, "feature_path": e.feature_path,
                                 "mos": e.mos}, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError(f"empty manifest {path}")
    try:
        header = json.loads(lines[0])
        entries = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not line-delimited JSON: {exc}") from exc
    try:
        return DatasetManifest(
            entries=[ManifestEntry(e["video_id"], e["feature_path"], float(e["mos"]))
                     for e in entries],
            scale_min=float(header["scale_min"]),
            scale_max=float(header["scale_max"]),
            root=path.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest {path}: {exc}") from exc


def load_sequences(manifest: DatasetManifest, max_len: int | None = None) -> list[FeatureSequence]:
    seqs = []
    for e in manifest.entries:
        seq = read_features(manifest.resolve(e), mos=e.mos, video_id=e.video_id)
        if max_len is not None:
            seq = truncate(seq, max_len)
        seqs.append(seq)
    return seqs


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fr):
            raise ValueError(f"split fractions must be positive, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")


def split(manifest: DatasetManifest,
          spec: SplitSpec) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Seeded shuffle, then contiguous cuts at floor(train*n) and
    floor((train+val)*n). Deterministic, disjoint, covering."""
    n = len(manifest.entries)
    if n < 5:
        raise ValueError(f"split needs at least 5 entries, got {n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    cut1 = math.floor(spec.train_frac * n)
    cut2 = math.floor((spec.train_frac + spec.val_frac) * n)
    shuffled = [manifest.entries[i] for i in perm]

    def part(entries):
        return DatasetManifest(entries=list(entries), scale_min=manifest.scale_min,
                               scale_max=manifest.scale_max, root=manifest.root)

    return part(shuffled[:cut1]), part(shuffled[cut1:cut2]), part(shuffled[cut2:])


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synth_dataset(out_dir, n_videos: int = 500, len_range: tuple[int, int] = (60, 300),
                  dim: int = 64, noise_sigma: float = 0.1, seed: int = 0,
                  max_bursts: int = 2, burst_penalty_weight: float = 1.5,
                  scale: tuple[float, float] = (1.0, 5.0)) -> DatasetManifest:
    """Generate feature files plus a manifest, fully determined by ``seed``.

    Per video: latent quality q ~ U(scale); frames are q * w1 plus, inside
    up to ``max_bursts`` contiguous segments, an amplitude on a second unit
    direction w2 (localized distortion), plus N(0, noise_sigma^2) noise.
    MOS is q minus a penalty proportional to the mean burst amplitude,
    floored so it never leaves the scale: the construction is monotone in
    the effective (post-penalty) quality, which equals the MOS exactly.
    """
    if n_videos < 5:
        raise ValueError(f"synth_dataset needs n_videos >= 5, got {n_videos}")
    len_min, len_max = len_range
    if not 1 <= len_min <= len_max:
        raise ValueError(f"bad len_range {len_range}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    def unit(v):
        return v / np.linalg.norm(v)

    w1 = unit(rng.normal(size=dim))
    w2 = rng.normal(size=dim)
    w2 = unit(w2 - (w2 @ w1) * w1)  # orthogonal to the quality direction

    entries = []
    for i in range(n_videos):
        video_id = f"synth{i:05d}"
        n_frames = int(rng.integers(len_min, len_max + 1))
        q = float(rng.uniform(*scale))
        burst = np.zeros(n_frames)
        for _ in range(int(rng.integers(0, max_bursts + 1))):
            length = int(rng.integers(max(1, n_frames // 10), max(2, n_frames // 4 + 1)))
            start = int(rng.integers(0, n_frames - length + 1))
            amp = float(rng.uniform(0.5, 2.0))
            burst[start:start + length] = np.maximum(burst[start:start + length], amp)
        penalty = min(burst_penalty_weight * float(burst.mean()), q - scale[0])
        mos = q - penalty
        features = (q * w1[None, :] + burst[:, None] * w2[None, :]
                    + rng.normal(0.0, noise_sigma, (n_frames, dim)))
        seq = FeatureSequence(video_id=video_id,
                              features=features.astype(np.float32).astype(np.float64),
                              mos=mos)
        write_features(out_dir / f"{video_id}.dcvq", seq)
        entries.append(ManifestEntry(video_id, f"{video_id}.dcvq", mos))

    manifest = DatasetManifest(entries=entries, scale_min=scale[0], scale_max=scale[1],
                               root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def linear_probe(manifest: DatasetManifest, train_frac: float = 0.8,
                 ridge: float = 1e-3, seed: int = 0) -> float:
    """SRCC of a ridge regression on mean-pooled features, on held-out videos.

    A cheap learnability check for a dataset: if a linear probe cannot rank
    it, no amount of model training will.
    """
    seqs = load_sequences(manifest)
    x = np.stack([s.features.mean(axis=0) for s in seqs])
    y = np.array([s.mos for s in seqs])
    n = len(seqs)
    perm = np.random.default_rng(seed).permutation(n)
    cut = max(1, math.floor(train_frac * n))
    tr, te = perm[:cut], perm[cut:]
    if te.size < 2:
        raise ValueError(f"probe needs >= 2 held-out videos, got {te.size}")
    x_mean = x[tr].mean(axis=0)
    y_mean = y[tr].mean()
    xt = x[tr] - x_mean
    w = np.linalg.solve(xt.T @ xt + ridge * np.eye(x.shape[1]), xt.T @ (y[tr] - y_mean))
    pred = (x[te] - x_mean) @ w + y_mean
    return metrics.srcc(pred, y[te])

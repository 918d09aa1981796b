"""Synthetic micro-movement clips, the AUSEQ on-disk format, subject-wise
splitting, and cross-dataset label-space projection.

Each synthetic sample is a 6x64x64 clip: a per-subject smooth base face plus
one to three Gaussian intensity blobs planted in the facial regions of the
active action units, modulated over time by a rise-peak-decay envelope, plus
optional pixel noise. Everything derives from counter-based RNG streams
keyed by (seed, sample index), so generation is reproducible and
order-independent.

AUSEQ format: little-endian, magic "AUSQ", u32 version, u32 T/H/W, then
T*H*W float32 pixels. ``manifest.csv`` columns: sample_id, subject_id, then
one 0/1 column per AU id in ascending order (``au1,au2,...``).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError, ProtocolError, ValidationError
from .tensorcore import Rng

SUPPORTED_AUS = (1, 2, 4, 7, 12, 14, 15, 17)
FULL_AU_SET = (1, 2, 4, 7, 12, 14, 15, 17)   # 8-AU protocol
COMPACT_AU_SET = (2, 4, 7, 12)               # 4-AU protocol

FRAME_COUNT = 6
FRAME_SIZE = 64
ENVELOPE = (0.0, 0.3, 0.8, 1.0, 0.6, 0.2)    # onset-apex-offset weighting

AUSEQ_MAGIC = b"AUSQ"
AUSEQ_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

# Half-open pixel boxes (x0, y0, x1, y1) on the 64x64 grid; bilateral AUs
# carry mirror-symmetric left/right boxes about the vertical midline.
AU_REGIONS: dict[int, tuple[tuple[int, int, int, int], ...]] = {
    1: ((24, 12, 30, 18), (34, 12, 40, 18)),    # inner brow
    2: ((12, 12, 20, 18), (44, 12, 52, 18)),    # outer brow
    4: ((28, 18, 36, 24),),                     # glabella
    7: ((18, 28, 28, 33), (36, 28, 46, 33)),    # lower lid
    12: ((16, 44, 23, 50), (41, 44, 48, 50)),   # lip corners
    14: ((10, 40, 16, 46), (48, 40, 54, 46)),   # dimples
    15: ((18, 52, 25, 58), (39, 52, 46, 58)),   # below lip corners
    17: ((27, 56, 37, 62),),                    # chin
}


def au_region_mask(au: int, size: int = FRAME_SIZE) -> np.ndarray:
    """Boolean (H, W) union mask of the AU's region boxes."""
    if au not in AU_REGIONS:
        raise ValidationError(f"unsupported AU id {au}")
    mask = np.zeros((size, size), dtype=bool)
    for x0, y0, x1, y1 in AU_REGIONS[au]:
        mask[y0:y1, x0:x1] = True
    return mask


@dataclass
class SampleRecord:
    sample_id: str
    subject_id: str
    frames: np.ndarray        # (T, H, W) float32 in [0, 1]
    labels: np.ndarray        # (B,) uint8 multi-hot over the dataset AU set


@dataclass
class Dataset:
    au_ids: tuple[int, ...]
    records: list[SampleRecord]

    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})


@dataclass
class FoldSplit:
    held_out_subject: str
    train_ids: list[str]
    test_ids: list[str]


def _bilinear_upscale(field: np.ndarray, size: int) -> np.ndarray:
    src = field.shape[0]
    pos = np.arange(size) * (src - 1) / (size - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    rows = field[i0][:, i0] * np.outer(1 - frac, 1 - frac) \
        + field[i0][:, i1] * np.outer(1 - frac, frac) \
        + field[i1][:, i0] * np.outer(frac, 1 - frac) \
        + field[i1][:, i1] * np.outer(frac, frac)
    return rows


def _base_face(rng: Rng, size: int = FRAME_SIZE) -> np.ndarray:
    field = rng.uniform_np((8, 8))
    smooth = _bilinear_upscale(field, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    oval = np.clip(1.0 - ((xx - 32.0) / 26.0) ** 2 - ((yy - 34.0) / 30.0) ** 2, 0.0, 1.0)
    return np.clip(0.30 + 0.25 * smooth + 0.20 * oval, 0.0, 0.85)


def _au_blob(au: int, amplitude: float, size: int = FRAME_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    blob = np.zeros((size, size), dtype=np.float64)
    for x0, y0, x1, y1 in AU_REGIONS[au]:
        cx, cy = (x0 + x1 - 1) / 2.0, (y0 + y1 - 1) / 2.0
        sx, sy = max((x1 - x0) / 4.0, 1.0), max((y1 - y0) / 4.0, 1.0)
        blob += amplitude * np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
    return blob


def _draw_active_aus(rng: Rng, au_ids: Sequence[int],
                     weights: np.ndarray) -> np.ndarray:
    """Multi-hot draw with 1..3 active AUs, rates ~ proportional to weights.

    One Bernoulli draw with inclusion probabilities proportional to the
    weights; out-of-range counts are patched by weighted rank (u/p), which
    keeps marginal rates close to proportional without rejection bias.
    """
    max_active = min(3, len(au_ids))
    probs = np.clip(1.2 * weights / weights.sum(), 0.02, 0.9)
    u = rng.uniform_np((len(au_ids),))
    pick = float(rng.uniform_np(()))  # drawn unconditionally to keep streams aligned
    mask = u < probs
    k = int(mask.sum())
    if k == 0:
        cum = np.cumsum(weights / weights.sum())
        mask = np.zeros_like(mask)
        mask[int(np.searchsorted(cum, pick))] = True
    elif k > max_active:
        # active scores u/p are iid uniform, so this trims a random subset
        idx = np.nonzero(mask)[0]
        keep = idx[np.argsort(u[idx] / probs[idx])[:max_active]]
        mask = np.zeros_like(mask)
        mask[keep] = True
    return mask.astype(np.uint8)


def generate_synthetic(n_subjects: int, samples_per_subject: int,
                       au_set: Sequence[int] = FULL_AU_SET,
                       noise_sigma: float = 0.02,
                       imbalance_profile: Mapping[int, float] | None = None,
                       rng: Rng | None = None) -> Dataset:
    if rng is None:
        raise ValidationError("generate_synthetic requires an Rng")
    if n_subjects < 3:
        raise ValidationError(f"need at least 3 subjects, got {n_subjects}")
    if samples_per_subject < 1:
        raise ValidationError("samples_per_subject must be positive")
    au_ids = tuple(sorted(set(int(a) for a in au_set)))
    for au in au_ids:
        if au not in SUPPORTED_AUS:
            raise ValidationError(f"unsupported AU id {au} (supported: {SUPPORTED_AUS})")
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be >= 0")
    weights = np.array([float((imbalance_profile or {}).get(a, 1.0)) for a in au_ids])
    if (weights <= 0).any():
        raise ValidationError("imbalance weights must be positive")

    records: list[SampleRecord] = []
    for si in range(n_subjects):
        subject = f"s{si:02d}"
        base = _base_face(rng.derive(1, si))
        for k in range(samples_per_subject):
            sample_index = si * samples_per_subject + k
            srng = rng.derive(2, sample_index)
            labels = _draw_active_aus(srng, au_ids, weights)
            motion = np.zeros((FRAME_SIZE, FRAME_SIZE), dtype=np.float64)
            for j, au in enumerate(au_ids):
                if labels[j]:
                    amp = float(srng.uniform_np((), 0.35, 0.55))
                    motion += _au_blob(au, amp)
            frames = np.empty((FRAME_COUNT, FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
            for t in range(FRAME_COUNT):
                frame = base + ENVELOPE[t] * motion
                if noise_sigma > 0:
                    frame = frame + srng.normal_np((FRAME_SIZE, FRAME_SIZE), 0.0, noise_sigma)
                frames[t] = np.clip(frame, 0.0, 1.0).astype(np.float32)
            records.append(SampleRecord(
                sample_id=f"{subject}_{k:03d}", subject_id=subject,
                frames=frames, labels=labels))
    return Dataset(au_ids=au_ids, records=records)


# --------------------------------------------------------------------------
# AUSEQ serialization


def save_dataset(ds: Dataset, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "subject_id"] + [f"au{a}" for a in ds.au_ids])
        for rec in ds.records:
            writer.writerow([rec.sample_id, rec.subject_id] + [int(v) for v in rec.labels])
    for rec in ds.records:
        t, h, w = rec.frames.shape
        payload = rec.frames.astype("<f4").tobytes()
        with open(root / f"{rec.sample_id}.auseq", "wb") as fh:
            fh.write(_HEADER.pack(AUSEQ_MAGIC, AUSEQ_VERSION, t, h, w))
            fh.write(payload)


def _load_sequence(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", str(path), len(raw))
    magic, version, t, h, w = _HEADER.unpack_from(raw, 0)
    if magic != AUSEQ_MAGIC:
        raise FormatError(f"bad magic {magic!r}", str(path), 0)
    if version != AUSEQ_VERSION:
        raise FormatError(f"unsupported version {version}", str(path), 4)
    expected = _HEADER.size + 4 * t * h * w
    if len(raw) != expected:
        raise FormatError(f"payload length {len(raw) - _HEADER.size} != expected {4 * t * h * w}",
                          str(path), min(len(raw), expected))
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, h, w)
    return frames.copy()  # frombuffer views are read-only


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise FormatError("manifest.csv not found", str(manifest))
    with open(manifest, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError("empty manifest", str(manifest), 0)
    header = rows[0]
    if header[:2] != ["sample_id", "subject_id"] or len(header) < 3:
        raise FormatError(f"manifest header must start with sample_id,subject_id,au..., got {header}",
                          str(manifest), 0)
    au_ids = []
    for col in header[2:]:
        if not col.startswith("au") or not col[2:].isdigit():
            raise FormatError(f"bad label column {col!r}", str(manifest), 0)
        au_ids.append(int(col[2:]))
    if au_ids != sorted(au_ids) or len(set(au_ids)) != len(au_ids):
        raise FormatError(f"label columns must be unique and ascending, got {au_ids}",
                          str(manifest), 0)

    records: list[SampleRecord] = []
    seen: set[str] = set()
    shape: tuple[int, int, int] | None = None
    for row in rows[1:]:
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(f"row width {len(row)} != header width {len(header)} "
                              f"(sample {row[0] if row else '?'})", str(manifest))
        sample_id, subject_id = row[0], row[1]
        if not sample_id or sample_id in seen:
            raise FormatError(f"missing or duplicate sample_id {sample_id!r}", str(manifest))
        seen.add(sample_id)
        if not subject_id:
            raise FormatError(f"unknown subject for sample {sample_id}", str(manifest))
        try:
            labels = np.array([int(v) for v in row[2:]], dtype=np.int64)
        except ValueError:
            raise FormatError(f"non-integer label for sample {sample_id}", str(manifest)) from None
        if not np.isin(labels, (0, 1)).all():
            raise FormatError(f"labels must be 0/1 for sample {sample_id}", str(manifest))
        if labels.sum() == 0:
            raise FormatError(f"sample {sample_id} has no positive label", str(manifest))
        seq_path = root / f"{sample_id}.auseq"
        if not seq_path.is_file():
            raise FormatError(f"sequence file missing for sample {sample_id}", str(seq_path))
        frames = _load_sequence(seq_path)
        if shape is None:
            shape = frames.shape
        elif frames.shape != shape:
            raise FormatError(f"dimension mismatch {frames.shape} != {shape} "
                              f"(sample {sample_id})", str(seq_path), 4)
        if not np.isfinite(frames).all() or frames.min() < 0.0 or frames.max() > 1.0:
            raise FormatError(f"pixel values outside [0, 1] for sample {sample_id}",
                              str(seq_path), _HEADER.size)
        records.append(SampleRecord(sample_id=sample_id, subject_id=subject_id,
                                    frames=frames, labels=labels.astype(np.uint8)))
    if not records:
        raise FormatError("manifest lists no samples", str(manifest))
    return Dataset(au_ids=tuple(au_ids), records=records)


# --------------------------------------------------------------------------
# Protocol plumbing


def loso_split(records: list[SampleRecord]) -> list[FoldSplit]:
    """One fold per subject, ordered by subject id; partition is asserted."""
    subjects = sorted({r.subject_id for r in records})
    if len(subjects) < 2:
        raise ProtocolError(f"leave-one-subject-out needs >= 2 subjects, got {len(subjects)}")
    folds = []
    for subject in subjects:
        test = [r.sample_id for r in records if r.subject_id == subject]
        train = [r.sample_id for r in records if r.subject_id != subject]
        folds.append(FoldSplit(held_out_subject=subject, train_ids=train, test_ids=test))
    assert_partition(records, folds)
    return folds


def assert_partition(records: list[SampleRecord], folds: list[FoldSplit]) -> None:
    """Coverage, disjointness and zero subject leakage; raises ProtocolError."""
    all_ids = {r.sample_id for r in records}
    by_id = {r.sample_id: r for r in records}
    covered: set[str] = set()
    for fold in folds:
        test = set(fold.test_ids)
        train = set(fold.train_ids)
        if train & test:
            raise ProtocolError(f"fold {fold.held_out_subject}: train/test overlap")
        if train | test != all_ids:
            raise ProtocolError(f"fold {fold.held_out_subject}: does not cover the dataset")
        for sid in test:
            if by_id[sid].subject_id != fold.held_out_subject:
                raise ProtocolError(f"fold {fold.held_out_subject}: foreign test sample {sid}")
        for sid in train:
            if by_id[sid].subject_id == fold.held_out_subject:
                raise ProtocolError(f"fold {fold.held_out_subject}: held-out subject leaked into train")
        if covered & test:
            raise ProtocolError("a sample is tested in more than one fold")
        covered |= test
    if covered != all_ids:
        raise ProtocolError("folds do not jointly test every sample exactly once")


def map_label_space(ds: Dataset, target_au_set: Sequence[int]) -> tuple[Dataset, int]:
    """Project labels onto the shared AU subset (ascending ids).

    Samples whose labels become all-zero are kept as pure negatives; their
    count is returned alongside the projected dataset.
    """
    target = set(int(a) for a in target_au_set)
    shared = sorted(set(ds.au_ids) & target)
    if not shared:
        raise ProtocolError(f"label spaces do not intersect: {ds.au_ids} vs {sorted(target)}")
    cols = [ds.au_ids.index(a) for a in shared]
    zeroed = 0
    out = []
    for rec in ds.records:
        labels = rec.labels[cols].copy()
        if labels.sum() == 0:
            zeroed += 1
        out.append(SampleRecord(sample_id=rec.sample_id, subject_id=rec.subject_id,
                                frames=rec.frames, labels=labels))
    return Dataset(au_ids=tuple(shared), records=out), zeroed

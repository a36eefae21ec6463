"""Dataset ingestion: manifests, eye-landmark face alignment, protocol splits.

No face detection happens here. Manifests carry eye landmarks per sample;
faces are aligned with a two-point similarity transform onto canonical eye
coordinates and cropped to 224x224.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .imgio import load_png, to_float

FACE_SIZE = 224
# Canonical eye centers in the 224x224 aligned frame: ~40% inter-ocular
# width, eyes on the upper-middle line. Fixed here so runs are reproducible.
CANONICAL_LEFT_EYE = (67.0, 92.0)
CANONICAL_RIGHT_EYE = (157.0, 92.0)

LABELS = ("bona_fide", "attack")
SPLITS = ("train", "dev", "test")

MANIFEST_COLUMNS = [
    "sample_id",
    "media_path",
    "frame_index",
    "subject_id",
    "label",
    "pai",
    "split",
    "fold_id",
    "left_eye_x",
    "left_eye_y",
    "right_eye_x",
    "right_eye_y",
]

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class ManifestError(ValueError):
    """Raised for unreadable or invariant-violating manifests."""


class AlignmentError(ValueError):
    """Raised for degenerate or out-of-bounds eye landmarks."""


class ProtocolError(ValueError):
    """Raised for unknown protocols or unusable protocol configs."""


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    media_path: str
    frame_index: int
    subject_id: str
    label: str
    pai: str
    split: str
    fold_id: int | None
    left_eye: tuple[float, float]
    right_eye: tuple[float, float]


@dataclass
class DatasetManifest:
    dataset_name: str
    records: list[SampleRecord]
    pai_vocabulary: list[str]


@dataclass
class AlignedFace:
    """A 224x224x3 float32 face crop in [0,1] plus its sample metadata."""

    pixels: np.ndarray
    label: str
    pai: str
    subject_id: str
    sample_id: str


@dataclass
class ProtocolSplit:
    train: list[SampleRecord]
    dev: list[SampleRecord]
    test: list[SampleRecord]
    fold_id: int | None = None


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest CSV and validate all record invariants.

    Relative media paths are resolved against the manifest's directory.
    Raises ManifestError naming the offending row for malformed rows,
    duplicate sample ids, or unknown split labels.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    root = path.parent
    records: list[SampleRecord] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if set(header) != set(MANIFEST_COLUMNS):
            raise ManifestError(
                f"{path}: bad header {header!r}, expected columns {MANIFEST_COLUMNS}"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = _parse_row(row, root)
            except ManifestError:
                raise
            except Exception as exc:
                raise ManifestError(f"{path}:{lineno}: malformed row: {exc}") from exc
            if rec.split not in SPLITS:
                raise ManifestError(
                    f"{path}:{lineno}: unknown split label {rec.split!r}"
                )
            if rec.label not in LABELS:
                raise ManifestError(f"{path}:{lineno}: unknown label {rec.label!r}")
            if rec.label == "attack" and rec.pai in ("", "none"):
                raise ManifestError(
                    f"{path}:{lineno}: attack row {rec.sample_id!r} has no PAI tag"
                )
            if rec.label == "bona_fide" and rec.pai != "none":
                raise ManifestError(
                    f"{path}:{lineno}: bona fide row {rec.sample_id!r} carries PAI "
                    f"tag {rec.pai!r}"
                )
            if rec.left_eye[0] >= rec.right_eye[0]:
                raise ManifestError(
                    f"{path}:{lineno}: eyes out of order for {rec.sample_id!r} "
                    "(left_eye_x must be < right_eye_x)"
                )
            if rec.frame_index < 0:
                raise ManifestError(
                    f"{path}:{lineno}: negative frame_index for {rec.sample_id!r}"
                )
            if rec.sample_id in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate sample_id {rec.sample_id!r}"
                )
            seen.add(rec.sample_id)
            records.append(rec)
    vocab = sorted({r.pai for r in records if r.label == "attack"})
    return DatasetManifest(dataset_name=path.stem, records=records, pai_vocabulary=vocab)


def _parse_row(row: dict, root: Path) -> SampleRecord:
    media = row["media_path"].strip()
    media_path = media if Path(media).is_absolute() else str(root / media)
    pai = row["pai"].strip()
    if row["label"].strip() == "bona_fide" and pai == "":
        pai = "none"
    fold_raw = (row.get("fold_id") or "").strip()
    return SampleRecord(
        sample_id=row["sample_id"].strip(),
        media_path=media_path,
        frame_index=int(row["frame_index"]),
        subject_id=row["subject_id"].strip(),
        label=row["label"].strip(),
        pai=pai,
        split=row["split"].strip(),
        fold_id=int(fold_raw) if fold_raw else None,
        left_eye=(float(row["left_eye_x"]), float(row["left_eye_y"])),
        right_eye=(float(row["right_eye_x"]), float(row["right_eye_y"])),
    )


def align_face(image: np.ndarray, left_eye, right_eye) -> np.ndarray:
    """Align a face so the eyes land on the canonical coordinates.

    Args:
        image: HxWx3 array, uint8 or float in [0,1].
        left_eye: (x, y) of the viewer-left eye in image coordinates.
        right_eye: (x, y) of the viewer-right eye.

    Returns:
        224x224x3 float32 array in [0,1]. The unique similarity transform
        (rotation + uniform scale + translation) mapping the two eye points
        onto the canonical pair is applied with bilinear interpolation;
        pixels pulled from outside the source are zero.
    """
    img = to_float(np.asarray(image))
    if img.ndim != 3 or img.shape[2] != 3:
        raise AlignmentError(f"expected HxWx3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    for name, (x, y) in (("left_eye", left_eye), ("right_eye", right_eye)):
        if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
            raise AlignmentError(f"{name} ({x}, {y}) outside image bounds {w}x{h}")
    src_l = complex(left_eye[0], left_eye[1])
    src_r = complex(right_eye[0], right_eye[1])
    if abs(src_r - src_l) < 1e-6:
        raise AlignmentError("degenerate landmarks: eye points coincide")
    dst_l = complex(*CANONICAL_LEFT_EYE)
    dst_r = complex(*CANONICAL_RIGHT_EYE)
    # Two point pairs pin down the similarity exactly: z -> a*z + b.
    a = (dst_r - dst_l) / (src_r - src_l)
    b = dst_l - a * src_l
    matrix = np.array(
        [[a.real, -a.imag, b.real], [a.imag, a.real, b.imag]], dtype=np.float64
    )
    out = cv2.warpAffine(
        img,
        matrix,
        (FACE_SIZE, FACE_SIZE),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0.0,
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32, copy=False)


def load_frame(media_path, frame_index: int) -> np.ndarray:
    """Reference frame extractor: directory-of-images or a single image file.

    A directory is treated as a video whose frames are its image files in
    sorted name order; ``frame_index`` selects one. A plain image file only
    has frame 0.
    """
    path = Path(media_path)
    if path.is_dir():
        frames = sorted(
            p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not 0 <= frame_index < len(frames):
            raise ManifestError(
                f"frame_index {frame_index} out of range for {path} "
                f"({len(frames)} frames)"
            )
        return load_png(frames[frame_index])
    if path.is_file():
        if frame_index != 0:
            raise ManifestError(
                f"frame_index {frame_index} requested but {path} is a single image"
            )
        return load_png(path)
    raise ManifestError(f"media not found: {path}")


def aligned_face_for(record: SampleRecord, frame_loader=load_frame) -> AlignedFace:
    """Extract the record's frame and align it. Pure; safe to parallelize."""
    frame = frame_loader(record.media_path, record.frame_index)
    pixels = align_face(frame, record.left_eye, record.right_eye)
    return AlignedFace(
        pixels=pixels,
        label=record.label,
        pai=record.pai,
        subject_id=record.subject_id,
        sample_id=record.sample_id,
    )


def limit_frames_per_video(records: list[SampleRecord], n: int | None) -> list[SampleRecord]:
    """Keep at most n frames (lowest frame_index first) per media_path."""
    if n is None:
        return list(records)
    if n <= 0:
        raise ValueError("frames_per_video must be positive")
    order = {id(r): i for i, r in enumerate(records)}
    by_media: dict[str, list[SampleRecord]] = {}
    for rec in records:
        by_media.setdefault(rec.media_path, []).append(rec)
    keep: set[str] = set()
    for group in by_media.values():
        for rec in sorted(group, key=lambda r: r.frame_index)[:n]:
            keep.add(rec.sample_id)
    return [r for r in records if r.sample_id in keep]


# --- protocol configuration -------------------------------------------------
#
# A protocol config is a JSON object mapping protocol names to:
#   {
#     "filter": {column: value-or-list},   # keep records matching all entries
#     "train":  {column: value-or-list},   # extra predicate per destination
#     "dev":    {...}, "test": {...},
#     "fold_column": "fold_id"             # optional: leave-one-fold-out
#   }
# All keys are optional; {} is a pass-through on the manifest's split column.

_PREDICATE_COLUMNS = {
    "sample_id",
    "media_path",
    "frame_index",
    "subject_id",
    "label",
    "pai",
    "split",
    "fold_id",
}


@dataclass
class ProtocolSpec:
    name: str
    filter: dict
    per_split: dict
    fold_column: str | None = None


def load_protocol_config(path) -> dict[str, ProtocolSpec]:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ProtocolError(f"{path}: protocol config must be a JSON object")
    return {name: _parse_protocol(name, body) for name, body in raw.items()}


def default_protocol_config() -> dict[str, ProtocolSpec]:
    """Single pass-through protocol mapping the manifest's split column."""
    return {"grandtest": ProtocolSpec("grandtest", {}, {})}


def _parse_protocol(name: str, body: dict) -> ProtocolSpec:
    if not isinstance(body, dict):
        raise ProtocolError(f"protocol {name!r}: body must be an object")
    known = {"filter", "train", "dev", "test", "fold_column"}
    unknown = set(body) - known
    if unknown:
        raise ProtocolError(f"protocol {name!r}: unknown keys {sorted(unknown)}")
    per_split = {}
    for split in SPLITS:
        if split in body:
            per_split[split] = _normalize_predicate(name, body[split])
    return ProtocolSpec(
        name=name,
        filter=_normalize_predicate(name, body.get("filter", {})),
        per_split=per_split,
        fold_column=body.get("fold_column"),
    )


def _normalize_predicate(name: str, pred: dict) -> dict:
    if not isinstance(pred, dict):
        raise ProtocolError(f"protocol {name!r}: predicate must be an object")
    out = {}
    for col, allowed in pred.items():
        if col not in _PREDICATE_COLUMNS:
            raise ProtocolError(f"protocol {name!r}: unknown column {col!r}")
        values = allowed if isinstance(allowed, list) else [allowed]
        out[col] = {str(v) for v in values}
    return out


def _matches(record: SampleRecord, predicate: dict) -> bool:
    for col, allowed in predicate.items():
        value = getattr(record, col)
        if str(value) not in allowed:
            return False
    return True


def split_protocol(manifest: DatasetManifest, protocol_name: str, protocol_config):
    """Materialize a protocol's train/dev/test partition.

    Returns a single ProtocolSplit for plain protocols. For leave-one-out
    protocols (``fold_column`` set) returns one ProtocolSplit per fold value:
    the held-out fold is the whole test set; train/dev come from the other
    folds via the manifest's split column.
    """
    if protocol_name not in protocol_config:
        raise ProtocolError(f"unknown protocol {protocol_name!r}")
    spec = protocol_config[protocol_name]
    selected = [r for r in manifest.records if _matches(r, spec.filter)]

    def take(records, split):
        pred = spec.per_split.get(split, {})
        return [r for r in records if r.split == split and _matches(r, pred)]

    if spec.fold_column is None:
        return ProtocolSplit(
            train=take(selected, "train"),
            dev=take(selected, "dev"),
            test=take(selected, "test"),
        )

    if spec.fold_column != "fold_id":
        raise ProtocolError(
            f"protocol {protocol_name!r}: unsupported fold column {spec.fold_column!r}"
        )
    folds = sorted({r.fold_id for r in selected if r.fold_id is not None})
    if not folds:
        raise ProtocolError(
            f"protocol {protocol_name!r} requests folds but records carry no fold_id"
        )
    result = []
    for fold in folds:
        held_out = [r for r in selected if r.fold_id == fold]
        rest = [r for r in selected if r.fold_id != fold]
        test_pred = spec.per_split.get("test", {})
        result.append(
            ProtocolSplit(
                train=take(rest, "train"),
                dev=take(rest, "dev"),
                test=[r for r in held_out if _matches(r, test_pred)],
                fold_id=fold,
            )
        )
    return result

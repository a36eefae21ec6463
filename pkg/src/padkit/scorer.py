"""Test-time scoring: plain aligned faces in, liveness scores out.

The liveness score of a frame is the arithmetic mean of the model's 14x14
probability map. A sample is classified bona fide iff its score is strictly
greater than the decision threshold.
"""

import contextlib
import csv
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .ingest import AlignedFace


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    subject_id: str
    score: float
    label: str
    pai: str


SCORE_COLUMNS = ["sample_id", "subject_id", "score", "label", "pai"]


@contextlib.contextmanager
def _inference(model):
    was_training = model.training
    model.eval()
    with torch.no_grad():
        yield
    model.train(was_training)


def _pixels(face) -> np.ndarray:
    return face.pixels if isinstance(face, AlignedFace) else np.asarray(face)


def score_frame(model, face) -> float:
    """Mean of the 196 probability-map entries for one aligned face."""
    return score_faces(model, [face])[0]


def score_faces(model, faces, batch_size: int = 32) -> list[float]:
    """Score many faces in inference mode; batching does not change results."""
    scores: list[float] = []
    with _inference(model):
        for start in range(0, len(faces), batch_size):
            chunk = faces[start : start + batch_size]
            batch = np.stack([_pixels(f) for f in chunk]).transpose(0, 3, 1, 2)
            maps = model(torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32)))
            scores.extend(float(m) for m in maps.mean(dim=(1, 2)))
    return scores


def classify(score: float, threshold: float) -> str:
    """bona_fide iff score is strictly above the threshold."""
    return "bona_fide" if score > threshold else "attack"


def score_video(model, frames, aggregation: str = "mean") -> float:
    """Aggregate per-frame scores of one video; mean is the default."""
    if not frames:
        raise ValueError("empty frame list")
    scores = score_faces(model, list(frames))
    return aggregate_scores(scores, aggregation)


def aggregate_scores(scores, aggregation: str = "mean") -> float:
    if not scores:
        raise ValueError("empty score list")
    if aggregation == "mean":
        return float(np.mean(scores))
    if aggregation == "median":
        return float(statistics.median(scores))
    raise ValueError(f"unknown aggregation {aggregation!r}")


def write_scores(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_COLUMNS)
        for r in records:
            writer.writerow([r.sample_id, r.subject_id, repr(r.score), r.label, r.pai])
    return path


def read_scores(path) -> list[ScoreRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if set(reader.fieldnames or []) != set(SCORE_COLUMNS):
            raise ValueError(f"{path}: expected columns {SCORE_COLUMNS}")
        for row in reader:
            records.append(
                ScoreRecord(
                    sample_id=row["sample_id"],
                    subject_id=row["subject_id"],
                    score=float(row["score"]),
                    label=row["label"],
                    pai=row["pai"],
                )
            )
    return records

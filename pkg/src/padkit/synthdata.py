"""Deterministic synthetic face-PAD corpus for end-to-end testing.

Bona fide frames are smooth per-subject blob "faces" (low-frequency cosine
mixtures plus mild noise). Attack frames are the *same scene* plus a
periodic high-frequency grid whose amplitude is ``texture_strength`` — a
crude moiré/print-raster surrogate covering the whole face, so every 32x32
patch is individually class-informative. Eye landmarks sit exactly on the
canonical alignment coordinates, making alignment an identity crop.

``generate_pair`` emits a second domain with a flat illumination offset
(``domain_shift``) and a different background wave while keeping the attack
texture law identical, which supports cross-domain experiments where the
artefact cue is domain-invariant by construction.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imgio import save_png
from .ingest import CANONICAL_LEFT_EYE, CANONICAL_RIGHT_EYE, FACE_SIZE, MANIFEST_COLUMNS
from .seeds import derive_rng

GRID_PERIOD = 4  # pixels; high-frequency relative to the 32px patch size

# per-PAI weight of the vertical-stripe vs horizontal-stripe component
_PAI_MIX = {"print": (0.6, 0.4), "replay": (0.4, 0.6)}
_DEFAULT_MIX = (0.5, 0.5)


@dataclass
class SynthConfig:
    out_dir: str | Path
    n_subjects: int = 20
    frames_per_subject: int = 4
    attack_pais: tuple = ("print", "replay")
    texture_strength: float = 0.3
    domain_shift: float = 0.0
    seed: int = 7
    dataset_name: str = "synth"

    def validate(self):
        if self.n_subjects < 3:
            raise ValueError("n_subjects must be >= 3 for subject-disjoint splits")
        if self.frames_per_subject < 1:
            raise ValueError("frames_per_subject must be positive")
        if not self.attack_pais:
            raise ValueError("need at least one attack PAI")
        if not np.isfinite(self.texture_strength) or self.texture_strength < 0:
            raise ValueError("texture_strength must be finite and >= 0")
        if not np.isfinite(self.domain_shift) or self.domain_shift < 0:
            raise ValueError("domain_shift must be finite and >= 0")


def _subject_splits(n_subjects: int) -> list[str]:
    n_train = max(1, round(0.5 * n_subjects))
    n_dev = max(1, round(0.25 * n_subjects))
    while n_train + n_dev >= n_subjects:
        if n_dev > 1:
            n_dev -= 1
        else:
            n_train -= 1
    splits = ["train"] * n_train + ["dev"] * n_dev
    splits += ["test"] * (n_subjects - len(splits))
    return splits


def _coords():
    y, x = np.meshgrid(
        np.arange(FACE_SIZE, dtype=np.float32),
        np.arange(FACE_SIZE, dtype=np.float32),
        indexing="ij",
    )
    return y, x


def _gaussian_spot(y, x, cy, cx, sigma, depth):
    return -depth * np.exp(-(((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * sigma**2)))


def _subject_base(rng, y, x):
    """Smooth per-subject luminance field, bounded away from 0 and 1."""
    base = np.full((FACE_SIZE, FACE_SIZE), 0.32, dtype=np.float32)
    amps = rng.uniform(0.02, 0.06, size=3)
    amps *= 0.12 / amps.sum()
    for amp in amps:
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        base += amp * np.cos(
            2 * np.pi * (fy * y + fx * x) / FACE_SIZE + phase
        ).astype(np.float32)
    # face-ish smooth features: eye spots and a mouth blob
    for (ex, ey) in (CANONICAL_LEFT_EYE, CANONICAL_RIGHT_EYE):
        base += _gaussian_spot(y, x, ey, ex, sigma=6.0, depth=0.08).astype(np.float32)
    base += _gaussian_spot(y, x, 160.0, 112.0, sigma=10.0, depth=0.05).astype(np.float32)
    tint = rng.uniform(-0.03, 0.03, size=3).astype(np.float32)
    return base, tint


def _grid_pattern(y, x, strength, pai, rng):
    w_col, w_row = _PAI_MIX.get(pai, _DEFAULT_MIX)
    p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
    wave = w_col * np.sin(2 * np.pi * x / GRID_PERIOD + p1) + w_row * np.sin(
        2 * np.pi * y / GRID_PERIOD + p2
    )
    return (strength * wave).astype(np.float32)


def _domain_background(y, x, domain_index: int, seed: int):
    if domain_index == 0:
        return np.float32(0.0)
    rng = derive_rng(seed, "domain-bg", domain_index)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.02 * np.cos(2 * np.pi * (x + y) / 112.0 + phase)
    return wave.astype(np.float32)


def _render_scene(seed, domain_index, shift, subject_idx, frame_idx, y, x, base, tint):
    rng = derive_rng(seed, "scene", domain_index, subject_idx, frame_idx)
    illum = rng.uniform(-0.02, 0.02)
    noise = rng.normal(0.0, 0.01, size=(FACE_SIZE, FACE_SIZE)).astype(np.float32)
    lum = base + np.float32(illum) + noise + np.float32(shift)
    lum = lum + _domain_background(y, x, domain_index, seed)
    return lum[..., None] + tint[None, None, :]


def generate(config: SynthConfig, domain_index: int = 0, shift: float | None = None) -> Path:
    """Write the PNG tree and manifest CSV; returns the manifest path.

    Fully deterministic for a fixed seed: every image derives its own RNG
    substream from (seed, domain, subject, frame), so per-subject
    parallelization cannot change the output.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shift = config.domain_shift if shift is None else shift
    y, x = _coords()
    splits = _subject_splits(config.n_subjects)

    rows = []
    for subject_idx in range(config.n_subjects):
        subject_id = f"s{subject_idx:03d}"
        subject_rng = derive_rng(config.seed, "subject", domain_index, subject_idx)
        base, tint = _subject_base(subject_rng, y, x)
        for frame_idx in range(config.frames_per_subject):
            scene = _render_scene(
                config.seed, domain_index, shift, subject_idx, frame_idx, y, x, base, tint
            )
            variants = [("bona_fide", "none", scene)]
            for pai_idx, pai in enumerate(config.attack_pais):
                grid_rng = derive_rng(
                    config.seed, "grid", domain_index, subject_idx, frame_idx, pai_idx
                )
                grid = _grid_pattern(y, x, config.texture_strength, pai, grid_rng)
                variants.append(("attack", pai, scene + grid[..., None]))
            for label, pai, image in variants:
                tag = "bona_fide" if label == "bona_fide" else pai
                rel = Path("images") / subject_id / f"f{frame_idx:02d}_{tag}.png"
                save_png(out_dir / rel, np.clip(image, 0.0, 1.0))
                rows.append(
                    {
                        "sample_id": f"{config.dataset_name}-{subject_id}-f{frame_idx:02d}-{tag}",
                        "media_path": rel.as_posix(),
                        "frame_index": 0,
                        "subject_id": subject_id,
                        "label": label,
                        "pai": pai if label == "attack" else "none",
                        "split": splits[subject_idx],
                        "fold_id": "",
                        "left_eye_x": CANONICAL_LEFT_EYE[0],
                        "left_eye_y": CANONICAL_LEFT_EYE[1],
                        "right_eye_x": CANONICAL_RIGHT_EYE[0],
                        "right_eye_y": CANONICAL_RIGHT_EYE[1],
                    }
                )

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return manifest_path


def generate_pair(config: SynthConfig) -> tuple[Path, Path]:
    """Two corpora: domain A (no shift) and domain B (config.domain_shift)."""
    config.validate()
    root = Path(config.out_dir)
    cfg_a = SynthConfig(
        **{**config.__dict__, "out_dir": root / "domain_a", "dataset_name": f"{config.dataset_name}-a"}
    )
    cfg_b = SynthConfig(
        **{**config.__dict__, "out_dir": root / "domain_b", "dataset_name": f"{config.dataset_name}-b"}
    )
    manifest_a = generate(cfg_a, domain_index=0, shift=0.0)
    manifest_b = generate(cfg_b, domain_index=1, shift=config.domain_shift)
    return manifest_a, manifest_b

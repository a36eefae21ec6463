"""Patch decomposition, stitching, label maps, and label-aware augmentation.

An aligned 224x224 face splits into a 7x7 grid of 32x32 patches. Composite
training images are stitched from patches of multiple source faces; each
patch owns a 2x2 block of the 14x14 binary label map (1 = bona fide,
0 = attack). Stitching is either fully random (source position ignored) or
controlled (source position preserved, so the result still looks face-like).
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imgio import save_png
from .ingest import FACE_SIZE, AlignedFace

GRID = 7
PATCH = 32
MAP_SIZE = 14


class StitchError(ValueError):
    """Raised when a stitch request cannot be satisfied by the pool."""


@dataclass(frozen=True)
class PatchRef:
    source_sample_id: str
    grid_row: int
    grid_col: int
    label: str


@dataclass
class PatchGrid:
    patches: np.ndarray  # (7, 7, 32, 32, 3) float32
    refs: list  # 7x7 nested lists of PatchRef
    label: str
    sample_id: str


@dataclass
class StitchedSample:
    pixels: np.ndarray  # (224, 224, 3) float32 in [0,1]
    label_map: np.ndarray  # (14, 14) uint8 in {0,1}
    provenance: list  # 7x7 nested lists of PatchRef


@dataclass(frozen=True)
class StitchPolicy:
    """Per-slot class mix: each slot is bona fide with this probability."""

    bona_fide_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.bona_fide_fraction <= 1.0:
            raise ValueError(
                f"bona_fide_fraction must be in [0,1], got {self.bona_fide_fraction}"
            )


@dataclass(frozen=True)
class AugmentConfig:
    """Horizontal flip probability plus color jitter half-ranges.

    A jitter value r draws the multiplicative factor from
    [max(0, 1-r), 1+r]; 0 disables that component exactly.
    """

    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        for name in ("brightness", "contrast", "saturation"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} jitter range must be finite and >= 0")


def decompose(face: AlignedFace) -> PatchGrid:
    """Split a 224x224 face into its 49 patches with provenance refs."""
    pixels = face.pixels
    if pixels.shape != (FACE_SIZE, FACE_SIZE, 3):
        raise ValueError(f"expected {FACE_SIZE}x{FACE_SIZE}x3 face, got {pixels.shape}")
    patches = (
        pixels.reshape(GRID, PATCH, GRID, PATCH, 3).transpose(0, 2, 1, 3, 4).copy()
    )
    refs = [
        [PatchRef(face.sample_id, r, c, face.label) for c in range(GRID)]
        for r in range(GRID)
    ]
    return PatchGrid(patches=patches, refs=refs, label=face.label, sample_id=face.sample_id)


def assemble(patches_by_slot) -> np.ndarray:
    """Inverse of decompose: place a 7x7 grid of patches into one image."""
    out = np.empty((FACE_SIZE, FACE_SIZE, 3), dtype=np.float32)
    for r in range(GRID):
        for c in range(GRID):
            out[r * PATCH : (r + 1) * PATCH, c * PATCH : (c + 1) * PATCH] = (
                patches_by_slot[r][c]
            )
    return out


def make_label_map(provenance) -> np.ndarray:
    """14x14 map where each patch's 2x2 block is 1 (bona fide) or 0 (attack)."""
    labels = np.array(
        [[1 if provenance[r][c].label == "bona_fide" else 0 for c in range(GRID)]
         for r in range(GRID)],
        dtype=np.uint8,
    )
    return np.repeat(np.repeat(labels, 2, axis=0), 2, axis=1)


def _class_indices(pool, policy):
    bona = [i for i, g in enumerate(pool) if g.label == "bona_fide"]
    attack = [i for i, g in enumerate(pool) if g.label == "attack"]
    if not pool:
        raise StitchError("empty patch pool")
    if policy.bona_fide_fraction > 0.0 and not bona:
        raise StitchError("policy requires bona fide patches but pool has none")
    if policy.bona_fide_fraction < 1.0 and not attack:
        raise StitchError("policy requires attack patches but pool has none")
    return bona, attack


def _draw_slot(rng, policy, bona, attack):
    frac = policy.bona_fide_fraction
    if frac >= 1.0:
        use_bona = True
    elif frac <= 0.0:
        use_bona = False
    else:
        use_bona = rng.random() < frac
    candidates = bona if use_bona else attack
    return candidates[rng.integers(len(candidates))]


def stitch_random(pool, rng: np.random.Generator, policy: StitchPolicy) -> StitchedSample:
    """Stitch 49 patches drawn from random (source face, source position) pairs.

    Facial structure is ignored: any source position may land in any slot, and
    sampling is with replacement, so repeated face parts are expected.
    """
    bona, attack = _class_indices(pool, policy)
    slots = [[None] * GRID for _ in range(GRID)]
    provenance = [[None] * GRID for _ in range(GRID)]
    for r in range(GRID):
        for c in range(GRID):
            gi = _draw_slot(rng, policy, bona, attack)
            sr = int(rng.integers(GRID))
            sc = int(rng.integers(GRID))
            slots[r][c] = pool[gi].patches[sr, sc]
            provenance[r][c] = pool[gi].refs[sr][sc]
    return StitchedSample(
        pixels=assemble(slots),
        label_map=make_label_map(provenance),
        provenance=provenance,
    )


def stitch_controlled(pool, rng: np.random.Generator, policy: StitchPolicy) -> StitchedSample:
    """Stitch position-preserving: slot (r,c) only takes a source patch (r,c)."""
    bona, attack = _class_indices(pool, policy)
    slots = [[None] * GRID for _ in range(GRID)]
    provenance = [[None] * GRID for _ in range(GRID)]
    for r in range(GRID):
        for c in range(GRID):
            gi = _draw_slot(rng, policy, bona, attack)
            slots[r][c] = pool[gi].patches[r, c]
            provenance[r][c] = pool[gi].refs[r][c]
    return StitchedSample(
        pixels=assemble(slots),
        label_map=make_label_map(provenance),
        provenance=provenance,
    )


STITCHERS = {"random": stitch_random, "controlled": stitch_controlled}


def identity_sample(grid: PatchGrid) -> StitchedSample:
    """A face reassembled from its own patches in place (uniform label map)."""
    provenance = [[grid.refs[r][c] for c in range(GRID)] for r in range(GRID)]
    return StitchedSample(
        pixels=assemble([[grid.patches[r, c] for c in range(GRID)] for r in range(GRID)]),
        label_map=make_label_map(provenance),
        provenance=provenance,
    )


def _luminance(pixels):
    return (
        0.299 * pixels[..., 0] + 0.587 * pixels[..., 1] + 0.114 * pixels[..., 2]
    )


def augment(sample: StitchedSample, rng: np.random.Generator, config: AugmentConfig) -> StitchedSample:
    """Horizontal flip (jointly on pixels, label map, provenance) + color jitter.

    The flip is a joint transform: label-map columns and provenance columns
    reverse together with the pixels. Jitter touches pixels only and clamps
    to [0,1]. Factor draws happen in a fixed order regardless of config so
    the RNG stream layout is stable.
    """
    flip = rng.random() < config.flip_prob
    b = rng.uniform(max(0.0, 1.0 - config.brightness), 1.0 + config.brightness)
    c = rng.uniform(max(0.0, 1.0 - config.contrast), 1.0 + config.contrast)
    s = rng.uniform(max(0.0, 1.0 - config.saturation), 1.0 + config.saturation)

    pixels = sample.pixels
    label_map = sample.label_map
    provenance = sample.provenance
    if flip:
        pixels = np.flip(pixels, axis=1).copy()
        label_map = np.flip(label_map, axis=1).copy()
        provenance = [list(reversed(row)) for row in provenance]
    else:
        provenance = [list(row) for row in provenance]

    # Skip factor-1 ops entirely so zero-range jitter is an exact identity.
    if b != 1.0:
        pixels = np.clip(pixels * np.float32(b), 0.0, 1.0)
    if c != 1.0:
        mean = np.float32(_luminance(pixels).mean())
        pixels = np.clip(np.float32(c) * pixels + (1.0 - np.float32(c)) * mean, 0.0, 1.0)
    if s != 1.0:
        gray = _luminance(pixels)[..., None]
        pixels = np.clip(np.float32(s) * pixels + (1.0 - np.float32(s)) * gray, 0.0, 1.0)
    return StitchedSample(
        pixels=pixels.astype(np.float32, copy=False),
        label_map=label_map,
        provenance=provenance,
    )


# --- stitch-preview file emission --------------------------------------------


def provenance_to_jsonable(provenance):
    return [
        [
            {
                "source_sample_id": ref.source_sample_id,
                "grid_row": ref.grid_row,
                "grid_col": ref.grid_col,
                "label": ref.label,
            }
            for ref in row
        ]
        for row in provenance
    ]


def save_stitch_preview(sample: StitchedSample, out_dir, stem: str) -> dict:
    """Write the preview artifact set for one stitched sample.

    Emits <stem>.png (8-bit image), <stem>_label.txt (14x14 space-separated
    0/1 grid), <stem>_label.png (14x14, 0=black 1=white) and
    <stem>_provenance.json. Returns the path map.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "image": out_dir / f"{stem}.png",
        "label_txt": out_dir / f"{stem}_label.txt",
        "label_png": out_dir / f"{stem}_label.png",
        "provenance": out_dir / f"{stem}_provenance.json",
    }
    save_png(paths["image"], sample.pixels)
    lines = [" ".join(str(int(v)) for v in row) for row in sample.label_map]
    paths["label_txt"].write_text("\n".join(lines) + "\n")
    save_png(paths["label_png"], sample.label_map.astype(np.float32))
    paths["provenance"].write_text(
        json.dumps({"grid": provenance_to_jsonable(sample.provenance)}, indent=2)
        + "\n"
    )
    return paths


def load_label_map_txt(path) -> np.ndarray:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line]
    arr = np.array([[int(v) for v in row] for row in rows], dtype=np.uint8)
    if arr.shape != (MAP_SIZE, MAP_SIZE):
        raise ValueError(f"{path}: expected {MAP_SIZE}x{MAP_SIZE} grid, got {arr.shape}")
    return arr

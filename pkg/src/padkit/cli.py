"""Command-line entry point for reproducible experiment runs.

Subcommands: synth, prepare, stitch-preview, train, eval, cross-eval.
Every run directory gets a run.json capturing the resolved parameters and
seeds up front, finalized with artifact hashes and a success marker. All
randomness flows from --seed through named substreams.
"""

import argparse
import hashlib
import json
import os
import sys
import urllib.parse
from pathlib import Path

from . import __version__, metrics, patcher, scorer, synthdata, trainer
from .imgio import load_png, save_png
from .ingest import (
    AlignedFace,
    DatasetManifest,
    ProtocolSplit,
    aligned_face_for,
    default_protocol_config,
    limit_frames_per_video,
    load_manifest,
    load_protocol_config,
    split_protocol,
)
from .model import ModelConfig, build_model, load_checkpoint
from .patcher import AugmentConfig, StitchPolicy
from .seeds import derive_rng
from .trainer import TrainConfig, train

INDEX_COLUMNS = [
    "sample_id",
    "aligned_path",
    "subject_id",
    "label",
    "pai",
    "media_path",
    "frame_index",
    "split",
    "fold_id",
]


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _safe_name(sample_id: str) -> str:
    return urllib.parse.quote(sample_id, safe="")


def _start_run(out_dir: Path, command: str, params: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    run_path = out_dir / "run.json"
    run_path.write_text(
        json.dumps(
            {"tool": f"padkit {__version__}", "command": command,
             "params": params, "status": "running", "artifacts": {}},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return run_path


def _finish_run(run_path: Path, artifacts: dict):
    data = json.loads(run_path.read_text())
    data["artifacts"] = {
        str(name): _sha256(path) for name, path in sorted(artifacts.items())
    }
    data["status"] = "completed"
    run_path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _default_cache_root() -> Path:
    return Path(os.environ.get("PADKIT_CACHE_DIR", "padkit_cache"))


# --- prepare ------------------------------------------------------------------


def cmd_prepare(manifest_path, out_dir=None, protocol_config_path=None,
                protocol="grandtest", frames_per_video=None) -> Path:
    """Align all manifest faces into a cache and materialize protocol splits."""
    manifest = load_manifest(manifest_path)
    records = limit_frames_per_video(manifest.records, frames_per_video)
    manifest = DatasetManifest(manifest.dataset_name, records, manifest.pai_vocabulary)
    config = (
        load_protocol_config(protocol_config_path)
        if protocol_config_path
        else default_protocol_config()
    )
    out_dir = Path(out_dir) if out_dir else _default_cache_root() / Path(manifest_path).stem
    run_path = _start_run(
        out_dir,
        "prepare",
        {
            "manifest": str(manifest_path),
            "protocol_config": str(protocol_config_path) if protocol_config_path else None,
            "protocol": protocol,
            "frames_per_video": frames_per_video,
        },
    )

    aligned_dir = out_dir / "aligned"
    aligned_dir.mkdir(exist_ok=True)
    hashes_path = out_dir / "cache_hashes.json"
    hashes = json.loads(hashes_path.read_text()) if hashes_path.is_file() else {}

    index_rows = []
    for rec in manifest.records:
        png_path = aligned_dir / f"{_safe_name(rec.sample_id)}.png"
        cached = (
            png_path.is_file()
            and hashes.get(rec.sample_id) == _sha256(png_path)
        )
        if not cached:
            try:
                face = aligned_face_for(rec)
            except Exception as exc:
                raise type(exc)(f"sample {rec.sample_id!r}: {exc}") from exc
            save_png(png_path, face.pixels)
            hashes[rec.sample_id] = _sha256(png_path)
        index_rows.append(
            {
                "sample_id": rec.sample_id,
                "aligned_path": str(png_path.relative_to(out_dir)),
                "subject_id": rec.subject_id,
                "label": rec.label,
                "pai": rec.pai,
                "media_path": rec.media_path,
                "frame_index": rec.frame_index,
                "split": rec.split,
                "fold_id": "" if rec.fold_id is None else rec.fold_id,
            }
        )
    hashes_path.write_text(json.dumps(hashes, indent=2, sort_keys=True) + "\n")
    _write_rows(out_dir / "aligned_index.csv", index_rows)

    by_id = {row["sample_id"]: row for row in index_rows}
    result = split_protocol(manifest, protocol, config)
    splits_dir = out_dir / "splits" / protocol
    if isinstance(result, ProtocolSplit):
        _write_split(splits_dir, result, by_id)
    else:
        for fold in result:
            _write_split(splits_dir / f"fold_{fold.fold_id}", fold, by_id)

    _finish_run(
        run_path,
        {"aligned_index.csv": out_dir / "aligned_index.csv",
         "cache_hashes.json": hashes_path},
    )
    return out_dir


def _write_split(directory: Path, split: ProtocolSplit, by_id: dict):
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        rows = [by_id[r.sample_id] for r in getattr(split, name)]
        _write_rows(directory / f"{name}.csv", rows)


def _write_rows(path: Path, rows):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=INDEX_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _read_rows(path: Path):
    import csv

    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _split_dir(cache_dir, protocol, fold=None) -> Path:
    base = Path(cache_dir) / "splits" / protocol
    if fold is not None:
        base = base / f"fold_{fold}"
    if not base.is_dir():
        raise FileNotFoundError(f"no prepared split directory: {base}")
    return base


def _fold_dirs(cache_dir, protocol):
    base = Path(cache_dir) / "splits" / protocol
    if not base.is_dir():
        raise FileNotFoundError(f"no prepared split directory: {base}")
    folds = sorted(
        (p for p in base.iterdir() if p.is_dir() and p.name.startswith("fold_")),
        key=lambda p: p.name,
    )
    return folds


def _load_faces(cache_dir, rows) -> list[AlignedFace]:
    faces = []
    for row in rows:
        pixels = load_png(Path(cache_dir) / row["aligned_path"])
        faces.append(
            AlignedFace(
                pixels=pixels,
                label=row["label"],
                pai=row["pai"],
                subject_id=row["subject_id"],
                sample_id=row["sample_id"],
            )
        )
    return faces


# --- stitch-preview -----------------------------------------------------------


def cmd_stitch_preview(cache_dir, out_dir, strategy="random", seed=0, n=4,
                       protocol="grandtest", split="train",
                       bona_fide_fraction=0.5) -> Path:
    """Emit n stitched previews (image, label map text+PNG, provenance JSON)."""
    rows = _read_rows(_split_dir(cache_dir, protocol) / f"{split}.csv")
    if not rows:
        raise ValueError(f"empty cache split {protocol}/{split}")
    out_dir = Path(out_dir)
    run_path = _start_run(
        out_dir,
        "stitch-preview",
        {"cache": str(cache_dir), "stitch": strategy, "seed": seed, "n": n,
         "protocol": protocol, "split": split,
         "bona_fide_fraction": bona_fide_fraction},
    )
    faces = _load_faces(cache_dir, rows)
    grids = [patcher.decompose(f) for f in faces]
    policy = StitchPolicy(bona_fide_fraction=bona_fide_fraction)
    stitcher = patcher.STITCHERS[strategy]
    rng = derive_rng(seed, "stitch-preview")
    artifacts = {}
    for i in range(n):
        sample = stitcher(grids, rng, policy)
        paths = patcher.save_stitch_preview(sample, out_dir, f"stitch_{i:03d}")
        artifacts.update({p.name: p for p in paths.values()})
    _finish_run(run_path, artifacts)
    return out_dir


# --- train --------------------------------------------------------------------


def cmd_train(cache_dir, out_dir, protocol="grandtest", fold=None, seed=0,
              backbone="tiny", pretrained_weights=None, epochs=30,
              batch_size=32, lr=1e-3, stitch="random", bona_fide_fraction=0.5,
              unstitched_fraction=0.0) -> Path:
    """Train on a prepared cache split; writes checkpoints, log, run.json."""
    split_dir = _split_dir(cache_dir, protocol, fold)
    out_dir = Path(out_dir)
    run_path = _start_run(
        out_dir,
        "train",
        {
            "cache": str(cache_dir), "protocol": protocol, "fold": fold,
            "seed": seed, "backbone": backbone,
            "pretrained_weights": str(pretrained_weights) if pretrained_weights else None,
            "epochs": epochs, "batch_size": batch_size, "lr": lr,
            "stitch": stitch, "bona_fide_fraction": bona_fide_fraction,
            "unstitched_fraction": unstitched_fraction,
        },
    )
    train_faces = _load_faces(cache_dir, _read_rows(split_dir / "train.csv"))
    dev_faces = _load_faces(cache_dir, _read_rows(split_dir / "dev.csv"))

    model_config = ModelConfig(
        backbone=backbone, pretrained=pretrained_weights is not None, seed=seed
    )
    model = build_model(model_config, pretrained_weights=pretrained_weights)
    config = TrainConfig(
        initial_lr=lr,
        batch_size=batch_size,
        epochs=epochs,
        seed=seed,
        stitch_strategy=stitch,
        stitch_policy=StitchPolicy(bona_fide_fraction=bona_fide_fraction),
        augment=AugmentConfig(),
        checkpoint_dir=out_dir / "checkpoints",
        unstitched_fraction=unstitched_fraction,
        log_path=out_dir / "train_log.jsonl",
    )
    best_path, state = train(model, train_faces, dev_faces, config)
    print(
        f"best dev EER {state.best_dev_eer:.4f} at epoch {state.best_epoch} "
        f"-> {best_path}"
    )
    _finish_run(
        run_path,
        {"best.bin": best_path, "train_log.jsonl": out_dir / "train_log.jsonl"},
    )
    return out_dir


# --- eval ---------------------------------------------------------------------


def _score_rows(model, cache_dir, rows, per_video=False):
    faces = _load_faces(cache_dir, rows)
    scores = scorer.score_faces(model, faces)
    records = [
        scorer.ScoreRecord(
            sample_id=row["sample_id"],
            subject_id=row["subject_id"],
            score=score,
            label=row["label"],
            pai=row["pai"],
        )
        for row, score in zip(rows, scores)
    ]
    if not per_video:
        return records
    groups: dict[str, list] = {}
    meta = {}
    for row, rec in zip(rows, records):
        key = row["media_path"]
        groups.setdefault(key, []).append(rec.score)
        meta[key] = rec
    merged = []
    for key in groups:
        rec = meta[key]
        merged.append(
            scorer.ScoreRecord(
                sample_id=key,
                subject_id=rec.subject_id,
                score=scorer.aggregate_scores(groups[key], "mean"),
                label=rec.label,
                pai=rec.pai,
            )
        )
    return merged


def _evaluate_split_dir(model, cache_dir, split_dir, split, per_video, apcer_mode,
                        out_dir, prefix=""):
    dev_records = _score_rows(
        model, cache_dir, _read_rows(split_dir / "dev.csv"), per_video
    )
    target_records = _score_rows(
        model, cache_dir, _read_rows(split_dir / f"{split}.csv"), per_video
    )
    threshold, eer = metrics.eer_threshold(dev_records)
    report = metrics.evaluate(target_records, threshold, apcer_mode)
    report.eer_dev = 100.0 * eer
    report.threshold_source = "dev-eer"
    out_dir.mkdir(parents=True, exist_ok=True)
    scores_path = out_dir / f"{prefix}scores_{split}.csv"
    scorer.write_scores(scores_path, target_records)
    dev_scores_path = out_dir / f"{prefix}scores_dev.csv"
    scorer.write_scores(dev_scores_path, dev_records)
    return report, {
        scores_path.name: scores_path,
        dev_scores_path.name: dev_scores_path,
    }


def cmd_eval(checkpoint, cache_dir, out_dir, protocol="grandtest", split="test",
             per_video=False, apcer_mode="max") -> Path:
    """Score a split, calibrate on dev EER, and write score CSV + reports.

    Folded protocols are evaluated per fold with the same checkpoint and the
    fold statistics are reported as mean±std.
    """
    out_dir = Path(out_dir)
    run_path = _start_run(
        out_dir,
        "eval",
        {"checkpoint": str(checkpoint), "cache": str(cache_dir),
         "protocol": protocol, "split": split, "per_video": per_video,
         "apcer": apcer_mode},
    )
    model, _ = load_checkpoint(checkpoint)
    folds = _fold_dirs(cache_dir, protocol)
    artifacts = {}
    if not folds:
        report, files = _evaluate_split_dir(
            model, cache_dir, _split_dir(cache_dir, protocol), split,
            per_video, apcer_mode, out_dir,
        )
        artifacts.update(files)
        artifacts.update(_write_report(out_dir, report))
        print(metrics.render_report(report), end="")
    else:
        reports = []
        for fold_dir in folds:
            fold_out = out_dir / fold_dir.name
            report, files = _evaluate_split_dir(
                model, cache_dir, fold_dir, split, per_video, apcer_mode,
                fold_out, prefix="",
            )
            reports.append(report)
            artifacts.update({f"{fold_dir.name}/{k}": v for k, v in files.items()})
            artifacts.update(
                {f"{fold_dir.name}/{k}": v for k, v in _write_report(fold_out, report).items()}
            )
        folded = metrics.aggregate_folds(reports)
        folded_json = out_dir / "folded_report.json"
        folded_json.write_text(
            json.dumps(metrics.folded_to_dict(folded), indent=2) + "\n"
        )
        folded_txt = out_dir / "folded_report.txt"
        folded_txt.write_text(metrics.render_folded(folded))
        artifacts["folded_report.json"] = folded_json
        artifacts["folded_report.txt"] = folded_txt
        print(metrics.render_folded(folded), end="")
    _finish_run(run_path, artifacts)
    return out_dir


def _write_report(out_dir: Path, report) -> dict:
    json_path = out_dir / "report.json"
    json_path.write_text(metrics.report_to_json(report))
    txt_path = out_dir / "report.txt"
    txt_path.write_text(metrics.render_report(report))
    return {"report.json": json_path, "report.txt": txt_path}


# --- cross-eval ---------------------------------------------------------------


def cmd_cross_eval(checkpoint, cache_dir, out_dir, protocol="grandtest",
                   split="test", per_video=False, apcer_mode="max",
                   recalibrate=False) -> Path:
    """Evaluate a foreign-domain cache with a trained checkpoint.

    The threshold defaults to the one calibrated on the training domain's
    dev split (stored in the checkpoint); --recalibrate computes an EER
    threshold on this cache's dev split instead. Scores are identical either
    way; only the threshold and its provenance change.
    """
    if not Path(checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    out_dir = Path(out_dir)
    run_path = _start_run(
        out_dir,
        "cross-eval",
        {"checkpoint": str(checkpoint), "cache": str(cache_dir),
         "protocol": protocol, "split": split, "per_video": per_video,
         "apcer": apcer_mode, "recalibrate": recalibrate},
    )
    model, header = load_checkpoint(checkpoint)
    split_dir = _split_dir(cache_dir, protocol)
    target_records = _score_rows(
        model, cache_dir, _read_rows(split_dir / f"{split}.csv"), per_video
    )
    eer_pct = None
    if recalibrate:
        dev_records = _score_rows(
            model, cache_dir, _read_rows(split_dir / "dev.csv"), per_video
        )
        threshold, eer = metrics.eer_threshold(dev_records)
        eer_pct = 100.0 * eer
        source = "recalibrated-on-eval-domain-dev"
    else:
        threshold = header.get("dev_threshold_at_save")
        if threshold is None:
            raise ValueError(
                "checkpoint carries no stored dev threshold; rerun training or "
                "use --recalibrate"
            )
        if header.get("dev_eer_at_save") is not None:
            eer_pct = 100.0 * header["dev_eer_at_save"]
        source = "train-domain-dev (from checkpoint)"
    report = metrics.evaluate(target_records, threshold, apcer_mode)
    report.eer_dev = eer_pct
    report.threshold_source = source
    scores_path = out_dir / f"scores_{split}.csv"
    scorer.write_scores(scores_path, target_records)
    artifacts = {scores_path.name: scores_path}
    artifacts.update(_write_report(out_dir, report))
    print(metrics.render_report(report), end="")
    _finish_run(run_path, artifacts)
    return out_dir


# --- synth --------------------------------------------------------------------


def cmd_synth(out_dir, seed=7, subjects=20, frames=4, texture_strength=0.3,
              domain_shift=0.0, pais=("print", "replay"), pair=False):
    config = synthdata.SynthConfig(
        out_dir=out_dir,
        n_subjects=subjects,
        frames_per_subject=frames,
        attack_pais=tuple(pais),
        texture_strength=texture_strength,
        domain_shift=domain_shift,
        seed=seed,
    )
    if pair:
        manifest_a, manifest_b = synthdata.generate_pair(config)
        print(manifest_a)
        print(manifest_b)
        return manifest_a, manifest_b
    manifest = synthdata.generate(config)
    print(manifest)
    return manifest


# --- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="padkit",
        description="Patch-stitching face presentation attack detection toolkit",
    )
    parser.add_argument("--version", action="version", version=f"padkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic face-PAD corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--texture-strength", type=float, default=0.3)
    p.add_argument("--domain-shift", type=float, default=0.0)
    p.add_argument("--pais", nargs="+", default=["print", "replay"])
    p.add_argument("--pair", action="store_true",
                   help="emit domain A and a shifted domain B")

    p = sub.add_parser("prepare", help="align faces and materialize splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None,
                   help="cache directory (default: $PADKIT_CACHE_DIR/<manifest stem>)")
    p.add_argument("--protocol-config", default=None)
    p.add_argument("--protocol", default="grandtest")
    p.add_argument("--frames-per-video", type=int, default=None)

    p = sub.add_parser("stitch-preview", help="emit stitched sample previews")
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stitch", choices=["random", "controlled"], default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--protocol", default="grandtest")
    p.add_argument("--split", default="train")
    p.add_argument("--bona-fide-fraction", type=float, default=0.5)

    p = sub.add_parser("train", help="train a map model on a prepared cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", default="grandtest")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backbone", choices=["dense_truncated", "tiny"], default="tiny")
    p.add_argument("--pretrained-weights", default=None)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--stitch", choices=["random", "controlled"], default="random")
    p.add_argument("--bona-fide-fraction", type=float, default=0.5)
    p.add_argument("--unstitched-fraction", type=float, default=0.0)

    p = sub.add_parser("eval", help="score a split and report ISO metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", default="grandtest")
    p.add_argument("--split", default="test")
    p.add_argument("--per-video", action="store_true")
    p.add_argument("--apcer", choices=["max", "pooled"], default="max")

    p = sub.add_parser("cross-eval", help="evaluate a checkpoint on a foreign cache")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", default="grandtest")
    p.add_argument("--split", default="test")
    p.add_argument("--per-video", action="store_true")
    p.add_argument("--apcer", choices=["max", "pooled"], default="max")
    p.add_argument("--recalibrate", action="store_true")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "synth":
        cmd_synth(
            out_dir=args.out, seed=args.seed, subjects=args.subjects,
            frames=args.frames, texture_strength=args.texture_strength,
            domain_shift=args.domain_shift, pais=args.pais, pair=args.pair,
        )
    elif args.command == "prepare":
        out = cmd_prepare(
            args.manifest, out_dir=args.out,
            protocol_config_path=args.protocol_config, protocol=args.protocol,
            frames_per_video=args.frames_per_video,
        )
        print(out)
    elif args.command == "stitch-preview":
        cmd_stitch_preview(
            args.cache, args.out, strategy=args.stitch, seed=args.seed,
            n=args.n, protocol=args.protocol, split=args.split,
            bona_fide_fraction=args.bona_fide_fraction,
        )
    elif args.command == "train":
        cmd_train(
            args.cache, args.out, protocol=args.protocol, fold=args.fold,
            seed=args.seed, backbone=args.backbone,
            pretrained_weights=args.pretrained_weights, epochs=args.epochs,
            batch_size=args.batch_size, lr=args.lr, stitch=args.stitch,
            bona_fide_fraction=args.bona_fide_fraction,
            unstitched_fraction=args.unstitched_fraction,
        )
    elif args.command == "eval":
        cmd_eval(
            args.checkpoint, args.cache, args.out, protocol=args.protocol,
            split=args.split, per_video=args.per_video, apcer_mode=args.apcer,
        )
    elif args.command == "cross-eval":
        cmd_cross_eval(
            args.checkpoint, args.cache, args.out, protocol=args.protocol,
            split=args.split, per_video=args.per_video, apcer_mode=args.apcer,
            recalibrate=args.recalibrate,
        )
    else:  # pragma: no cover - argparse enforces the choices
        raise SystemExit(2)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Training loop: pixel-wise BCE over stitched composites, Adam, halved LR.

Each epoch builds one stitched sample per source training face (pools are
drawn from the current batch's faces), applies flip/jitter augmentation,
and takes one Adam step per batch at ``lr_at_epoch``. After every epoch the
dev set is scored on plain (unstitched) faces and the checkpoint with the
lowest dev EER so far is kept as ``best.bin``.
"""

import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics, patcher, scorer
from .metrics import SingleClassError
from .model import save_checkpoint
from .patcher import STITCHERS, AugmentConfig, StitchPolicy
from .seeds import derive_rng

BCE_EPS = 1e-7


def pixelwise_bce(pred, target):
    """Mean over pixels and batch of -[y*log(p) + (1-y)*log(1-p)].

    Probabilities are clamped to [1e-7, 1 - 1e-7] first. Torch inputs give a
    differentiable scalar tensor; array inputs give a float computed in
    float64 with an exact (order-independent) sum.
    """
    if isinstance(pred, torch.Tensor) or isinstance(target, torch.Tensor):
        p = pred if isinstance(pred, torch.Tensor) else torch.as_tensor(pred)
        y = target if isinstance(target, torch.Tensor) else torch.as_tensor(target)
        y = y.to(p.dtype)
        if p.shape != y.shape:
            raise ValueError(f"shape mismatch: pred {tuple(p.shape)} vs target {tuple(y.shape)}")
        p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
        return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {y.shape}")
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    losses = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    # fsum: exact summation, so any shared permutation of (pred, target)
    # yields the bit-identical mean
    return math.fsum(losses.ravel()) / losses.size


@dataclass
class TrainConfig:
    initial_lr: float = 1e-3
    lr_halving_period_epochs: int = 10
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    stitch_strategy: str = "random"
    stitch_policy: StitchPolicy = field(default_factory=StitchPolicy)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_dir: str | Path = "checkpoints"
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # fraction of training samples left as plain faces (1.0 = no stitching)
    unstitched_fraction: float = 0.0
    # stitched samples generated per source face per epoch
    samples_per_face: int = 1
    log_path: str | Path | None = None

    def validate(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.lr_halving_period_epochs <= 0:
            raise ValueError("lr_halving_period_epochs must be positive")
        if self.batch_size <= 0 or self.epochs <= 0 or self.samples_per_face <= 0:
            raise ValueError("batch_size, epochs and samples_per_face must be positive")
        if self.stitch_strategy not in STITCHERS:
            raise ValueError(
                f"stitch_strategy must be one of {sorted(STITCHERS)}, "
                f"got {self.stitch_strategy!r}"
            )
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if not 0.0 <= self.unstitched_fraction <= 1.0:
            raise ValueError("unstitched_fraction must be in [0,1]")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    dev_eer: float
    checkpoint_saved: bool


@dataclass
class TrainState:
    epoch: int
    step: int
    current_lr: float
    best_dev_eer: float
    best_epoch: int
    history: list


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """initial_lr halved once per ``lr_halving_period_epochs`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.initial_lr * 0.5 ** (epoch // config.lr_halving_period_epochs)


def _check_two_classes(faces, what: str):
    labels = {f.label for f in faces}
    if not faces or labels != {"bona_fide", "attack"}:
        raise SingleClassError(
            f"{what} must contain both classes, found labels {sorted(labels)}"
        )


def _pool_with_class_cover(batch_grids, grids_by_class, policy, rng):
    """Batch pool, extended with one face of a missing-but-required class."""
    pool = list(batch_grids)
    present = {g.label for g in pool}
    for label, needed in (
        ("bona_fide", policy.bona_fide_fraction > 0.0),
        ("attack", policy.bona_fide_fraction < 1.0),
    ):
        if needed and label not in present:
            fallback = grids_by_class[label]
            pool.append(fallback[int(rng.integers(len(fallback)))])
    return pool


def train(model, train_faces, dev_faces, config: TrainConfig):
    """Run the full training schedule; returns (best checkpoint path, state).

    The model is left at its last-epoch weights; the best (lowest dev EER,
    earliest epoch on ties) checkpoint is at ``<checkpoint_dir>/best.bin``.
    """
    config.validate()
    _check_two_classes(train_faces, "training set")
    _check_two_classes(dev_faces, "dev set")

    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(config.log_path) if config.log_path else ckpt_dir / "train_log.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)

    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.initial_lr,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )

    grids = [patcher.decompose(f) for f in train_faces]
    grids_by_class = {
        "bona_fide": [g for g in grids if g.label == "bona_fide"],
        "attack": [g for g in grids if g.label == "attack"],
    }
    stitcher = STITCHERS[config.stitch_strategy]
    rng = derive_rng(config.seed, "trainer")

    history: list[EpochRecord] = []
    best_eer = math.inf
    best_epoch = -1
    best_path = ckpt_dir / "best.bin"
    step = 0
    lr = config.initial_lr

    with open(log_path, "w") as log:
        for epoch in range(config.epochs):
            lr = lr_at_epoch(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr

            model.train()
            order = rng.permutation(len(grids))
            loss_sum = 0.0
            n_samples = 0
            for start in range(0, len(order), config.batch_size):
                chunk = [grids[i] for i in order[start : start + config.batch_size]]
                pool = _pool_with_class_cover(
                    chunk, grids_by_class, config.stitch_policy, rng
                )
                samples = []
                for grid in chunk:
                    for _ in range(config.samples_per_face):
                        if (
                            config.unstitched_fraction > 0.0
                            and rng.random() < config.unstitched_fraction
                        ):
                            sample = patcher.identity_sample(grid)
                        else:
                            sample = stitcher(pool, rng, config.stitch_policy)
                        samples.append(patcher.augment(sample, rng, config.augment))

                images = np.stack([s.pixels for s in samples]).transpose(0, 3, 1, 2)
                targets = np.stack([s.label_map for s in samples]).astype(np.float32)
                pred = model(torch.from_numpy(np.ascontiguousarray(images)))
                loss = pixelwise_bce(pred, torch.from_numpy(targets))
                loss_value = float(loss.detach())
                if not math.isfinite(loss_value):
                    raise RuntimeError(
                        f"non-finite training loss {loss_value} at epoch {epoch} "
                        f"step {step}; aborting"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step += 1
                loss_sum += loss_value * len(samples)
                n_samples += len(samples)

            train_loss = loss_sum / n_samples
            dev_records = _dev_score_records(model, dev_faces)
            threshold, dev_eer = metrics.eer_threshold(dev_records)

            saved = dev_eer < best_eer
            if saved:
                best_eer = dev_eer
                best_epoch = epoch
                epoch_path = ckpt_dir / f"ckpt_epoch{epoch:03d}.bin"
                save_checkpoint(
                    model,
                    epoch_path,
                    training_epoch=epoch,
                    dev_eer_at_save=dev_eer,
                    dev_threshold_at_save=threshold,
                )
                shutil.copyfile(epoch_path, best_path)

            history.append(EpochRecord(epoch, lr, train_loss, dev_eer, saved))
            log.write(
                json.dumps(
                    {
                        "epoch": epoch,
                        "lr": lr,
                        "train_loss": train_loss,
                        "dev_eer": dev_eer,
                        "checkpoint_saved": saved,
                    }
                )
                + "\n"
            )
            log.flush()

    state = TrainState(
        epoch=config.epochs - 1,
        step=step,
        current_lr=lr,
        best_dev_eer=best_eer,
        best_epoch=best_epoch,
        history=history,
    )
    return best_path, state


def _dev_score_records(model, dev_faces):
    scores = scorer.score_faces(model, dev_faces)
    return [
        scorer.ScoreRecord(
            sample_id=f.sample_id,
            subject_id=f.subject_id,
            score=s,
            label=f.label,
            pai=f.pai,
        )
        for f, s in zip(dev_faces, scores)
    ]

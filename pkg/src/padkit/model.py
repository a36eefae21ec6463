"""Map-producing CNN: 224x224x3 input -> 14x14 probability map.

Two backbones share the same contract (x16 spatial downsampling, then a 1x1
convolution to one channel and a sigmoid):

* ``dense_truncated`` — the leading feature layers of a DenseNet-161, cut
  after the second dense block's transition so a 224 input yields a 14x14
  map. Optionally initialized from an external torchvision-format weight
  file; never downloaded.
* ``tiny`` — four strided conv/BN/ReLU stages (~50k parameters) for fast
  CPU experiments and tests.

Checkpoints are a single binary container: an 8-byte magic, a JSON header
(format version, model config, normalization constants, training metadata,
tensor index), then the raw little-endian tensor bytes.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

BACKBONES = ("dense_truncated", "tiny")
PROB_EPS = 1e-6

CKPT_MAGIC = b"PADCKPT\x00"
CKPT_VERSION = 1

# Per-backbone input normalization; stored in every checkpoint so inference
# is self-contained. The dense backbone uses the ImageNet statistics its
# pretrained weights were produced with.
_NORMALIZATION = {
    "dense_truncated": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
    "tiny": ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
}


class ModelConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "tiny"
    pretrained: bool = False
    seed: int = 0
    # Number of leading DenseNet feature layers to keep. 8 (through the
    # second transition) is the only depth whose stride matches the 14x14
    # output contract at 224 input; other values raise.
    dense_feature_layers: int = 8


class MapModel(nn.Module):
    """Normalize -> backbone features -> 1x1 conv -> sigmoid probability map."""

    def __init__(self, config: ModelConfig, features: nn.Module, feature_channels: int):
        super().__init__()
        self.config = config
        self.features = features
        self.head = nn.Conv2d(feature_channels, 1, kernel_size=1)
        mean, std = _NORMALIZATION[config.backbone]
        self.register_buffer("norm_mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("norm_std", torch.tensor(std).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B,3,H,W) input, got {tuple(x.shape)}")
        if x.shape[2] != 224 or x.shape[3] != 224:
            raise ValueError(
                f"expected 224x224 input, got {x.shape[2]}x{x.shape[3]}"
            )
        x = (x - self.norm_mean) / self.norm_std
        logits = self.head(self.features(x))
        probs = torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)
        return probs[:, 0]


def _tiny_features():
    widths = (16, 32, 48, 64)
    layers = []
    in_ch = 3
    for out_ch in widths:
        # bias-free convs: the following BN would cancel any conv bias,
        # leaving it gradient-dead
        layers += [
            nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        ]
        in_ch = out_ch
    return nn.Sequential(*layers), widths[-1]


def _dense_features(config: ModelConfig):
    from torchvision.models import densenet161

    n = config.dense_feature_layers
    entries = list(densenet161(weights=None).features.named_children())
    if not 1 <= n <= len(entries):
        raise ModelConfigError(
            f"dense_feature_layers must be in 1..{len(entries)}, got {n}"
        )
    kept = entries[:n]
    stride = _dense_stride(kept)
    if 224 // stride != 14:
        raise ModelConfigError(
            f"dense_feature_layers={n} gives stride {stride} "
            f"({224 // stride}x{224 // stride} maps); the output contract "
            "requires stride 16 (14x14), i.e. 8 layers"
        )
    features = nn.Sequential()
    for name, module in kept:
        features.add_module(name, module)
    channels = _out_channels(features)
    return features, channels


def _dense_stride(entries) -> int:
    stride = 1
    for name, _ in entries:
        if name in ("conv0", "pool0") or name.startswith("transition"):
            stride *= 2
    return stride


def _out_channels(features: nn.Module) -> int:
    was_training = features.training
    features.eval()
    with torch.no_grad():
        probe = features(torch.zeros(1, 3, 64, 64))
    features.train(was_training)
    return probe.shape[1]


def build_model(config: ModelConfig, pretrained_weights=None) -> MapModel:
    """Build a MapModel per config; weight init is seeded and reproducible.

    ``pretrained_weights`` is a path to an externally supplied torchvision
    DenseNet-161 state-dict file; required when config.pretrained is set.
    """
    if config.backbone not in BACKBONES:
        raise ModelConfigError(
            f"unknown backbone {config.backbone!r}; expected one of {BACKBONES}"
        )
    model = _architecture(config)
    if config.backbone == "dense_truncated" and config.pretrained:
        if pretrained_weights is None:
            raise ModelConfigError(
                "config.pretrained is set but no pretrained weight file was given"
            )
        _load_backbone_weights(model.features, pretrained_weights)
    return model


def _architecture(config: ModelConfig) -> MapModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        if config.backbone == "tiny":
            features, channels = _tiny_features()
        elif config.backbone == "dense_truncated":
            features, channels = _dense_features(config)
        else:
            raise ModelConfigError(f"unknown backbone {config.backbone!r}")
        model = MapModel(config, features, channels)
    return model


def _load_backbone_weights(features: nn.Module, path):
    path = Path(path)
    if not path.is_file():
        raise ModelConfigError(f"pretrained weight file not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    own = features.state_dict()
    picked = {}
    for key, tensor in state.items():
        short = key.removeprefix("features.")
        if short in own:
            if tuple(tensor.shape) != tuple(own[short].shape):
                raise CheckpointError(
                    f"pretrained tensor {key} has shape {tuple(tensor.shape)}, "
                    f"expected {tuple(own[short].shape)}"
                )
            picked[short] = tensor
    missing = sorted(set(own) - set(picked))
    if missing:
        raise CheckpointError(
            f"pretrained file lacks {len(missing)} backbone tensors "
            f"(first: {missing[0]})"
        )
    features.load_state_dict(picked)


# --- checkpoint container -----------------------------------------------------


def save_checkpoint(model: MapModel, path, *, training_epoch: int = 0,
                    dev_eer_at_save: float | None = None,
                    dev_threshold_at_save: float | None = None,
                    extra: dict | None = None) -> Path:
    """Serialize model config + parameters + metadata to one binary file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    index = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        arrays[name] = arr
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": arr.nbytes,
            }
        )
        offset += arr.nbytes
    header = {
        "format_version": CKPT_VERSION,
        "model_config": asdict(model.config),
        "normalization": {
            "mean": model.norm_mean.flatten().tolist(),
            "std": model.norm_std.flatten().tolist(),
        },
        "training_epoch": training_epoch,
        "dev_eer_at_save": dev_eer_at_save,
        "dev_threshold_at_save": dev_threshold_at_save,
        "extra": extra or {},
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for name in arrays:
            fh.write(arrays[name].tobytes())
    return path


def load_checkpoint(path, config: ModelConfig | None = None):
    """Rebuild the model from a checkpoint file.

    Returns (model, header). When ``config`` is given it overrides the stored
    one, and any parameter-set or shape disagreement raises CheckpointError.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a padkit checkpoint")
        header_len = int.from_bytes(fh.read(8), "little")
        try:
            header = json.loads(fh.read(header_len))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        version = header.get("format_version")
        if version != CKPT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format_version {version} "
                f"(supported: {CKPT_VERSION})"
            )
        payload = fh.read()

    stored = ModelConfig(**header["model_config"])
    model = _architecture(config or stored)
    own = model.state_dict()
    entries = {e["name"]: e for e in header["tensors"]}
    if set(entries) != set(own):
        raise CheckpointError(
            f"{path}: parameter set mismatch between checkpoint and "
            f"{(config or stored).backbone!r} architecture"
        )
    state = {}
    for name, entry in entries.items():
        expected = tuple(own[name].shape)
        if tuple(entry["shape"]) != expected:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: checkpoint "
                f"{tuple(entry['shape'])} vs model {expected}"
            )
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated tensor data for {name}")
        arr = np.frombuffer(
            payload[start : start + nbytes], dtype=np.dtype(entry["dtype"])
        ).reshape(entry["shape"]).copy()
        state[name] = torch.from_numpy(arr)
    model.load_state_dict(state)
    return model, header

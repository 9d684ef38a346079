"""2D U-Net and three-pathway voxelwise network as functional forwards over named tensors.

Parameters live in a flat ``{name: tensor}`` dict held by a :class:`Checkpoint`,
so the same weights can be saved, reloaded and driven by either the training
loop or plain inference without module objects.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_BUFFER_SUFFIXES = (".running_mean", ".running_var")
# deterministic zip member timestamps
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_features: int = 64
    in_channels: int = 1
    n_classes: int = 2

    def __post_init__(self):
        if self.depth < 1 or self.base_features < 1:
            raise ValueError("U-Net depth and base_features must be >= 1")

    def features(self, level: int) -> int:
        return self.base_features * 2**level

    @property
    def multiple(self) -> int:
        return 2**self.depth


@dataclass(frozen=True)
class PathwaySpec:
    patch_size: int
    kernels: tuple[int, ...]


@dataclass(frozen=True)
class VoxelwiseConfig:
    pathways: tuple[PathwaySpec, ...] = (
        PathwaySpec(15, (5, 3, 3, 1)),
        PathwaySpec(25, (5, 3, 3, 1)),
        PathwaySpec(51, (7, 5, 3, 1)),
    )
    features: tuple[int, ...] = (24, 32, 48, 48)
    in_channels: int = 1
    n_classes: int = 2

    def __post_init__(self):
        pathways = tuple(p if isinstance(p, PathwaySpec) else PathwaySpec(p["patch_size"], tuple(p["kernels"])) for p in self.pathways)
        object.__setattr__(self, "pathways", pathways)
        object.__setattr__(self, "features", tuple(self.features))
        for p in self.pathways:
            if len(p.kernels) != len(self.features):
                raise ValueError("each pathway needs one kernel size per layer")
            if any(k % 2 == 0 for k in p.kernels) or p.patch_size % 2 == 0:
                raise ValueError("kernel and patch sizes must be odd")
            if _stacked_field(p.kernels) > p.patch_size:
                raise ValueError(f"receptive field exceeds patch size {p.patch_size}")

    @property
    def patch_sizes(self) -> tuple[int, ...]:
        return tuple(p.patch_size for p in self.pathways)


ModelConfig = Union[UNetConfig, VoxelwiseConfig]


def config_to_json(config: ModelConfig) -> dict:
    kind = "unet" if isinstance(config, UNetConfig) else "voxelwise"
    return {"kind": kind, **asdict(config)}


def config_from_json(raw: dict) -> ModelConfig:
    raw = dict(raw)
    kind = raw.pop("kind")
    if kind == "unet":
        return UNetConfig(**raw)
    if kind == "voxelwise":
        raw["pathways"] = tuple(raw["pathways"])
        return VoxelwiseConfig(**raw)
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, torch.Tensor]
    step: int = 0
    seeds: list[int] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return "unet" if isinstance(self.config, UNetConfig) else "voxelwise"

    def parameters(self) -> dict[str, torch.Tensor]:
        """Learnable tensors only (batch-norm running statistics excluded)."""
        return {k: v for k, v in self.tensors.items() if not k.endswith(_BUFFER_SUFFIXES)}

    def buffers(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.tensors.items() if k.endswith(_BUFFER_SUFFIXES)}

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            config=self.config,
            tensors={k: v.detach().clone() for k, v in self.tensors.items()},
            step=self.step,
            seeds=list(self.seeds),
        )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Zip archive: ``config.json`` plus one little-endian float32 ``.npy`` per tensor."""
    path = Path(path)
    names = sorted(ckpt.tensors)
    header = {
        "format": "slicebrain-checkpoint/1",
        "model": config_to_json(ckpt.config),
        "step": ckpt.step,
        "seeds": ckpt.seeds,
        "tensors": {n: list(ckpt.tensors[n].shape) for n in names},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("config.json", _ZIP_DATE), json.dumps(header, indent=2, sort_keys=True))
        for name in names:
            buf = io.BytesIO()
            arr = ckpt.tensors[name].detach().cpu().numpy().astype("<f4")
            np.save(buf, arr, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"tensors/{name}.npy", _ZIP_DATE), buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("config.json"))
        config = config_from_json(header["model"])
        tensors = {}
        for name, shape in header["tensors"].items():
            arr = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")), allow_pickle=False)
            if list(arr.shape) != shape:
                raise ValueError(f"tensor {name} has shape {arr.shape}, header says {shape}")
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    expected = parameter_shapes(config)
    if set(expected) != set(tensors) or any(tuple(tensors[k].shape) != v for k, v in expected.items()):
        raise ValueError(f"checkpoint tensors in {path} do not match its config")
    return Checkpoint(config=config, tensors=tensors, step=int(header["step"]), seeds=list(header["seeds"]))


# ---------------------------------------------------------------------------
# parameter layout


def _unet_layers(config: UNetConfig):
    """Yield (name, kind, in_ch, out_ch, kernel) in forward order."""
    f = config.features
    in_ch = config.in_channels
    for level in range(config.depth):
        yield f"enc{level}.conv1", "conv", in_ch, f(level), 3
        yield f"enc{level}.conv2", "conv", f(level), f(level), 3
        in_ch = f(level)
    yield "bottom.conv1", "conv", in_ch, f(config.depth), 3
    yield "bottom.conv2", "conv", f(config.depth), f(config.depth), 3
    for level in reversed(range(config.depth)):
        yield f"up{level}", "upconv", f(level + 1), f(level), 2
        yield f"dec{level}.conv1", "conv", 2 * f(level), f(level), 3
        yield f"dec{level}.conv2", "conv", f(level), f(level), 3
    yield "head", "conv", f(0), config.n_classes, 1


def _voxelwise_layers(config: VoxelwiseConfig):
    for p in config.pathways:
        in_ch = config.in_channels
        for i, (k, out_ch) in enumerate(zip(p.kernels, config.features)):
            yield f"p{p.patch_size}.conv{i + 1}", "conv_bn", in_ch, out_ch, k
            in_ch = out_ch
    fused = config.features[-1] * len(config.pathways)
    yield "fusion", "conv", fused, config.n_classes, 1


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    layers = _unet_layers(config) if isinstance(config, UNetConfig) else _voxelwise_layers(config)
    shapes = {}
    for name, kind, cin, cout, k in layers:
        if kind == "upconv":
            shapes[f"{name}.weight"] = (cin, cout, k, k)
        else:
            shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)
        if kind == "conv_bn":
            for suffix in ("bn_weight", "bn_bias", "running_mean", "running_var"):
                shapes[f"{name}.{suffix}"] = (cout,)
    return shapes


def count_params(config: ModelConfig) -> int:
    """Number of learnable scalars; batch-norm running statistics are not counted."""
    total = 0
    for name, shape in parameter_shapes(config).items():
        if not name.endswith(_BUFFER_SUFFIXES):
            total += int(np.prod(shape))
    return total


def _init_tensors(config: ModelConfig, seed: int) -> dict[str, torch.Tensor]:
    gen = torch.Generator().manual_seed(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            upconv = name.startswith("up")
            fan_in = shape[0] if upconv else shape[1] * shape[2] * shape[3]
            std = (2.0 / fan_in) ** 0.5
            tensors[name] = torch.randn(shape, generator=gen) * std
        elif name.endswith((".bn_weight", ".running_var")):
            tensors[name] = torch.ones(shape)
        else:
            tensors[name] = torch.zeros(shape)
    return tensors


def unet_init(config: UNetConfig, seed: int) -> Checkpoint:
    """He (fan-in) normal weights, zero biases."""
    return Checkpoint(config=config, tensors=_init_tensors(config, seed), seeds=[seed])


def voxelwise_init(config: VoxelwiseConfig, seed: int) -> Checkpoint:
    return Checkpoint(config=config, tensors=_init_tensors(config, seed), seeds=[seed])


# ---------------------------------------------------------------------------
# receptive fields


def _stacked_field(kernels) -> int:
    """Field of a stride-1 convolution stack."""
    return 1 + sum(k - 1 for k in kernels)


def stacked_field(kernels) -> int:
    return _stacked_field(kernels)


def receptive_field(config: ModelConfig):
    """Input extent that can influence one output pixel.

    For the voxelwise net this is ``{patch_size: field}`` per pathway.  For the
    U-Net it is the deepest path's extent, ``13 * 2**depth - 8``: two 3x3 convs
    per level on both sides, a 2x2 pool per level, and the bottleneck convs.
    """
    if isinstance(config, VoxelwiseConfig):
        return {p.patch_size: _stacked_field(p.kernels) for p in config.pathways}
    field_, jump = 1, 1
    for _ in range(config.depth):
        field_ += 4 * jump  # two 3x3 convs
        field_ += jump  # 2x2 pool, stride 2
        jump *= 2
    field_ += 4 * jump
    for _ in range(config.depth):
        jump //= 2  # 2x2 stride-2 up-convolution adds no extent
        field_ += 4 * jump
    return field_


# ---------------------------------------------------------------------------
# forward passes


def _as_nchw(batch) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(batch, dtype=np.float32)) if not torch.is_tensor(batch) else batch.float()
    if x.dim() == 2:
        x = x[None]
    return x[:, None]


def unet_logits(tensors: dict[str, torch.Tensor], config: UNetConfig, x: torch.Tensor) -> torch.Tensor:
    """N x C x H x W in, N x n_classes x H x W logits out."""
    t = tensors

    def conv(name, h):
        return F.relu(F.conv2d(h, t[f"{name}.weight"], t[f"{name}.bias"], padding=1))

    skips = []
    h = x
    for level in range(config.depth):
        h = conv(f"enc{level}.conv2", conv(f"enc{level}.conv1", h))
        skips.append(h)
        h = F.max_pool2d(h, 2, stride=2)
    h = conv("bottom.conv2", conv("bottom.conv1", h))
    for level in reversed(range(config.depth)):
        h = F.conv_transpose2d(h, t[f"up{level}.weight"], t[f"up{level}.bias"], stride=2)
        h = torch.cat([skips[level], h], dim=1)
        h = conv(f"dec{level}.conv2", conv(f"dec{level}.conv1", h))
    return F.conv2d(h, t["head.weight"], t["head.bias"])


def unet_forward(ckpt: Checkpoint, batch) -> torch.Tensor:
    """B x H x W normalized slices -> B x H x W x 2 logits (inference mode)."""
    config = ckpt.config
    x = _as_nchw(batch)
    h, w = x.shape[-2:]
    if h % config.multiple or w % config.multiple:
        raise ValueError(
            f"slice size {h}x{w} is not divisible by {config.multiple} (2**depth); "
            "pad it first with data.pad_to_multiple"
        )
    with torch.no_grad():
        out = unet_logits(ckpt.tensors, config, x)
    return out.permute(0, 2, 3, 1)


def _pathway(tensors, config: VoxelwiseConfig, spec: PathwaySpec, x, training: bool):
    prefix = f"p{spec.patch_size}"
    for i in range(len(spec.kernels)):
        name = f"{prefix}.conv{i + 1}"
        x = F.relu(F.conv2d(x, tensors[f"{name}.weight"], tensors[f"{name}.bias"]))
        x = F.batch_norm(
            x,
            tensors[f"{name}.running_mean"],
            tensors[f"{name}.running_var"],
            tensors[f"{name}.bn_weight"],
            tensors[f"{name}.bn_bias"],
            training=training,
            momentum=BN_MOMENTUM,
            eps=BN_EPS,
        )
    return x


def _fuse(tensors, features):
    return F.conv2d(torch.cat(features, dim=1), tensors["fusion.weight"], tensors["fusion.bias"])


def voxelwise_patch_logits(
    tensors: dict[str, torch.Tensor],
    config: VoxelwiseConfig,
    patches: dict[int, torch.Tensor],
    training: bool = False,
) -> torch.Tensor:
    """Centre-voxel logits (N x 2) from batched patches ``{size: N x size x size}``.

    Each pathway sees only the central window matching its receptive field; with
    VALID convolutions this is exactly the centre of the pathway's full output map.
    """
    feats = []
    for spec in config.pathways:
        p = patches[spec.patch_size]
        if p.shape[-1] != spec.patch_size or p.shape[-2] != spec.patch_size:
            raise ValueError(f"expected {spec.patch_size}x{spec.patch_size} patches, got {tuple(p.shape[-2:])}")
        field_ = _stacked_field(spec.kernels)
        lo = (spec.patch_size - field_) // 2
        window = p[..., lo : lo + field_, lo : lo + field_]
        feats.append(_pathway(tensors, config, spec, window.reshape(-1, 1, field_, field_), training))
    return _fuse(tensors, feats)[:, :, 0, 0]


def voxelwise_forward_patch(ckpt: Checkpoint, sample) -> torch.Tensor:
    """Two centre-voxel logits for one PatchSample."""
    patches = {}
    for spec in ckpt.config.pathways:
        if spec.patch_size not in sample.patches:
            raise ValueError(f"sample lacks a {spec.patch_size}x{spec.patch_size} patch")
        patches[spec.patch_size] = torch.as_tensor(np.asarray(sample.patches[spec.patch_size], dtype=np.float32))[None]
    with torch.no_grad():
        return voxelwise_patch_logits(ckpt.tensors, ckpt.config, patches)[0]


def voxelwise_image_logits(tensors, config: VoxelwiseConfig, x: torch.Tensor, training: bool = False):
    """Dense N x 2 x H x W logits; each pathway zero-pads the slice by half its field."""
    feats = []
    for spec in config.pathways:
        half = _stacked_field(spec.kernels) // 2
        feats.append(_pathway(tensors, config, spec, F.pad(x, (half, half, half, half)), training))
    return _fuse(tensors, feats)


def voxelwise_forward_image(ckpt: Checkpoint, slice2d) -> torch.Tensor:
    """H x W normalized slice (or B x H x W batch) -> matching ... x 2 dense logits."""
    arr = np.asarray(slice2d, dtype=np.float32)
    x = _as_nchw(arr)
    with torch.no_grad():
        out = voxelwise_image_logits(ckpt.tensors, ckpt.config, x).permute(0, 2, 3, 1)
    return out[0] if arr.ndim == 2 else out


def forward_probs(ckpt: Checkpoint, batch: np.ndarray) -> np.ndarray:
    """Brain-class probability for B x H x W slices whose size suits the model."""
    if ckpt.kind == "unet":
        logits = unet_forward(ckpt, batch)
    else:
        logits = voxelwise_forward_image(ckpt, np.asarray(batch, dtype=np.float32).reshape(-1, *np.shape(batch)[-2:]))
    return torch.softmax(logits, dim=-1)[..., 1].numpy()

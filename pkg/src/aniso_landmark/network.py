"""Small U-Net heatmap predictor with a pyramid covariance branch.

The model is written functionally over a flat ``{name: tensor}`` parameter
dict so checkpoints, optimizers and gradient audits can address every tensor by
a stable name. Layout for the default config (64x64 input, 5 stages)::

    image -> conv s1 (64) -> pool+conv s2 (32) -> s3 (16) -> s4 (8) -> s5 (4)
    s5 -> up+cat s4 -> MSFD -> up+cat s3 -> MSFD -> ... -> MSFD (64) -> 1x1 -> N heatmaps
    [s1, s2] -> avgpool 4x4 -> cat -> attention -> token mean --+
    [s3, s4, s5] -> avgpool 4x4 -> cat -> attention -> token mean --+-> FC -> 3N raw
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .covariance import PositivityMode

NUM_STAGES = 5
LOW_STAGES = (0, 1)
HIGH_STAGES = (2, 3, 4)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    num_landmarks: int = 4
    encoder_channels: tuple[int, ...] = (8, 16, 32, 32, 32)
    msfd_dilations: tuple[int, ...] = (1, 2, 4)
    attention_dim: int = 16
    pooled_resolution: tuple[int, int] = (4, 4)
    positivity_mode: PositivityMode = PositivityMode.PAPER_FAITHFUL
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "encoder_channels", tuple(int(v) for v in self.encoder_channels))
        object.__setattr__(self, "msfd_dilations", tuple(int(v) for v in self.msfd_dilations))
        object.__setattr__(self, "pooled_resolution", tuple(int(v) for v in self.pooled_resolution))
        object.__setattr__(self, "positivity_mode", PositivityMode(self.positivity_mode))
        h, w = self.input_size
        div = 2 ** (NUM_STAGES - 1)
        if h % div or w % div or h <= 0 or w <= 0:
            raise ValueError(f"input size {self.input_size} must be positive and divisible by {div}")
        if len(self.encoder_channels) != NUM_STAGES or min(self.encoder_channels) < 1:
            raise ValueError(f"encoder needs exactly {NUM_STAGES} positive channel counts")
        if not self.msfd_dilations or min(self.msfd_dilations) < 1:
            raise ValueError("msfd_dilations must be a non-empty list of positive integers")
        if self.attention_dim < 1 or self.num_landmarks < 1:
            raise ValueError("attention_dim and num_landmarks must be >= 1")
        if min(self.pooled_resolution) < 1:
            raise ValueError("pooled_resolution must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positivity_mode"] = self.positivity_mode.value
        for k in ("input_size", "encoder_channels", "msfd_dilations", "pooled_resolution"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelOutput:
    heatmaps: torch.Tensor  # (B, N, H, W)
    raw_cholesky: torch.Tensor  # (B, N, 3)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable tensor, in a fixed order."""
    ch = cfg.encoder_channels
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 1
    for s in range(NUM_STAGES):
        shapes[f"enc{s}.weight"] = (ch[s], cin, 3, 3)
        shapes[f"enc{s}.bias"] = (ch[s],)
        cin = ch[s]
    prev = ch[-1]
    for k in range(NUM_STAGES - 1):
        skip = ch[NUM_STAGES - 2 - k]
        cat = prev + skip
        for j, _ in enumerate(cfg.msfd_dilations):
            shapes[f"dec{k}.branch{j}.weight"] = (skip, cat, 3, 3)
            shapes[f"dec{k}.branch{j}.bias"] = (skip,)
        shapes[f"dec{k}.reduce.weight"] = (skip, skip * len(cfg.msfd_dilations), 1, 1)
        shapes[f"dec{k}.reduce.bias"] = (skip,)
        prev = skip
    shapes["heatmap_head.weight"] = (cfg.num_landmarks, ch[0], 1, 1)
    shapes["heatmap_head.bias"] = (cfg.num_landmarks,)
    d = cfg.attention_dim
    for name, stages in (("low", LOW_STAGES), ("high", HIGH_STAGES)):
        width = sum(ch[s] for s in stages)
        shapes[f"attn_{name}.w_q"] = (width, d)
        shapes[f"attn_{name}.w_k"] = (width, d)
        shapes[f"attn_{name}.w_v"] = (width, width)
    feat = sum(ch)
    shapes["cov_head.weight"] = (3 * cfg.num_landmarks, feat)
    shapes["cov_head.bias"] = (3 * cfg.num_landmarks,)
    return shapes


def fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("attn_"):
        return shape[0]
    if name.endswith(".bias"):
        return 1
    return int(np.prod(shape[1:]))


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int | None = None,
                dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """Fan-in scaled uniform weights with variance ``1/fan_in``; zero biases."""
    gen = torch.Generator().manual_seed(int(cfg.seed if seed is None else seed) & 0xFFFF_FFFF_FFFF_FFFF)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            t = torch.zeros(shape, dtype=torch.float64)
        else:
            bound = math.sqrt(3.0 / fan_in(name, shape))
            t = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0) * bound
        params[name] = t.to(dtype)
    return params


def _check_images(images: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    if images.dim() == 2:
        images = images[None]
    if images.dim() == 3:
        images = images[:, None]
    if images.dim() != 4 or images.shape[1] != 1 or tuple(images.shape[-2:]) != cfg.input_size:
        raise ShapeError(f"expected image(s) of size {cfg.input_size}, got {tuple(images.shape)}")
    return images


def encoder_forward(images: torch.Tensor, params: dict, cfg: ModelConfig) -> list[torch.Tensor]:
    """Five feature maps; every stage after the first starts with a 2x max-pool."""
    x = _check_images(images, cfg)
    stages = []
    for s in range(NUM_STAGES):
        if s:
            x = F.max_pool2d(x, 2)
        x = F.relu(F.conv2d(x, params[f"enc{s}.weight"], params[f"enc{s}.bias"], padding=1))
        stages.append(x)
    return stages


def msfd_block(x: torch.Tensor, params: dict, prefix: str, dilations) -> torch.Tensor:
    """Parallel dilated 3x3 convolutions, concatenated, reduced by a 1x1 convolution."""
    branches = []
    for j, d in enumerate(dilations):
        w = params[f"{prefix}.branch{j}.weight"]
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"{prefix}: expected {w.shape[1]} input channels, got {x.shape[1]}")
        branches.append(F.relu(F.conv2d(x, w, params[f"{prefix}.branch{j}.bias"], padding=d, dilation=d)))
    cat = torch.cat(branches, dim=1)
    return F.relu(F.conv2d(cat, params[f"{prefix}.reduce.weight"], params[f"{prefix}.reduce.bias"]))


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def decoder_forward(stages: list[torch.Tensor], params: dict, cfg: ModelConfig) -> torch.Tensor:
    if len(stages) != NUM_STAGES:
        raise ShapeError(f"expected {NUM_STAGES} pyramid stages, got {len(stages)}")
    y = stages[-1]
    for k in range(NUM_STAGES - 1):
        skip = stages[NUM_STAGES - 2 - k]
        up = upsample2x(y)
        if up.shape[-2:] != skip.shape[-2:]:
            raise ShapeError(f"decoder stage {k}: upsampled {tuple(up.shape)} vs skip {tuple(skip.shape)}")
        y = msfd_block(torch.cat([up, skip], dim=1), params, f"dec{k}", cfg.msfd_dilations)
    # no rectifier on the head: the soft-argmax applies its own activation
    return F.conv2d(y, params["heatmap_head.weight"], params["heatmap_head.bias"])


def self_attention(X: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor) -> torch.Tensor:
    """Single-head scaled dot-product attention over tokens ``X`` of shape (..., T, D)."""
    q, k, v = X @ w_q, X @ w_k, X @ w_v
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(k.shape[-1]), dim=-1)
    return weights @ v


def _pyramid_tokens(stages, which, pooled) -> torch.Tensor:
    pooled_maps = [F.adaptive_avg_pool2d(stages[s], pooled) for s in which]
    cat = torch.cat(pooled_maps, dim=1)  # (B, D, h, w)
    return cat.flatten(2).transpose(1, 2)  # (B, T, D)


def covariance_branch(stages: list[torch.Tensor], params: dict, cfg: ModelConfig) -> torch.Tensor:
    """Raw (pre-positivity) Cholesky outputs of shape (B, N, 3)."""
    if len(stages) != NUM_STAGES:
        raise ShapeError(f"expected {NUM_STAGES} pyramid stages, got {len(stages)}")
    fused = []
    for name, which in (("low", LOW_STAGES), ("high", HIGH_STAGES)):
        tokens = _pyramid_tokens(stages, which, cfg.pooled_resolution)
        w_q = params[f"attn_{name}.w_q"]
        if tokens.shape[-1] != w_q.shape[0]:
            raise ShapeError(f"attn_{name}: token width {tokens.shape[-1]} != {w_q.shape[0]}")
        out = self_attention(tokens, w_q, params[f"attn_{name}.w_k"], params[f"attn_{name}.w_v"])
        fused.append(out.mean(dim=1))
    feat = torch.cat(fused, dim=1)
    raw = F.linear(feat, params["cov_head.weight"], params["cov_head.bias"])
    return raw.view(raw.shape[0], cfg.num_landmarks, 3)


def model_forward(images: torch.Tensor, params: dict, cfg: ModelConfig) -> ModelOutput:
    stages = encoder_forward(images, params, cfg)
    return ModelOutput(decoder_forward(stages, params, cfg), covariance_branch(stages, params, cfg))


def save_checkpoint(path, params: dict, cfg: ModelConfig, extra: dict | None = None) -> Path:
    """Write ``<stem>.bin`` (concatenated little-endian float64) and ``<stem>.json`` manifest."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".bin", ".json") else path
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    tensors, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name in param_shapes(cfg):
            arr = params[name].detach().cpu().to(torch.float64).numpy()
            fh.write(arr.astype("<f8").tobytes())
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    manifest = {"format": "aniso-landmark-checkpoint", "version": 1, "dtype": "<f8",
                "data": bin_path.name, "model": cfg.to_dict(), "tensors": tensors}
    if extra:
        manifest["extra"] = extra
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return json_path


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> tuple[dict, ModelConfig, dict]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".bin", ".json") else path
    manifest = json.loads(stem.with_suffix(".json").read_text())
    cfg = ModelConfig.from_dict(manifest["model"])
    flat = np.fromfile(stem.with_suffix(".json").parent / manifest["data"], dtype="<f8")
    expected = param_shapes(cfg)
    params = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise ShapeError(f"checkpoint tensor {name} has shape {shape}, config expects {expected.get(name)}")
        n = int(np.prod(shape))
        chunk = flat[entry["offset"]:entry["offset"] + n]
        if chunk.size != n:
            raise ShapeError(f"checkpoint data truncated in tensor {name}")
        params[name] = torch.from_numpy(chunk.reshape(shape).copy()).to(dtype)
    missing = set(expected) - set(params)
    if missing:
        raise ShapeError(f"checkpoint missing tensors: {sorted(missing)}")
    return params, cfg, manifest.get("extra", {})

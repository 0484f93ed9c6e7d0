"""Frozen TDNN feature encoder: strided conv, then residual blocks of conv layers.

The encoder only runs in inference mode (batch norm on running stats,
dropout off); nothing here ever builds a gradient graph.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import neural as nn
from .archive import (config_from_kv, config_to_kv, load_archive, load_kv, require, save_archive, save_kv)
from .dsp import MelFrames, log_mel
from .errors import ConfigMismatch, NotFound, ShapeMismatch, VersionMismatch
from .audio_io import Waveform

CONFIG_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 64
    down_channels: int = 64
    down_kernel: int = 11
    downsample_stride: int = 2
    n_blocks: int = 7
    layers_per_block: int = 5
    channels: tuple[int, ...] = (64,) * 7
    kernel_sizes: tuple[int, ...] = (5,) * 7
    dropout_rate: float = 0.0
    tap_block: int = 7  # number of blocks run; the last one's output is the latent
    input_norm: str = "utterance"  # per-utterance mean/variance normalization of each mel bin, or "none"
    preset: str = "toy"

    def __post_init__(self):
        if len(self.channels) != self.n_blocks or len(self.kernel_sizes) != self.n_blocks:
            raise ConfigMismatch(
                f"encoder: {self.n_blocks} blocks but {len(self.channels)} channel entries "
                f"and {len(self.kernel_sizes)} kernel sizes"
            )
        if self.preset == "paper" and (self.n_blocks != 7 or self.layers_per_block != 5):
            raise ConfigMismatch("encoder: paper preset requires 7 blocks of 5 layers")
        if not 1 <= self.tap_block <= self.n_blocks:
            raise ConfigMismatch(f"encoder: tap_block {self.tap_block} outside 1..{self.n_blocks}")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigMismatch("encoder: block kernel sizes must be odd")
        if self.input_norm not in ("utterance", "none"):
            raise ConfigMismatch(f"encoder: unknown input_norm {self.input_norm!r}")

    @property
    def latent_channels(self) -> int:
        return self.channels[self.tap_block - 1]

    @classmethod
    def toy(cls, **overrides) -> "EncoderConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "EncoderConfig":
        kw = dict(
            down_channels=256,
            channels=(256, 256, 384, 384, 512, 512, 640),
            kernel_sizes=(11, 11, 13, 13, 17, 17, 21),
            dropout_rate=0.2,
            preset="paper",
        )
        kw.update(overrides)
        return cls(**kw)


@dataclass
class LatentSeq:
    features: np.ndarray  # [C_lat, T_lat]

    @property
    def channels(self) -> int:
        return self.features.shape[0]

    def __len__(self):
        return self.features.shape[1]


def latent_length(n_frames: int, stride: int = 2) -> int:
    return -(-n_frames // stride)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "enc.down.weight": (config.down_channels, config.n_mels, config.down_kernel),
        "enc.down.bias": (config.down_channels,),
    }
    c_in = config.down_channels
    for i in range(config.n_blocks):
        c_out, k = config.channels[i], config.kernel_sizes[i]
        layer_in = c_in
        for j in range(config.layers_per_block):
            pre = f"enc.block{i}.layer{j}."
            shapes[pre + "weight"] = (c_out, layer_in, k)
            for name in ("bias", "bn_gamma", "bn_beta", "bn_mean", "bn_var"):
                shapes[pre + name] = (c_out,)
            layer_in = c_out
        shapes[f"enc.proj{i}.weight"] = (c_out, c_in, 1)
        shapes[f"enc.proj{i}.bias"] = (c_out,)
        c_in = c_out
    return shapes


def init_random_encoder(config: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded stand-in for pre-trained weights.

    Conv weights feeding a ReLU use He-uniform bounds, the linear residual
    projections a variance-preserving bound; biases are uniform in
    +-1/sqrt(fan_in). Batch-norm stats start at mean 0, variance 1.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "weight":
            fan_in = shape[1] * shape[2]
            gain = 3.0 if ".proj" in name else 6.0
            bound = math.sqrt(gain / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            last_fan_in = fan_in
        elif leaf == "bias":
            bound = 1.0 / math.sqrt(last_fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif leaf in ("bn_gamma", "bn_var"):
            params[name] = np.ones(shape, np.float32)
        else:
            params[name] = np.zeros(shape, np.float32)
    return params


def validate_params(params: dict[str, np.ndarray], config: EncoderConfig, source="encoder") -> None:
    for name, shape in param_shapes(config).items():
        require(params, name, shape, source=source)


def normalize_mel(mel: MelFrames) -> MelFrames:
    """Per-utterance mean/variance normalization of every mel bin."""
    x = mel.frames.astype(np.float64)
    mu = x.mean(axis=0, keepdims=True)
    sd = x.std(axis=0, keepdims=True)
    out = ((x - mu) / (sd + 1e-5)).astype(np.float32)
    return MelFrames(out, hop_samples=mel.hop_samples, window_samples=mel.window_samples)


def encode(mel: MelFrames, params: dict[str, np.ndarray], config: EncoderConfig) -> LatentSeq:
    """Map ``[T_frames, n_mels]`` frames to a ``[C_lat, ceil(T_frames/2)]`` latent."""
    if mel.n_mels != config.n_mels:
        raise ShapeMismatch(f"encode: mel has {mel.n_mels} bins, config expects {config.n_mels}")
    p = params
    x = nn.conv1d(mel.frames.T.astype(np.float32), p["enc.down.weight"], p["enc.down.bias"],
                  stride=config.downsample_stride, padding="same")
    x = nn.clipped_relu(x)
    for i in range(config.tap_block):
        block_in = x
        for j in range(config.layers_per_block):
            pre = f"enc.block{i}.layer{j}."
            x = nn.conv1d(x, p[pre + "weight"], p[pre + "bias"], padding="same")
            stats = nn.RunningStats(x.shape[0], p[pre + "bn_mean"], p[pre + "bn_var"])
            x = nn.batch_norm(x, p[pre + "bn_gamma"], p[pre + "bn_beta"], stats, train=False)
            x = nn.clipped_relu(x)
            x = nn.dropout(x, config.dropout_rate, None, train=False)
        x = nn.add(x, nn.conv1d(block_in, p[f"enc.proj{i}.weight"], p[f"enc.proj{i}.bias"], padding="same"))
    return LatentSeq(x.data)


def encoder_input(w: Waveform, config: EncoderConfig) -> MelFrames:
    mel = log_mel(w, n_mels=config.n_mels)
    return normalize_mel(mel) if config.input_norm == "utterance" else mel


def encode_waveform(w: Waveform, params, config: EncoderConfig) -> LatentSeq:
    return encode(encoder_input(w, config), params, config)


def affected_latents(config: EncoderConfig, frame: int, n_frames: int) -> tuple[int, int]:
    """Inclusive range of latent positions that mel frame ``frame`` can influence.

    Covers only :func:`encode`; utterance normalization, when enabled, is
    global by construction.
    """
    k, s = config.down_kernel, config.downsample_stride
    T_out = latent_length(n_frames, s)
    total = max(0, (T_out - 1) * s + k - n_frames)
    left = total // 2
    # down output j reads frames j*s - left .. j*s - left + k - 1
    lo = math.ceil((frame + left - (k - 1)) / s)
    hi = (frame + left) // s
    L = config.layers_per_block
    for kk in config.kernel_sizes[:config.tap_block]:
        # a 'same' layer spreads input p over outputs p-right .. p+left
        pad_left = (kk - 1) // 2
        lo -= (kk - 1 - pad_left) * L
        hi += pad_left * L
    return max(lo, 0), min(hi, T_out - 1)


def _cfg_path(path) -> str:
    return os.fspath(path) + ".cfg"


def save_encoder(path, config: EncoderConfig, params: dict[str, np.ndarray]) -> None:
    validate_params(params, config)
    ordered = {name: params[name] for name in param_shapes(config)}
    save_archive(path, ordered)
    save_kv(_cfg_path(path), {"version": CONFIG_VERSION, **config_to_kv(config)})


def load_encoder(path) -> tuple[EncoderConfig, dict[str, np.ndarray]]:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise NotFound(f"{path}: no such file")
    items = load_kv(_cfg_path(path))
    version = int(items.get("version", "0"))
    if version != CONFIG_VERSION:
        raise VersionMismatch(f"{path}: encoder config version {version}, expected {CONFIG_VERSION}")
    config = config_from_kv(EncoderConfig, items, source=_cfg_path(path))
    params = load_archive(path)
    validate_params(params, config, source=path)
    for arr in params.values():
        arr.setflags(write=False)
    return config, params

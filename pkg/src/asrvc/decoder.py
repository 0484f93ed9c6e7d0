"""Speaker-conditioned WaveNet decoder.

Conditioning is the encoder latent (repeated 320x to audio rate), the speaker
embedding (broadcast in time) and optionally two F0 channels (repeated 160x).
Each residual layer and the first post-skip FC layer see it through their
own 1x1 projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import neural as nn
from .archive import require
from .audio_io import N_CLASSES, ZERO_INDEX
from .dsp import F0Contour, f0_features
from .encoder import LatentSeq
from .errors import DuplicateSpeaker, MissingF0, ShapeMismatch, UnknownSpeaker


@dataclass(frozen=True)
class DecoderConfig:
    n_blocks: int = 4
    layers_per_block: int = 10
    kernel_size: int = 2
    residual_channels: int = 128
    skip_channels: int = 128
    n_classes: int = N_CLASSES
    latent_channels: int = 64
    speaker_dim: int = 64
    use_f0: bool = False
    upsample_factor_latent: int = 320
    upsample_factor_f0: int = 160
    wav_skip: bool = True  # skip term computed from the embedded input waveform
    fc_cond: bool = True  # conditioning projection added after the first FC layer
    preset: str = "paper"

    @property
    def dilations(self) -> tuple[int, ...]:
        return tuple(2 ** j for j in range(self.layers_per_block)) * self.n_blocks

    @property
    def n_layers(self) -> int:
        return self.n_blocks * self.layers_per_block

    @property
    def cond_channels(self) -> int:
        return self.latent_channels + self.speaker_dim + (2 if self.use_f0 else 0)

    @classmethod
    def paper(cls, **overrides) -> "DecoderConfig":
        return cls(**overrides)

    @classmethod
    def toy(cls, **overrides) -> "DecoderConfig":
        kw = dict(n_blocks=2, layers_per_block=5, residual_channels=32, skip_channels=32, preset="toy")
        kw.update(overrides)
        return cls(**kw)


def receptive_field(config: DecoderConfig) -> int:
    return 1 + (config.kernel_size - 1) * sum(config.dilations)


# -- conditioning ---------------------------------------------------------------

def _column_index(length: int, factor: int, offset: int) -> np.ndarray:
    return (np.arange(length) + offset) // factor


def _repeat_cols(m: np.ndarray, factor: int, length: int, offset: int = 0) -> np.ndarray:
    """Nearest-neighbour upsampling: output column t is ``m[:, (t+offset)//factor]``, zero past the end."""
    idx = _column_index(length, factor, offset)
    n = m.shape[1]
    if n == 0:
        return np.zeros((m.shape[0], length), m.dtype)
    out = m[:, np.minimum(idx, n - 1)]
    if idx.size and idx[-1] >= n:
        out[:, idx >= n] = 0
    return out


def _fold_cols(g: np.ndarray, factor: int, n_cols: int, offset: int = 0) -> np.ndarray:
    """Adjoint of :func:`_repeat_cols`."""
    T = g.shape[1]
    if offset % factor == 0 and T % factor == 0 and offset // factor + T // factor <= n_cols:
        # aligned windows (the training case): one reshape-sum
        out = np.zeros((g.shape[0], n_cols), g.dtype)
        k = offset // factor
        out[:, k:k + T // factor] = g.reshape(g.shape[0], T // factor, factor).sum(axis=2)
        return out
    idx = _column_index(T, factor, offset)
    keep = idx < n_cols
    idx, g = idx[keep], g[:, keep]
    out = np.zeros((g.shape[0], n_cols), g.dtype)
    if idx.size:
        starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
        out[:, idx[starts]] = np.add.reduceat(g, starts, axis=1)
    return out


@dataclass
class ConditioningSeq:
    """Audio-rate conditioning kept in factored form.

    ``channels`` materializes the dense ``[cond_channels, length]`` matrix
    (rows ordered latent, speaker, f0); the decoder itself never needs it.
    """

    latent: np.ndarray  # [C_lat, T_lat]
    speaker: object  # ndarray [d_spk] or a Tensor when the embedding is being trained
    f0: np.ndarray | None  # [2, T_f0]
    length: int
    latent_hop: int = 320
    f0_hop: int = 160
    offset: int = 0  # audio position of column 0 (non-zero for windows)

    @property
    def speaker_array(self) -> np.ndarray:
        return self.speaker.data if isinstance(self.speaker, nn.Tensor) else np.asarray(self.speaker)

    @property
    def n_channels(self) -> int:
        return self.latent.shape[0] + self.speaker_array.size + (0 if self.f0 is None else self.f0.shape[0])

    @property
    def channels(self) -> np.ndarray:
        parts = [
            _repeat_cols(self.latent, self.latent_hop, self.length, self.offset),
            np.repeat(self.speaker_array[:, None], self.length, axis=1),
        ]
        if self.f0 is not None:
            parts.append(_repeat_cols(self.f0, self.f0_hop, self.length, self.offset))
        return np.concatenate(parts, axis=0).astype(np.float32)

    def window(self, start: int, stop: int) -> "ConditioningSeq":
        """The conditioning for audio positions ``start:stop``."""
        return ConditioningSeq(self.latent, self.speaker, self.f0, stop - start,
                               self.latent_hop, self.f0_hop, self.offset + start)

    def column(self, t: int) -> np.ndarray:
        t = t + self.offset
        i = t // self.latent_hop
        lat = self.latent[:, i] if i < self.latent.shape[1] else np.zeros(self.latent.shape[0], self.latent.dtype)
        parts = [lat, self.speaker_array]
        if self.f0 is not None:
            k = t // self.f0_hop
            parts.append(self.f0[:, k] if k < self.f0.shape[1] else np.zeros(self.f0.shape[0], self.f0.dtype))
        return np.concatenate(parts).astype(np.float32)

    def __len__(self):
        return self.length


def build_conditioning(latent: LatentSeq, v, f0: F0Contour | None, target_len: int | None,
                       config: DecoderConfig) -> ConditioningSeq:
    """Combine latent, speaker vector and (if configured) F0 into decoder conditioning.

    ``target_len`` defaults to ``T_lat * 320``; shorter targets trim, longer
    ones are zero-padded on the right.
    """
    feats = np.asarray(latent.features, dtype=np.float32)
    if feats.shape[0] != config.latent_channels:
        raise ShapeMismatch(f"conditioning: latent has {feats.shape[0]} channels, decoder expects {config.latent_channels}")
    spk = v if isinstance(v, nn.Tensor) else np.asarray(v, dtype=np.float32)
    spk_size = spk.data.size if isinstance(spk, nn.Tensor) else spk.size
    if spk_size != config.speaker_dim:
        raise ShapeMismatch(f"conditioning: speaker vector has {spk_size} entries, expected {config.speaker_dim}")
    f0_mat = None
    if config.use_f0:
        if f0 is None:
            raise MissingF0("decoder was configured with F0 conditioning but no F0 contour was given")
        f0_mat = f0_features(f0)
    length = feats.shape[1] * config.upsample_factor_latent if target_len is None else int(target_len)
    return ConditioningSeq(feats, spk, f0_mat, length, config.upsample_factor_latent, config.upsample_factor_f0)


def project_conditioning(weight, bias, cond: ConditioningSeq) -> nn.Tensor:
    """``W @ cond.channels + b`` computed without materializing the dense conditioning.

    Exact up to float rounding because column repetition commutes with a
    pointwise linear map.
    """
    weight, bias = nn.as_tensor(weight), nn.as_tensor(bias)
    spk_t = cond.speaker if isinstance(cond.speaker, nn.Tensor) else None
    spk = cond.speaker_array
    n_lat, n_spk = cond.latent.shape[0], spk.size
    if weight.shape[1] != cond.n_channels:
        raise ShapeMismatch(f"conditioning projection: weight {weight.shape} vs {cond.n_channels} channels")
    W = weight.data
    Wl, Ws, Wf = W[:, :n_lat], W[:, n_lat:n_lat + n_spk], W[:, n_lat + n_spk:]
    T = cond.length
    T_lat = cond.latent.shape[1]
    off = cond.offset
    out = _repeat_cols(Wl @ cond.latent, cond.latent_hop, T, off)
    out += (Ws @ spk + bias.data)[:, None]
    if cond.f0 is not None:
        out += _repeat_cols(Wf @ cond.f0, cond.f0_hop, T, off)
    parents = [weight, bias] + ([spk_t] if spk_t is not None else [])

    def backward(g):
        gsum = g.sum(axis=1)
        gW = np.empty_like(W)
        gW[:, :n_lat] = _fold_cols(g, cond.latent_hop, T_lat, off) @ cond.latent.T
        gW[:, n_lat:n_lat + n_spk] = np.outer(gsum, spk)
        if cond.f0 is not None:
            gW[:, n_lat + n_spk:] = _fold_cols(g, cond.f0_hop, cond.f0.shape[1], off) @ cond.f0.T
        grads = [gW, gsum]
        if spk_t is not None:
            grads.append((Ws.T @ gsum).reshape(spk_t.shape))
        return grads

    return nn._result(out.astype(W.dtype), parents, backward, "project_conditioning")


# -- parameters -----------------------------------------------------------------

def param_shapes(config: DecoderConfig) -> dict[str, tuple[int, ...]]:
    R, S, C, K = config.residual_channels, config.skip_channels, config.cond_channels, config.kernel_size
    shapes = {"dec.embed": (config.n_classes, R)}
    for l in range(config.n_layers):
        pre = f"dec.layer{l}."
        shapes[pre + "dil_w"] = (2 * R, R, K)
        shapes[pre + "dil_b"] = (2 * R,)
        shapes[pre + "cond_w"] = (2 * R, C)
        shapes[pre + "cond_b"] = (2 * R,)
        if l < config.n_layers - 1:  # the last layer's residual output would feed nothing
            shapes[pre + "res_w"] = (R, R)
            shapes[pre + "res_b"] = (R,)
        shapes[pre + "skip_w"] = (S, R)
        shapes[pre + "skip_b"] = (S,)
    if config.wav_skip:
        shapes["dec.wavskip_w"] = (S, R)
        shapes["dec.wavskip_b"] = (S,)
    shapes["dec.fc1_w"] = (S, S)
    shapes["dec.fc1_b"] = (S,)
    if config.fc_cond:
        shapes["dec.fccond_w"] = (S, C)
        shapes["dec.fccond_b"] = (S,)
    shapes["dec.fc2_w"] = (config.n_classes, S)
    shapes["dec.fc2_b"] = (config.n_classes,)
    return shapes


def init_decoder(config: DecoderConfig, seed: int) -> dict[str, np.ndarray]:
    """Uniform fan-in initialization; the input embedding is U(-1, 1)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name == "dec.embed":
            params[name] = rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)
            continue
        base = name[:-2]
        w_shape = param_shapes(config)[base + "_w"] if name.endswith("_b") else shape
        fan_in = int(np.prod(w_shape[1:]))
        params[name] = nn.uniform_fan_in(rng, shape, fan_in)
    return params


def zero_decoder(config: DecoderConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape, np.float32) for name, shape in param_shapes(config).items()}


def validate_params(params, config: DecoderConfig, source: str = "decoder") -> None:
    for name, shape in param_shapes(config).items():
        arr = params.get(name)
        require({name: arr.data if isinstance(arr, nn.Tensor) else arr} if arr is not None else {},
                name, shape, source=source)


# -- forward ----------------------------------------------------------------------

def shift_right(indices, first: int = ZERO_INDEX) -> np.ndarray:
    """Autoregressive input: position t sees x[t-1]; position 0 sees ``first`` (the zero sample)."""
    x = np.asarray(indices, dtype=np.int64).reshape(-1)
    return np.concatenate([[first], x[:-1]]) if x.size else x


def forward(params, indices, cond: ConditioningSeq, config: DecoderConfig, first: int = ZERO_INDEX) -> nn.Tensor:
    """Teacher-forced logits ``[n_classes, T]`` as a tensor (differentiable w.r.t. Tensor params).

    ``first`` is the sample preceding ``indices[0]``; only windowed
    recomputation passes anything but the zero sample.
    """
    x = np.asarray(indices, dtype=np.int64).reshape(-1)
    T = x.size
    if cond.length != T:
        raise ShapeMismatch(f"decoder: conditioning length {cond.length} vs input length {T}")
    if cond.n_channels != config.cond_channels:
        raise ShapeMismatch(f"decoder: conditioning has {cond.n_channels} channels, config expects {config.cond_channels}")
    p = params
    R = config.residual_channels
    h0 = nn.embedding(p["dec.embed"], shift_right(x, first))
    h, skip = h0, None
    for l, d in enumerate(config.dilations):
        pre = f"dec.layer{l}."
        a = nn.add(nn.conv1d(h, p[pre + "dil_w"], p[pre + "dil_b"], dilation=d, padding="causal"),
                   project_conditioning(p[pre + "cond_w"], p[pre + "cond_b"], cond))
        z = nn.gated_unit(nn.take_rows(a, 0, R), nn.take_rows(a, R, 2 * R))
        s = nn.dense(z, p[pre + "skip_w"], p[pre + "skip_b"])
        skip = s if skip is None else nn.add(skip, s)
        if l < config.n_layers - 1:
            h = nn.add(h, nn.dense(z, p[pre + "res_w"], p[pre + "res_b"]))
    if config.wav_skip:
        skip = nn.add(skip, nn.dense(h0, p["dec.wavskip_w"], p["dec.wavskip_b"]))
    out = nn.dense(nn.relu(skip), p["dec.fc1_w"], p["dec.fc1_b"])
    if config.fc_cond:
        out = nn.add(out, project_conditioning(p["dec.fccond_w"], p["dec.fccond_b"], cond))
    return nn.dense(nn.relu(out), p["dec.fc2_w"], p["dec.fc2_b"])


def teacher_forced_logits(indices, cond: ConditioningSeq, params, config: DecoderConfig) -> np.ndarray:
    """logits[:, t] scores x[t] given x[:t] and cond[:, :t+1]."""
    return forward(params, indices, cond, config).data


# -- speaker table ----------------------------------------------------------------

@dataclass
class SpeakerTable:
    embeddings: np.ndarray  # [k, d_spk]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.names = list(self.names)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.names):
            raise ShapeMismatch(f"speaker table: {self.embeddings.shape} rows vs {len(self.names)} names")
        if len(set(self.names)) != len(self.names):
            raise DuplicateSpeaker("speaker names must be unique")
        if not np.isfinite(self.embeddings).all():
            raise ShapeMismatch("speaker table has non-finite rows")

    def __len__(self):
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownSpeaker(name, self.names) from None

    def lookup(self, name: str) -> np.ndarray:
        return self.embeddings[self.index(name)].copy()

    def add(self, name: str, row) -> int:
        if name in self.names:
            raise DuplicateSpeaker(f"speaker {name!r} already in table")
        row = np.asarray(row, dtype=np.float32).reshape(1, self.dim)
        self.embeddings = np.concatenate([self.embeddings, row], axis=0)
        self.names.append(name)
        return len(self.names) - 1

    def mean_row(self) -> np.ndarray:
        """Mean of all rows, accumulated in float64 and rounded once to float32."""
        if not self.names:
            raise UnknownSpeaker("<mean>", [])
        return self.embeddings.astype(np.float64).mean(axis=0).astype(np.float32)

    @classmethod
    def random(cls, names, dim: int, seed: int) -> "SpeakerTable":
        rng = np.random.default_rng(seed)
        emb = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(len(names), dim)).astype(np.float32)
        return cls(emb, list(names))


def speaker_lookup(table: SpeakerTable, name: str) -> np.ndarray:
    return table.lookup(name)

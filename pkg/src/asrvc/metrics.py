"""Objective evaluation: mel-cepstral distortion over a DTW path, and a CNN speaker classifier."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import neural as nn
from .archive import (config_from_kv, config_to_kv, load_archive, load_kv, require, save_archive, save_kv,
                      tensor_to_text, text_to_tensor)
from .audio_io import Waveform, read_wav
from .dsp import WINDOW_SAMPLES, CepstraFrames, estimate_f0, f0_features, mel_cepstra
from .errors import (ConfigMismatch, EmptyInput, NotFound, ShapeMismatch, TooFewSpeakers, TooShort,
                     UnknownSpeaker, VersionMismatch)

MCD_SCALE = 10.0 / math.log(10.0) * math.sqrt(2.0)
CLASSIFIER_VERSION = 1
N_FEATURES = 15  # 13 cepstra + normalized log-F0 + voicing


# -- DTW / MCD -----------------------------------------------------------------

@dataclass
class DtwPath:
    pairs: list[tuple[int, int]]
    cost: float

    def __len__(self):
        return len(self.pairs)


def frame_costs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``[N, M]`` matrix of per-pair distortions in dB."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return MCD_SCALE * np.sqrt(d2)


def dtw_from_costs(cost: np.ndarray) -> DtwPath:
    """Minimum-sum monotone path from (0,0) to (N-1,M-1) with steps (1,1), (1,0), (0,1).

    On equal accumulated cost the backtrack prefers (1,1), then (1,0), then (0,1).
    """
    cost = np.asarray(cost, np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise EmptyInput("dtw: both sequences must be non-empty")
    N, M = cost.shape
    D = np.full((N + 1, M + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, N + 1):
        row, prev = D[i], D[i - 1]
        # diagonal and vertical candidates are known for the whole row
        best_up = np.minimum(prev[:-1], prev[1:])
        c = cost[i - 1]
        for j in range(1, M + 1):
            left = row[j - 1]
            up = best_up[j - 1]
            row[j] = c[j - 1] + (up if up <= left else left)
    pairs = [(N - 1, M - 1)]
    i, j = N, M
    while (i, j) != (1, 1):
        diag, vert, horiz = D[i - 1, j - 1], D[i - 1, j], D[i, j - 1]
        m = min(diag, vert, horiz)
        if diag == m:
            i, j = i - 1, j - 1
        elif vert == m:
            i -= 1
        else:
            j -= 1
        pairs.append((i - 1, j - 1))
    pairs.reverse()
    return DtwPath(pairs, float(D[N, M]))


def dtw_align(a: CepstraFrames, b: CepstraFrames) -> DtwPath:
    fa, fb = _frames(a), _frames(b)
    if len(fa) == 0 or len(fb) == 0:
        raise EmptyInput("dtw: both sequences must be non-empty")
    return dtw_from_costs(frame_costs(fa, fb))


def _frames(c) -> np.ndarray:
    return np.asarray(c.frames if isinstance(c, CepstraFrames) else c)


@dataclass
class McdResult:
    mcd_db: float
    frames_ref: int
    frames_hyp: int
    path_len: int

    def to_text(self) -> str:
        return (f"mcd_db={self.mcd_db:.3f} frames_ref={self.frames_ref} "
                f"frames_hyp={self.frames_hyp} path_len={self.path_len}")


def mcd_cepstra(ref, hyp) -> McdResult:
    """Mean per-pair distortion along the DTW path of two cepstral sequences."""
    fa, fb = _frames(ref), _frames(hyp)
    if len(fa) == 0 or len(fb) == 0:
        raise EmptyInput("mcd: both sequences must be non-empty")
    cost = frame_costs(fa, fb)
    path = dtw_from_costs(cost)
    ii, jj = np.array(path.pairs).T
    return McdResult(float(cost[ii, jj].mean()), len(fa), len(fb), len(path))


def mcd_report(ref: Waveform, hyp: Waveform) -> McdResult:
    for name, w in (("ref", ref), ("hyp", hyp)):
        if len(w) < WINDOW_SAMPLES:
            raise TooShort(f"mcd: {name} has {len(w)} samples, need at least {WINDOW_SAMPLES}")
    return mcd_cepstra(mel_cepstra(ref), mel_cepstra(hyp))


def mcd(ref: Waveform, hyp: Waveform) -> float:
    """Mel-cepstral distortion in dB (c1..c13, DTW-aligned)."""
    return mcd_report(ref, hyp).mcd_db


# -- speaker classifier -----------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    n_classes: int = 2
    n_conv: int = 5
    kernel: int = 3
    channels: int = 128
    fc_hidden: int = 128
    n_features: int = N_FEATURES
    crop_frames: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    preset: str = "paper"

    def __post_init__(self):
        if self.preset == "paper" and (self.n_conv != 5 or self.channels != 128):
            raise ConfigMismatch("classifier: paper preset requires 5 conv layers of 128 channels")
        if self.kernel % 2 == 0:
            raise ConfigMismatch("classifier: kernel must be odd")
        if self.n_classes < 2:
            raise TooFewSpeakers(f"classifier: need at least 2 classes, got {self.n_classes}")

    @classmethod
    def toy(cls, **overrides) -> "ClassifierConfig":
        kw = dict(channels=16, fc_hidden=32, preset="toy")
        kw.update(overrides)
        return cls(**kw)

    @property
    def pool_after(self) -> tuple[int, ...]:
        # 2x1 max-pool after the 2nd and 4th conv (0-based 1 and 3)
        return tuple(i for i in (1, 3) if i < self.n_conv)

    @property
    def pooled_height(self) -> int:
        h = self.n_features
        for _ in self.pool_after:
            h //= 2
        return h


def classifier_shapes(config: ClassifierConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in, k = 1, config.kernel
    for i in range(config.n_conv):
        pre = f"cls.conv{i}."
        shapes[pre + "weight"] = (config.channels, c_in, k, k)
        for name in ("bias", "bn_gamma", "bn_beta", "bn_mean", "bn_var"):
            shapes[pre + name] = (config.channels,)
        c_in = config.channels
    flat = config.channels * config.pooled_height
    shapes["cls.fc1.weight"] = (config.fc_hidden, flat)
    shapes["cls.fc1.bias"] = (config.fc_hidden,)
    shapes["cls.fc2.weight"] = (config.n_classes, config.fc_hidden)
    shapes["cls.fc2.bias"] = (config.n_classes,)
    return shapes


def init_classifier(config: ClassifierConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in classifier_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "weight":
            fan_in = int(np.prod(shape[1:]))
            gain = 6.0 if ".conv" in name or "fc1" in name else 1.0
            bound = math.sqrt(gain / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif leaf in ("bn_gamma", "bn_var"):
            params[name] = np.ones(shape, np.float32)
        else:
            params[name] = np.zeros(shape, np.float32)
    return params


def classifier_features(w: Waveform) -> np.ndarray:
    """``[15, T]`` grid: cepstra c1..c13, normalized log-F0, voicing flag."""
    cep = mel_cepstra(w).frames.T
    f0 = f0_features(estimate_f0(w))  # rows: voiced, normalized log-F0
    T = min(cep.shape[1], f0.shape[1])
    return np.concatenate([cep[:, :T], f0[1:2, :T], f0[0:1, :T]], axis=0).astype(np.float32)


def classifier_forward(params, grid, config: ClassifierConfig, train: bool = False,
                       stats: dict[str, nn.RunningStats] | None = None) -> nn.Tensor:
    """Logits ``[n_classes, B]`` for a ``[B, 15, T]`` batch of feature grids."""
    grid = np.asarray(grid, np.float32) if not isinstance(grid, nn.Tensor) else grid
    data = grid.data if isinstance(grid, nn.Tensor) else grid
    if data.ndim != 3 or data.shape[1] != config.n_features:
        raise ShapeMismatch(f"classifier: input {data.shape}, expected [B, {config.n_features}, T]")
    p = params
    x = nn.reshape(grid, (data.shape[0], 1) + data.shape[1:])
    for i in range(config.n_conv):
        pre = f"cls.conv{i}."
        x = nn.conv2d(x, p[pre + "weight"], p[pre + "bias"])
        st = stats[pre] if stats is not None else nn.RunningStats(
            config.channels, _arr(p[pre + "bn_mean"]), _arr(p[pre + "bn_var"]))
        x = nn.batch_norm(x, p[pre + "bn_gamma"], p[pre + "bn_beta"], st, train=train, channel_axis=1)
        x = nn.relu(x)
        if i in config.pool_after:
            x = nn.max_pool_rows(x, 2)
    x = nn.mean_axis(x, axis=3)  # [B, C, H']
    B = x.shape[0]
    x = nn.transpose2d(nn.reshape(x, (B, -1)))  # [C*H', B]
    x = nn.relu(nn.dense(x, p["cls.fc1.weight"], p["cls.fc1.bias"]))
    return nn.dense(x, p["cls.fc2.weight"], p["cls.fc2.bias"])


def _arr(x):
    return x.data if isinstance(x, nn.Tensor) else x


@dataclass
class Classifier:
    config: ClassifierConfig
    params: dict[str, np.ndarray]
    names: list[str]

    def predict_proba(self, w: Waveform) -> np.ndarray:
        grid = classifier_features(w)[None]
        logits = classifier_forward(self.params, grid, self.config, train=False).data
        return nn.softmax_array(logits.astype(np.float64), axis=0)[:, 0]

    def predict(self, w: Waveform) -> str:
        return self.names[int(np.argmax(self.predict_proba(w)))]


def train_classifier(manifest, config: ClassifierConfig | None = None, steps: int = 1000, seed: int = 0,
                     on_step=None) -> Classifier:
    """Fit the speaker CNN on random fixed-length crops of every manifest utterance."""
    names = manifest.speakers
    if len(names) < 2:
        raise TooFewSpeakers(f"train_classifier: need at least 2 speakers, got {len(names)}")
    config = replace(config or ClassifierConfig(n_classes=len(names)), n_classes=len(names))
    grids, labels = [], []
    for name, wav_path in manifest.entries:
        grids.append(classifier_features(read_wav(wav_path)))
        labels.append(names.index(name))
    crop = min(config.crop_frames, min(g.shape[1] for g in grids))
    rng = np.random.default_rng(seed)
    params = init_classifier(config, seed)
    stats = {f"cls.conv{i}.": nn.RunningStats(config.channels) for i in range(config.n_conv)}
    opt = nn.Adam(lr=config.lr)
    trainable = [n for n in params if not n.endswith(("bn_mean", "bn_var"))]
    for step in range(1, steps + 1):
        idx = rng.integers(len(grids), size=config.batch_size)
        batch = np.stack([_crop(grids[e], crop, rng) for e in idx])
        tp = {n: nn.Parameter(params[n], n) if n in trainable else params[n] for n in params}
        logits = classifier_forward(tp, batch, config, train=True, stats=stats)
        loss = nn.softmax_cross_entropy(logits, np.array(labels)[idx])
        loss.backward()
        for n in trainable:
            opt.update(n, params[n], tp[n].grad)
        if on_step is not None:
            on_step(step, float(loss.data))
    for pre, st in stats.items():
        params[pre + "bn_mean"], params[pre + "bn_var"] = st.mean.copy(), st.var.copy()
    return Classifier(config, params, list(names))


def _crop(grid: np.ndarray, n: int, rng) -> np.ndarray:
    start = int(rng.integers(grid.shape[1] - n + 1))
    return grid[:, start:start + n]


def identification_accuracy(clf: Classifier, manifest) -> tuple[float, int]:
    """Percentage of manifest utterances whose predicted speaker matches the label."""
    for name in manifest.speakers:
        if name not in clf.names:
            raise UnknownSpeaker(name, clf.names)
    hits = sum(clf.predict(read_wav(path)) == name for name, path in manifest.entries)
    n = len(manifest.entries)
    return 100.0 * hits / n, n


def save_classifier(path, clf: Classifier) -> None:
    tensors = {name: clf.params[name] for name in classifier_shapes(clf.config)}
    tensors["cls.names"] = text_to_tensor("\n".join(clf.names))
    save_archive(path, tensors)
    save_kv(os.fspath(path) + ".cfg", {"version": CLASSIFIER_VERSION, **config_to_kv(clf.config)})


def load_classifier(path) -> Classifier:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise NotFound(f"{path}: no such file")
    items = load_kv(path + ".cfg")
    version = int(items.get("version", "0"))
    if version != CLASSIFIER_VERSION:
        raise VersionMismatch(f"{path}: classifier version {version}, expected {CLASSIFIER_VERSION}")
    config = config_from_kv(ClassifierConfig, items, source=path + ".cfg")
    tensors = load_archive(path)
    for name, shape in classifier_shapes(config).items():
        require(tensors, name, shape, source=path)
    names = tensor_to_text(require(tensors, "cls.names", source=path)).split("\n")
    if len(names) != config.n_classes:
        raise ShapeMismatch(f"{path}: {len(names)} speaker names for {config.n_classes} classes")
    return Classifier(config, {n: tensors[n] for n in classifier_shapes(config)}, names)

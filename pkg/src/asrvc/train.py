"""Teacher-forced decoder training, new-speaker fitting and end-to-end conversion."""

from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import neural as nn
from .archive import (config_from_kv, config_to_kv, dump_kv, load_archive, parse_kv, save_archive,
                      tensor_to_text, text_to_tensor)
from .audio_io import Waveform, mulaw_encode, read_wav
from .decoder import (DecoderConfig, SpeakerTable, build_conditioning, forward, init_decoder, param_shapes,
                      validate_params)
from .dsp import estimate_f0
from .encoder import EncoderConfig, encode_waveform, load_encoder
from .errors import (ConfigMismatch, DataError, DuplicateSpeaker, EmptyManifest, NotFound, TooShort,
                     VersionMismatch)
from .fileutil import atomic_write_text
from .infer import generate

CHECKPOINT_VERSION = 1
MIN_CROP = 400  # one F0 analysis window


@dataclass
class Manifest:
    entries: list[tuple[str, str]]

    @property
    def speakers(self) -> list[str]:
        seen = []
        for name, _ in self.entries:
            if name not in seen:
                seen.append(name)
        return seen

    def __len__(self):
        return len(self.entries)


def read_manifest(path) -> Manifest:
    """``speaker<TAB>wav_path`` per line; relative paths resolve against the manifest's directory."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise NotFound(f"{path}: no such file")
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            name, sep, wav = line.partition("\t")
            if not sep or not name or not wav:
                raise DataError(f"{path}:{lineno}: expected 'speaker<TAB>wav_path'")
            entries.append((name, wav if os.path.isabs(wav) else os.path.join(base, wav)))
    if not entries:
        raise EmptyManifest(f"{path}: manifest has no entries")
    return Manifest(entries)


def write_manifest(path, manifest: Manifest) -> None:
    atomic_write_text(path, "".join(f"{name}\t{wav}\n" for name, wav in manifest.entries))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 1
    crop_samples: int = 8192
    lr: float = 1e-3
    seed: int = 0
    use_f0: bool = False
    preset: str = "toy"
    checkpoint_every: int = 0
    speaker_dim: int = 64
    update_old_rows: bool = False  # fit_speaker: also fine-tune pre-existing embeddings

    def __post_init__(self):
        if self.crop_samples <= 0 or self.steps < 1 or self.batch_size < 1:
            raise ConfigMismatch("train: steps, batch_size and crop_samples must be positive")
        if self.preset not in ("toy", "paper"):
            raise ConfigMismatch(f"train: unknown preset {self.preset!r}")


def decoder_config_for(config: TrainConfig, latent_channels: int) -> DecoderConfig:
    make = DecoderConfig.toy if config.preset == "toy" else DecoderConfig.paper
    return make(latent_channels=latent_channels, speaker_dim=config.speaker_dim, use_f0=config.use_f0)


@dataclass
class Checkpoint:
    decoder_config: DecoderConfig
    params: dict[str, np.ndarray]
    table: SpeakerTable
    train_config: TrainConfig
    step: int = 0
    encoder_path: str = ""
    encoder_sha256: str = ""
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_steps: dict[str, int] = field(default_factory=dict)

    def optimizer(self, lr: float) -> nn.Adam:
        opt = nn.Adam(lr=lr)
        opt.m = {k: v.copy() for k, v in self.opt_m.items()}
        opt.v = {k: v.copy() for k, v in self.opt_v.items()}
        opt.steps = dict(self.opt_steps)
        return opt

    def store_optimizer(self, opt: nn.Adam) -> None:
        self.opt_m, self.opt_v, self.opt_steps = opt.m, opt.v, opt.steps


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _row_key(name: str) -> str:
    return f"spk.row.{name}"


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Archive at ``path`` plus a key=value header at ``path + '.cfg'``."""
    tensors = {name: ckpt.params[name] for name in param_shapes(ckpt.decoder_config)}
    tensors["spk.table"] = ckpt.table.embeddings
    tensors["spk.names"] = text_to_tensor("\n".join(ckpt.table.names))
    for name in sorted(ckpt.opt_m):
        tensors[f"opt.m.{name}"] = ckpt.opt_m[name]
        tensors[f"opt.v.{name}"] = ckpt.opt_v[name]
    header = {
        "version": CHECKPOINT_VERSION,
        "step": ckpt.step,
        "encoder_path": ckpt.encoder_path,
        "encoder_sha256": ckpt.encoder_sha256,
        **config_to_kv(ckpt.decoder_config, "dec."),
        **config_to_kv(ckpt.train_config, "train."),
        **{f"opt_step.{k}": ckpt.opt_steps[k] for k in sorted(ckpt.opt_steps)},
    }
    save_archive(path, tensors)
    atomic_write_text(os.fspath(path) + ".cfg", dump_kv(header))


def load_checkpoint(path) -> Checkpoint:
    path = os.fspath(path)
    cfg_path = path + ".cfg"
    if not os.path.isfile(cfg_path):
        raise NotFound(f"{cfg_path}: checkpoint header missing")
    with open(cfg_path, encoding="utf-8") as fh:
        header = parse_kv(fh.read())
    version = int(header.get("version", "0"))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{cfg_path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    dcfg = config_from_kv(DecoderConfig, header, "dec.", source=cfg_path)
    tcfg = config_from_kv(TrainConfig, header, "train.", source=cfg_path)
    tensors = load_archive(path)
    params = {name: tensors[name] for name in param_shapes(dcfg) if name in tensors}
    validate_params(params, dcfg, source=path)
    names_tensor = tensors.get("spk.names")
    names = tensor_to_text(names_tensor).split("\n") if names_tensor is not None and names_tensor.size else []
    table = SpeakerTable(tensors.get("spk.table", np.zeros((0, dcfg.speaker_dim), np.float32)), names)
    opt_m = {k[6:]: v for k, v in tensors.items() if k.startswith("opt.m.")}
    opt_v = {k[6:]: v for k, v in tensors.items() if k.startswith("opt.v.")}
    opt_steps = {k[9:]: int(v) for k, v in header.items() if k.startswith("opt_step.")}
    return Checkpoint(dcfg, params, table, tcfg, int(header.get("step", "0")), header.get("encoder_path", ""),
                      header.get("encoder_sha256", ""), opt_m, opt_v, opt_steps)


def _load_audio(manifest: Manifest, min_len: int) -> list[Waveform]:
    waves = []
    for name, wav_path in manifest.entries:
        try:
            w = read_wav(wav_path)
        except DataError as exc:
            raise type(exc)(f"manifest entry {name!r}: {exc}") from exc
        if len(w) < min_len:
            raise TooShort(f"{wav_path}: {len(w)} samples, need at least {min_len}")
        waves.append(w)
    return waves


def _sgd_loop(ckpt: Checkpoint, enc_cfg: EncoderConfig, enc_params, manifest: Manifest, steps: int,
              lr: float, seed: int, trainable_rows: set[str], opt: nn.Adam,
              on_step: Callable[[int, float], bool | None] | None, save_to=None,
              checkpoint_every: int = 0) -> None:
    dcfg = ckpt.decoder_config
    tcfg = ckpt.train_config
    waves = _load_audio(manifest, MIN_CROP)
    ckpt.params = {k: np.array(v) for k, v in ckpt.params.items()}
    ckpt.table.embeddings = np.array(ckpt.table.embeddings)
    rng = np.random.default_rng(seed)
    opt.lr = lr
    for _ in range(steps):
        params = {name: nn.Parameter(arr, name) for name, arr in ckpt.params.items()}
        rows: dict[str, nn.Parameter] = {}
        losses = []
        for _b in range(tcfg.batch_size):
            e = int(rng.integers(len(waves)))
            speaker, wav_path = manifest.entries[e]
            w = waves[e]
            L = min(tcfg.crop_samples, len(w))
            start = int(rng.integers(len(w) - L + 1))
            crop = Waveform(w.samples[start:start + L])
            # each crop is encoded on its own (its own normalization statistics
            # and latent grid), so latents never pin down exact waveform detail
            try:
                latent = encode_waveform(crop, enc_params, enc_cfg)
                f0 = estimate_f0(crop) if dcfg.use_f0 else None
            except DataError as exc:
                raise type(exc)(f"{wav_path}: {exc}") from exc
            if speaker not in rows:
                v = ckpt.table.lookup(speaker)
                rows[speaker] = nn.Parameter(v, _row_key(speaker)) if speaker in trainable_rows else nn.Tensor(v)
            cond = build_conditioning(latent, rows[speaker], f0, L, dcfg)
            target = mulaw_encode(crop.samples)
            loss = nn.softmax_cross_entropy(forward(params, target, cond, dcfg), target)
            loss.backward(np.asarray(1.0 / tcfg.batch_size, dtype=loss.data.dtype))
            losses.append(float(loss.data))
        for name, p in params.items():
            if p.grad is not None:
                opt.update(name, ckpt.params[name], p.grad)
        for speaker, row in rows.items():
            if isinstance(row, nn.Parameter) and row.grad is not None:
                i = ckpt.table.index(speaker)
                value = ckpt.table.embeddings[i].copy()
                opt.update(_row_key(speaker), value, row.grad)
                ckpt.table.embeddings[i] = value
        ckpt.step += 1
        stop = on_step is not None and on_step(ckpt.step, float(np.mean(losses)))
        if save_to is not None and checkpoint_every > 0 and ckpt.step % checkpoint_every == 0:
            ckpt.store_optimizer(opt)
            save_checkpoint(save_to, ckpt)
        if stop:
            break
    ckpt.store_optimizer(opt)


def train(manifest: Manifest, encoder_ckpt, config: TrainConfig, on_step=None, save_to=None) -> Checkpoint:
    """Fit decoder weights and one embedding per speaker with teacher forcing.

    Each step draws ``batch_size`` (entry, crop) pairs uniformly, encodes
    each crop with the frozen encoder and backpropagates the mean cross
    entropy over every crop position into the decoder and the used
    embedding rows. ``on_step(step, loss)`` may return
    True to stop before ``config.steps``.
    """
    if not manifest.entries:
        raise EmptyManifest("train: empty manifest")
    enc_cfg, enc_params = load_encoder(encoder_ckpt)
    dcfg = decoder_config_for(config, enc_cfg.latent_channels)
    table = SpeakerTable.random(manifest.speakers, config.speaker_dim, config.seed + 1)
    ckpt = Checkpoint(dcfg, init_decoder(dcfg, config.seed), table, config, 0,
                      os.path.abspath(os.fspath(encoder_ckpt)), file_sha256(encoder_ckpt))
    opt = nn.Adam(lr=config.lr)
    _sgd_loop(ckpt, enc_cfg, enc_params, manifest, config.steps, config.lr, config.seed,
              set(manifest.speakers), opt, on_step, save_to, config.checkpoint_every)
    return ckpt


def fit_speaker(ckpt: Checkpoint, new_manifest: Manifest, steps: int, name: str | None = None,
                encoder_ckpt=None, lr: float | None = None, seed: int | None = None, on_step=None) -> Checkpoint:
    """Add one speaker: its row starts at the mean of the existing rows, then
    the decoder and that row are fine-tuned on the new data only."""
    if not new_manifest.entries:
        raise EmptyManifest("fit_speaker: empty manifest")
    speakers = new_manifest.speakers if name is None else [name]
    if len(speakers) != 1:
        raise ConfigMismatch(f"fit_speaker: manifest names {len(speakers)} speakers; pass a single name")
    new_name = speakers[0]
    if new_name in ckpt.table.names:
        raise DuplicateSpeaker(f"speaker {new_name!r} already in table")
    manifest = Manifest([(new_name, wav) for _, wav in new_manifest.entries])
    encoder_ckpt = encoder_ckpt or ckpt.encoder_path
    enc_cfg, enc_params = load_encoder(encoder_ckpt)
    _check_encoder(ckpt, encoder_ckpt)

    out = init_new_speaker(ckpt, new_name)
    trainable = set(out.table.names) if out.train_config.update_old_rows else {new_name}
    opt = nn.Adam(lr=lr or out.train_config.lr)
    seed = out.train_config.seed + out.step + 1 if seed is None else seed
    _sgd_loop(out, enc_cfg, enc_params, manifest, steps, lr or out.train_config.lr, seed, trainable, opt, on_step)
    return out


def init_new_speaker(ckpt: Checkpoint, name: str) -> Checkpoint:
    """Copy of ``ckpt`` with ``name`` appended, its row the mean of the existing rows."""
    if name in ckpt.table.names:
        raise DuplicateSpeaker(f"speaker {name!r} already in table")
    out = copy.deepcopy(ckpt)
    out.table.add(name, out.table.mean_row())
    return out


def _check_encoder(ckpt: Checkpoint, encoder_ckpt) -> None:
    if ckpt.encoder_sha256 and file_sha256(encoder_ckpt) != ckpt.encoder_sha256:
        raise ConfigMismatch(f"{encoder_ckpt}: encoder differs from the one the checkpoint was trained with")


def teacher_forced_loss(ckpt: Checkpoint, encoder_ckpt, wav: Waveform, speaker: str) -> float:
    """Mean cross entropy of the decoder on a whole clip (no gradients)."""
    enc_cfg, enc_params = load_encoder(encoder_ckpt)
    latent = encode_waveform(wav, enc_params, enc_cfg)
    f0 = estimate_f0(wav) if ckpt.decoder_config.use_f0 else None
    cond = build_conditioning(latent, ckpt.table.lookup(speaker), f0, len(wav), ckpt.decoder_config)
    target = mulaw_encode(wav.samples)
    return float(nn.softmax_cross_entropy(forward(ckpt.params, target, cond, ckpt.decoder_config), target).data)


def convert(ckpt: Checkpoint, encoder_ckpt, input_wav, target_speaker: str, temperature: float = 1.0,
            seed: int = 0) -> Waveform:
    """Re-synthesize ``input_wav`` in ``target_speaker``'s voice.

    Output length is ``T_lat * 320`` samples, within 320 of the input.
    """
    wav = read_wav(input_wav) if not isinstance(input_wav, Waveform) else input_wav
    v = ckpt.table.lookup(target_speaker)
    enc_cfg, enc_params = load_encoder(encoder_ckpt)
    _check_encoder(ckpt, encoder_ckpt)
    latent = encode_waveform(wav, enc_params, enc_cfg)
    f0 = estimate_f0(wav) if ckpt.decoder_config.use_f0 else None
    cond = build_conditioning(latent, v, f0, None, ckpt.decoder_config)
    _, out = generate(cond, ckpt.params, ckpt.decoder_config, temperature, seed)
    return out

"""Incremental autoregressive generation with per-layer ring buffers.

Each dilated layer only needs its own input from ``dilation`` steps ago, so
the state keeps one ring buffer of that length per layer and a step costs
a constant number of mat-vecs. :func:`naive_generate` recomputes one full
receptive field per step and serves as the oracle.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .audio_io import SAMPLE_RATE, ZERO_INDEX, QuantizedWave, Waveform, mulaw_decode
from .decoder import ConditioningSeq, DecoderConfig, forward, receptive_field, validate_params
from .errors import EmptyInput, NumericError, StateMismatch


class _Weights:
    """Float32, contiguous re-layout of decoder params for mat-vec stepping."""

    def __init__(self, params, config: DecoderConfig):
        validate_params(params, config)
        g = lambda name: np.ascontiguousarray(np.asarray(getattr(params[name], "data", params[name]), np.float32))
        R, S = config.residual_channels, config.skip_channels
        self.embed = g("dec.embed")
        self.dil = []  # [2R, 2R] acting on concat(past, current)
        self.dil_b, self.cond_w, self.cond_b, self.out_w, self.out_b = [], [], [], [], []
        for l in range(config.n_layers):
            pre = f"dec.layer{l}."
            w = g(pre + "dil_w")
            self.dil.append(np.ascontiguousarray(np.concatenate([w[:, :, 0], w[:, :, 1]], axis=1)))
            self.dil_b.append(g(pre + "dil_b"))
            self.cond_w.append(g(pre + "cond_w"))
            self.cond_b.append(g(pre + "cond_b"))
            # stacked [res; skip] so one mat-vec serves both; the last layer has no residual
            if l < config.n_layers - 1:
                self.out_w.append(np.ascontiguousarray(np.concatenate([g(pre + "res_w"), g(pre + "skip_w")])))
                self.out_b.append(np.concatenate([g(pre + "res_b"), g(pre + "skip_b")]))
            else:
                self.out_w.append(g(pre + "skip_w"))
                self.out_b.append(g(pre + "skip_b"))
        self.wavskip = (g("dec.wavskip_w"), g("dec.wavskip_b")) if config.wav_skip else None
        self.fc1 = (g("dec.fc1_w"), g("dec.fc1_b"))
        self.fccond = (g("dec.fccond_w"), g("dec.fccond_b")) if config.fc_cond else None
        self.fc2 = (g("dec.fc2_w"), g("dec.fc2_b"))
        self.R, self.S = R, S


@dataclass
class GenState:
    config: DecoderConfig
    weights: _Weights
    buffers: list[np.ndarray]  # layer l: [R, dilation_l] of past layer inputs
    cursors: list[int]
    rng: np.random.Generator
    last_index: int = ZERO_INDEX
    step: int = 0
    _cond_key: np.ndarray | None = field(default=None, repr=False)
    _cond_proj: list | None = field(default=None, repr=False)

    def snapshot(self) -> tuple:
        return ([b.copy() for b in self.buffers], list(self.cursors), self.last_index, self.step)


def init_state(params, config: DecoderConfig, seed: int = 0) -> GenState:
    R = config.residual_channels
    return GenState(
        config=config,
        weights=_Weights(params, config),
        buffers=[np.zeros((R, d), np.float32) for d in config.dilations],
        cursors=[0] * config.n_layers,
        rng=np.random.default_rng(seed),
    )


def sample_index(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Draw from softmax(logits / temperature); temperature 0 is argmax (lowest index wins ties)."""
    if temperature <= 0:
        return int(np.argmax(logits))
    z = np.asarray(logits, dtype=np.float64) / temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def _project(state: GenState, cond_col: np.ndarray):
    # conditioning repeats for hundreds of samples; reuse the projections meanwhile
    if state._cond_key is not None and np.array_equal(state._cond_key, cond_col):
        return state._cond_proj
    w = state.weights
    proj = [w.cond_w[l] @ cond_col + w.cond_b[l] for l in range(len(w.cond_w))]
    fc = w.fccond[0] @ cond_col + w.fccond[1] if w.fccond is not None else None
    state._cond_key = cond_col.copy()
    state._cond_proj = (proj, fc)
    return state._cond_proj


def gen_step(state: GenState, prev_index: int, cond_col, params=None, config: DecoderConfig | None = None,
             temperature: float = 1.0) -> tuple[np.ndarray, int]:
    """Advance one sample; returns (logits over the next sample, sampled index).

    ``params`` is accepted for interface symmetry; the state already holds
    the re-laid-out weights it was initialized with.
    """
    cfg = state.config
    if config is not None and config != cfg:
        raise StateMismatch("gen_step: state was initialized for a different decoder config")
    w = state.weights
    R = w.R
    cond_col = np.asarray(cond_col, dtype=np.float32)
    if len(state.buffers) != cfg.n_layers or any(b.shape[0] != R for b in state.buffers):
        raise StateMismatch("gen_step: state buffers disagree with the decoder config")
    if cond_col.shape != (cfg.cond_channels,):
        raise StateMismatch(f"gen_step: conditioning column has {cond_col.size} entries, expected {cfg.cond_channels}")
    proj, fc_proj = _project(state, cond_col)

    h0 = w.embed[int(prev_index)]
    h = h0
    skip = None
    for l, buf in enumerate(state.buffers):
        c = state.cursors[l]
        past = buf[:, c].copy()
        buf[:, c] = h
        state.cursors[l] = c + 1 if c + 1 < buf.shape[1] else 0
        a = w.dil[l] @ np.concatenate([past, h]) + w.dil_b[l] + proj[l]
        z = np.tanh(a[:R]) * expit(a[R:])
        rs = w.out_w[l] @ z + w.out_b[l]
        if rs.shape[0] == R + w.S:
            h = h + rs[:R]
            rs = rs[R:]
        skip = rs if skip is None else skip + rs
    if w.wavskip is not None:
        skip = skip + (w.wavskip[0] @ h0 + w.wavskip[1])
    out = w.fc1[0] @ np.maximum(skip, 0) + w.fc1[1]
    if fc_proj is not None:
        out = out + fc_proj
    logits = w.fc2[0] @ np.maximum(out, 0) + w.fc2[1]
    if not np.isfinite(logits).all():
        raise NumericError(f"gen_step: non-finite logits at step {state.step}")
    nxt = sample_index(logits, temperature, state.rng)
    state.last_index = nxt
    state.step += 1
    return logits, nxt


def generate(cond: ConditioningSeq, params, config: DecoderConfig, temperature: float = 1.0, seed: int = 0,
             return_logits: bool = False):
    """Emit ``len(cond)`` samples starting from the zero sample."""
    T = len(cond)
    if T <= 0:
        raise EmptyInput("generate: empty conditioning")
    state = init_state(params, config, seed)
    out = np.empty(T, np.int64)
    logits_all = np.empty((config.n_classes, T), np.float32) if return_logits else None
    prev = ZERO_INDEX
    for t in range(T):
        logits, prev = gen_step(state, prev, cond.column(t), temperature=temperature)
        out[t] = prev
        if return_logits:
            logits_all[:, t] = logits
    q = QuantizedWave(out)
    wav = Waveform(mulaw_decode(out).astype(np.float32))
    return (q, wav, logits_all) if return_logits else (q, wav)


def naive_logits(emitted: np.ndarray, t: int, cond: ConditioningSeq, params, config: DecoderConfig) -> np.ndarray:
    """Logits for position ``t`` by a full teacher-forced pass over one receptive field."""
    rf = receptive_field(config)
    start = max(0, t - rf + 1)
    first = int(emitted[start - 1]) if start > 0 else ZERO_INDEX
    window = np.empty(t - start + 1, np.int64)
    window[:-1] = emitted[start:t]
    window[-1] = ZERO_INDEX  # x[t] itself is never read for position t
    return forward(params, window, cond.window(start, t + 1), config, first=first).data[:, -1]


def naive_generate(cond: ConditioningSeq, params, config: DecoderConfig, temperature: float = 1.0,
                   seed: int = 0, steps: int | None = None, time_budget_s: float | None = None):
    """Oracle generator: same sampling stream as :func:`generate`, no incremental state.

    Returns (indices, logits [n_classes, n_done]); stops early once
    ``time_budget_s`` is exceeded.
    """
    n = len(cond) if steps is None else min(steps, len(cond))
    rng = np.random.default_rng(seed)
    emitted = np.empty(n, np.int64)
    logits_all = np.empty((config.n_classes, n), np.float32)
    t0 = time.perf_counter()
    done = 0
    for t in range(n):
        logits = naive_logits(emitted, t, cond, params, config)
        emitted[t] = sample_index(logits, temperature, rng)
        logits_all[:, t] = logits
        done = t + 1
        if time_budget_s is not None and time.perf_counter() - t0 > time_budget_s:
            break
    return emitted[:done], logits_all[:, :done]


def replay_state(indices, cond: ConditioningSeq, params, config: DecoderConfig) -> GenState:
    """State reached by feeding an emitted prefix back through :func:`gen_step`."""
    state = init_state(params, config)
    prev = ZERO_INDEX
    for t, idx in enumerate(np.asarray(indices, dtype=np.int64)):
        gen_step(state, prev, cond.column(t), temperature=0.0)
        prev = int(idx)
    state.last_index = prev
    return state


def random_conditioning(config: DecoderConfig, n_samples: int, seed: int = 0) -> ConditioningSeq:
    rng = np.random.default_rng(seed)
    n_lat = -(-n_samples // config.upsample_factor_latent)
    latent = rng.normal(0.0, 1.0, size=(config.latent_channels, n_lat)).astype(np.float32)
    spk = rng.normal(0.0, 1.0 / math.sqrt(config.speaker_dim), size=config.speaker_dim).astype(np.float32)
    f0 = None
    if config.use_f0:
        n_f0 = -(-n_samples // config.upsample_factor_f0)
        f0 = np.stack([np.ones(n_f0), rng.uniform(0, 1, n_f0)]).astype(np.float32)
    return ConditioningSeq(latent, spk, f0, n_samples, config.upsample_factor_latent, config.upsample_factor_f0)


@dataclass
class BenchReport:
    steps: int
    wall_ms_incremental: float
    wall_ms_naive: float
    extrapolated: bool
    naive_steps_run: int
    sequence_match: bool
    sequence_sha256: str

    @property
    def samples_per_sec_incremental(self) -> float:
        return self.steps / (self.wall_ms_incremental / 1000.0)

    @property
    def samples_per_sec_naive(self) -> float:
        return self.steps / (self.wall_ms_naive / 1000.0)

    @property
    def speedup(self) -> float:
        return self.wall_ms_naive / self.wall_ms_incremental

    def to_text(self) -> str:
        rows = [
            ("steps", self.steps),
            ("wall_ms_incremental", f"{self.wall_ms_incremental:.3f}"),
            ("wall_ms_naive", f"{self.wall_ms_naive:.3f}"),
            ("speedup", f"{self.speedup:.3f}"),
            ("extrapolated", int(self.extrapolated)),
            ("samples_per_sec_incremental", f"{self.samples_per_sec_incremental:.3f}"),
            ("samples_per_sec_naive", f"{self.samples_per_sec_naive:.3f}"),
            ("naive_steps_run", self.naive_steps_run),
            ("sequence_match", int(self.sequence_match)),
            ("sequence_sha256", self.sequence_sha256),
        ]
        return "".join(f"{k}={v}\n" for k, v in rows)


def bench_infer(params, config: DecoderConfig, seconds: float, seed: int = 0, temperature: float = 1.0,
                naive_budget_s: float = 60.0, cond: ConditioningSeq | None = None) -> BenchReport:
    """Time incremental vs naive generation over ceil(seconds * 16 kHz) steps.

    The naive path runs until ``naive_budget_s``; the rest of its time is
    extrapolated from measured full-window steps, with shorter windows
    charged pro rata (which flatters the naive path).
    """
    n = int(math.ceil(seconds * SAMPLE_RATE))
    if cond is None:
        cond = random_conditioning(config, n, seed)
    t0 = time.perf_counter()
    q, _ = generate(cond, params, config, temperature, seed)
    wall_inc = time.perf_counter() - t0
    inc = q.indices

    t0 = time.perf_counter()
    naive_idx, _ = naive_generate(cond, params, config, temperature, seed, steps=n, time_budget_s=naive_budget_s)
    wall_naive = time.perf_counter() - t0
    done = naive_idx.size
    match = bool(np.array_equal(naive_idx, inc[:done]))

    extrapolated = done < n
    if extrapolated:
        rf = receptive_field(config)
        probes = [t for t in range(max(done, rf - 1), n)][:3] or [n - 1]
        t0 = time.perf_counter()
        for t in probes:
            naive_logits(inc, t, cond, params, config)
        per_sample = (time.perf_counter() - t0) / sum(min(t + 1, rf) for t in probes)
        window = np.minimum(np.arange(done, n) + 1, rf)
        wall_naive += float(per_sample * window.sum())

    digest = hashlib.sha256(inc.astype("<i2").tobytes()).hexdigest()
    return BenchReport(n, wall_inc * 1000.0, wall_naive * 1000.0, extrapolated, done, match, digest)

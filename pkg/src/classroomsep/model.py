"""Micro-scale binaural separation model.

Encoder/masker/decoder in the time domain with interaural phase and level
cues fused into the masker, an optional enhancement pass of identical
architecture with its own parameters, and an optional per-frame azimuth
classifier head over the 37-direction grid. Small enough for exact
finite-difference gradient verification; runs in float64 on CPU.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.func import functional_call

from .dsp import BinauralBuffer, frame_count, stft
from .losses import SNR_CAP_DB, azimuth_to_class, doa_ce_loss_t, pit_loss_t, snr_db
from .motion import Trajectory, trajectory_at
from .rng import Rng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CSEPCKPT"
CHECKPOINT_VERSION = 1


class NonFiniteError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder_window: int = 16
    encoder_stride: int = 8
    basis_size: int = 64
    tcn_blocks: int = 2
    tcn_channels: int = 32
    kernel: int = 3
    num_speakers: int = 2
    enhancement: bool = True
    doa_head: bool = True
    doa_classes: int = 37

    def __post_init__(self):
        if self.encoder_stride > self.encoder_window:
            raise ValueError("stride must not exceed window")
        if self.doa_classes != 37:
            raise ValueError("doa_classes is fixed to the 37-point frontal grid")
        if self.num_speakers != 2:
            raise ValueError("micro model supports exactly 2 speakers")

    @property
    def feature_dim(self) -> int:
        return 2 * (self.encoder_window // 2 + 1)  # IPD + ILD bins

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class SpatialFeatures:
    """Interaural phase (radians, wrapped) and level (dB) per frame/bin."""

    ipd: np.ndarray
    ild: np.ndarray
    frame_length: int
    hop: int

    def __post_init__(self):
        if self.ipd.shape != self.ild.shape:
            raise ValueError("IPD/ILD shapes differ")

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.ipd, self.ild], axis=1)  # (frames, 2*bins)


def compute_spatial_features(mix: BinauralBuffer, frame_length: int, hop: int) -> SpatialFeatures:
    """IPD and ILD from rectangular-window frames of the two ear signals."""
    left = stft(mix.left, frame_length, hop, window="boxcar").values
    right = stft(mix.right, frame_length, hop, window="boxcar").values
    ipd = np.angle(left * np.conj(right))
    ipd = np.where(ipd == -np.pi, np.pi, ipd)
    eps = 1e-8
    ild = 20.0 * np.log10((np.abs(left) + eps) / (np.abs(right) + eps))
    return SpatialFeatures(ipd, ild, frame_length, hop)


class _TcnBlock(torch.nn.Module):
    def __init__(self, channels: int, kernel: int, dilation: int):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.conv = torch.nn.Conv1d(channels, channels, kernel, padding=pad, dilation=dilation)
        self.act = torch.nn.GELU()  # smooth, so finite-difference checks hold everywhere
        self.out = torch.nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        return x + self.out(self.act(self.conv(x)))


class _SeparatorCore(torch.nn.Module):
    """Encoder + cue fusion + TCN + masks + decoder over n input waveforms."""

    def __init__(self, config: ModelConfig, n_inputs: int):
        super().__init__()
        c = config
        self.config = c
        self.n_inputs = n_inputs
        self.encoder = torch.nn.Conv1d(1, c.basis_size, c.encoder_window,
                                       stride=c.encoder_stride, bias=False)
        self.bottleneck = torch.nn.Conv1d(n_inputs * c.basis_size, c.tcn_channels, 1)
        self.feat_proj = torch.nn.Conv1d(c.feature_dim, c.tcn_channels, 1)
        self.blocks = torch.nn.ModuleList(
            _TcnBlock(c.tcn_channels, c.kernel, 2**b) for b in range(c.tcn_blocks)
        )
        self.mask_head = torch.nn.Conv1d(c.tcn_channels, c.num_speakers * 2 * c.basis_size, 1)
        self.decoder = torch.nn.ConvTranspose1d(c.basis_size, 1, c.encoder_window,
                                                stride=c.encoder_stride, bias=False)

    def forward(self, waves: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        """waves: (n_inputs, T); feats: (feature_dim, frames) -> (spk, 2, T)."""
        c = self.config
        n = waves.shape[-1]
        enc = self.encoder(waves[:, None, :])  # (n_inputs, basis, frames)
        frames = enc.shape[-1]
        rep = enc.reshape(1, self.n_inputs * c.basis_size, frames)
        x = self.bottleneck(rep) + self.feat_proj(feats[None, :, :frames])
        for block in self.blocks:
            x = block(x)
        masks = torch.sigmoid(self.mask_head(x))
        masks = masks.reshape(c.num_speakers, 2, c.basis_size, frames)
        ears = enc[:2]  # masks always apply to the mixture's ear encodings
        masked = masks * ears[None]
        dec_in = masked.reshape(c.num_speakers * 2, c.basis_size, frames)
        out = self.decoder(dec_in)[:, 0, :]
        if out.shape[-1] < n:
            out = torch.nn.functional.pad(out, (0, n - out.shape[-1]))
        return out[:, :n].reshape(c.num_speakers, 2, n)


class _DoaHead(torch.nn.Module):
    """Per-frame azimuth-class logits from one speaker's stereo estimate."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.encoder = torch.nn.Conv1d(2, c.tcn_channels, c.encoder_window,
                                       stride=c.encoder_stride)
        self.act = torch.nn.GELU()
        self.block = _TcnBlock(c.tcn_channels, c.kernel, 1)
        self.head = torch.nn.Conv1d(c.tcn_channels, c.doa_classes, 1)

    def forward(self, stereo: torch.Tensor) -> torch.Tensor:
        x = self.act(self.encoder(stereo[None]))
        x = self.block(x)
        return self.head(x)[0].transpose(0, 1)  # (frames, classes)


class MicroSepModel(torch.nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.separator = _SeparatorCore(config, n_inputs=2)
        if config.enhancement:
            self.enhancer = _SeparatorCore(config, n_inputs=2 + 2 * config.num_speakers)
        if config.doa_head:
            self.doa = _DoaHead(config)

    def forward(self, mix: torch.Tensor, feats: torch.Tensor, with_doa: bool = True):
        """mix: (2, T); feats: (feature_dim, frames).

        Returns (estimates, enhanced_or_None, doa_logits_or_None); the
        final outputs are `enhanced` when the enhancement stage is on.
        """
        est = self.separator(mix, feats)
        if not torch.isfinite(est).all():
            raise NonFiniteError("non-finite output after separator stage")
        enhanced = None
        final = est
        if self.config.enhancement:
            stacked = torch.cat([mix, est.reshape(-1, est.shape[-1])], dim=0)
            enhanced = self.enhancer(stacked, feats)
            if not torch.isfinite(enhanced).all():
                raise NonFiniteError("non-finite output after enhancement stage")
            final = enhanced
        logits = None
        if self.config.doa_head and with_doa:
            logits = torch.stack([self.doa(final[c]) for c in range(self.config.num_speakers)])
            if not torch.isfinite(logits).all():
                raise NonFiniteError("non-finite output after DoA head")
        return est, enhanced, logits


def param_layout(config: ModelConfig) -> list:
    model = MicroSepModel(config)
    return [(name, tuple(p.shape)) for name, p in model.named_parameters()]


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(config))


def init_params(config: ModelConfig, rng: Rng) -> np.ndarray:
    """Deterministic scaled-normal initialization as a flat float64 vector."""
    chunks = []
    for name, shape in param_layout(config):
        n = int(np.prod(shape))
        if len(shape) > 1:
            fan_in = int(np.prod(shape[1:]))
            draw = rng.substream(name).normal(size=n, scale=1.0 / math.sqrt(fan_in))
        else:
            # Small random biases keep activations off exact zeros that
            # zero-padding would otherwise pin at the activation origin.
            draw = rng.substream(name).normal(size=n, scale=0.01)
        chunks.append(np.asarray(draw, dtype=np.float64).ravel())
    return np.concatenate(chunks)


def _vector_to_param_dict(vec: torch.Tensor, config: ModelConfig) -> dict:
    params = {}
    offset = 0
    for name, shape in param_layout(config):
        n = int(np.prod(shape))
        params[name] = vec[offset : offset + n].reshape(shape)
        offset += n
    if offset != vec.numel():
        raise ValueError(f"parameter vector length {vec.numel()} != layout {offset}")
    return params


@dataclass
class ForwardOutput:
    estimates: tuple  # 2 BinauralBuffers (post-enhancement when enabled)
    separator_estimates: tuple
    doa_logits: np.ndarray | None  # (speakers, frames, classes)


def _mix_tensors(config: ModelConfig, mix: BinauralBuffer,
                 features: SpatialFeatures | None):
    if len(mix) < config.encoder_window:
        raise ValueError("mixture shorter than the encoder window")
    if features is None:
        features = compute_spatial_features(mix, config.encoder_window, config.encoder_stride)
    mix_t = torch.tensor(mix.as_array(), dtype=torch.float64)
    feats_t = torch.tensor(features.stacked().T, dtype=torch.float64)
    return mix_t, feats_t


def forward(params: np.ndarray, config: ModelConfig, mix: BinauralBuffer,
            features: SpatialFeatures | None = None) -> ForwardOutput:
    """Run the model functionally from a flat parameter vector."""
    mix_t, feats_t = _mix_tensors(config, mix, features)
    vec = torch.tensor(np.asarray(params, dtype=np.float64))
    model = MicroSepModel(config)
    with torch.no_grad():
        est, enhanced, logits = functional_call(
            model, _vector_to_param_dict(vec, config), (mix_t, feats_t)
        )
    final = enhanced if enhanced is not None else est
    to_buffers = lambda t: tuple(
        BinauralBuffer.from_array(t[c].numpy(), mix.rate) for c in range(config.num_speakers)
    )
    return ForwardOutput(
        estimates=to_buffers(final),
        separator_estimates=to_buffers(est),
        doa_logits=logits.numpy() if logits is not None else None,
    )


def frame_times(config: ModelConfig, n_samples: int, rate: int) -> np.ndarray:
    n = frame_count(n_samples, config.encoder_window, config.encoder_stride)
    centers = np.arange(n) * config.encoder_stride + config.encoder_window / 2
    return centers / rate


def doa_labels(trajectories, times: np.ndarray, permutation, n_classes: int = 37) -> np.ndarray:
    """(speakers, frames) class labels; est channel c learns trajectory pi(c)."""
    labels = np.empty((2, len(times)), dtype=np.int64)
    for c in range(2):
        traj: Trajectory = trajectories[permutation[c]]
        labels[c] = [
            azimuth_to_class(trajectory_at(traj, min(t, traj.duration)), n_classes)
            for t in times
        ]
    return labels


def scene_tensors(scene, config: ModelConfig):
    """(mix, feats, refs) float64 tensors for one SceneBundle-like object."""
    mix_t, feats_t = _mix_tensors(config, scene.mixture, None)
    refs = torch.tensor(
        np.stack([r.as_array() for r in scene.references]), dtype=torch.float64
    )
    return mix_t, feats_t, refs


def batch_loss(vec: torch.Tensor, config: ModelConfig, batch, cap_db: float = SNR_CAP_DB,
               doa_weight: float = 0.0) -> torch.Tensor:
    """Mean capped PIT-SNR loss (plus optional DoA CE) over a scene batch."""
    model = MicroSepModel(config)
    params = _vector_to_param_dict(vec, config)
    total = 0.0
    for scene in batch:
        mix_t, feats_t, refs = scene_tensors(scene, config)
        est, enhanced, logits = functional_call(model, params, (mix_t, feats_t))
        final = enhanced if enhanced is not None else est
        loss, perm = pit_loss_t(refs, final, cap_db=cap_db)
        if config.enhancement:
            sep_loss, _ = pit_loss_t(refs, est, cap_db=cap_db)
            loss = loss + sep_loss
        if doa_weight and logits is not None:
            times = frame_times(config, refs.shape[-1], scene.mixture.rate)
            labels = torch.tensor(doa_labels(scene.trajectories, times, perm))
            loss = loss + doa_weight * doa_ce_loss_t(logits, labels)
        total = total + loss
    return total / len(batch)


def gradient(params: np.ndarray, config: ModelConfig, batch,
             cap_db: float = SNR_CAP_DB, doa_weight: float = 0.0) -> np.ndarray:
    """Exact gradient of the batch objective with the permutation fixed
    at its argmax."""
    vec = torch.tensor(np.asarray(params, dtype=np.float64), requires_grad=True)
    loss = batch_loss(vec, config, batch, cap_db=cap_db, doa_weight=doa_weight)
    if not torch.isfinite(loss):
        raise NonFiniteError("non-finite loss; check inputs and parameter scale")
    loss.backward()
    return vec.grad.detach().numpy().copy()


def batch_loss_value(params: np.ndarray, config: ModelConfig, batch,
                     cap_db: float = SNR_CAP_DB, doa_weight: float = 0.0) -> float:
    with torch.no_grad():
        vec = torch.tensor(np.asarray(params, dtype=np.float64))
        return float(batch_loss(vec, config, batch, cap_db=cap_db, doa_weight=doa_weight))


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 4
    lr: float = 1e-3
    decay_factor: float = 0.98
    decay_every: int | None = None  # resolves to 2, or 5 when finetuning
    finetune: bool = False
    init: np.ndarray | None = None
    seed: int = 0
    snr_cap_db: float = SNR_CAP_DB
    max_steps: int | None = None
    doa_epochs: int = 2
    doa_lr: float = 1e-3

    def resolved_decay_every(self) -> int:
        if self.decay_every is not None:
            return self.decay_every
        return 5 if self.finetune else 2

    def lr_at_epoch(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** (epoch // self.resolved_decay_every())


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (phase, epoch, lr, train, val)

    def append(self, phase, epoch, lr, train_loss, val_loss):
        self.rows.append((phase, epoch, lr, train_loss, val_loss))

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phase", "epoch", "lr", "train_loss", "val_loss"])
            writer.writerows(self.rows)


def _doa_param_mask(config: ModelConfig) -> np.ndarray:
    mask = np.zeros(param_count(config), dtype=bool)
    offset = 0
    for name, shape in param_layout(config):
        n = int(np.prod(shape))
        if name.startswith("doa."):
            mask[offset : offset + n] = True
        offset += n
    return mask


def train_micro(config: ModelConfig, train_scenes, val_scenes,
                train_cfg: TrainConfig | None = None) -> tuple[np.ndarray, TrainHistory]:
    """Adam training of the separation objective, then the frozen-backbone
    DoA head when present. Aborts on divergence, returning the last good
    parameters."""
    train_cfg = train_cfg or TrainConfig()
    rng = Rng(train_cfg.seed, "train")
    params = train_cfg.init.copy() if train_cfg.init is not None else init_params(config, rng.substream("init"))
    vec = torch.tensor(params, requires_grad=True)
    opt = torch.optim.Adam([vec], lr=train_cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    history = TrainHistory()
    steps = 0
    last_good = vec.detach().numpy().copy()
    stop = False
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at_epoch(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.substream("order", epoch).shuffled(range(len(train_scenes)))
        epoch_losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [train_scenes[i] for i in order[start : start + train_cfg.batch_size]]
            opt.zero_grad()
            loss = batch_loss(vec, config, batch, cap_db=train_cfg.snr_cap_db)
            if not torch.isfinite(loss):
                log.error("divergence at epoch %d step %d; restoring last checkpoint", epoch, steps)
                vec = torch.tensor(last_good, requires_grad=True)
                stop = True
                break
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
            steps += 1
            if train_cfg.max_steps is not None and steps >= train_cfg.max_steps:
                stop = True
                break
        val = evaluate_pit_loss(vec.detach().numpy(), config, val_scenes, train_cfg.snr_cap_db)
        history.append("separation", epoch, lr, float(np.mean(epoch_losses)) if epoch_losses else math.nan, val)
        last_good = vec.detach().numpy().copy()
        if stop:
            break
    params = vec.detach().numpy().copy()
    if config.doa_head and train_cfg.doa_epochs > 0:
        params = _train_doa_head(params, config, train_scenes, val_scenes, train_cfg, history, rng)
    return params, history


def _train_doa_head(params, config, train_scenes, val_scenes, train_cfg, history, rng):
    """Cross-entropy training of the DoA head with the backbone frozen."""
    mask = torch.tensor(_doa_param_mask(config))
    vec = torch.tensor(params.copy(), requires_grad=True)
    opt = torch.optim.Adam([vec], lr=train_cfg.doa_lr, betas=(0.9, 0.999), eps=1e-8)
    model = MicroSepModel(config)
    for epoch in range(train_cfg.doa_epochs):
        order = rng.substream("doa-order", epoch).shuffled(range(len(train_scenes)))
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [train_scenes[i] for i in order[start : start + train_cfg.batch_size]]
            opt.zero_grad()
            total = 0.0
            for scene in batch:
                mix_t, feats_t, refs = scene_tensors(scene, config)
                pdict = _vector_to_param_dict(vec, config)
                est, enhanced, logits = functional_call(model, pdict, (mix_t, feats_t))
                final = (enhanced if enhanced is not None else est).detach()
                _, perm = pit_loss_t(refs, final, cap_db=train_cfg.snr_cap_db)
                times = frame_times(config, refs.shape[-1], scene.mixture.rate)
                labels = torch.tensor(doa_labels(scene.trajectories, times, perm))
                total = total + doa_ce_loss_t(logits, labels)
            loss = total / len(batch)
            loss.backward()
            with torch.no_grad():
                vec.grad *= mask  # backbone frozen
            opt.step()
            losses.append(float(loss.detach()))
        history.append("doa", epoch, train_cfg.doa_lr, float(np.mean(losses)), math.nan)
    return vec.detach().numpy().copy()


def evaluate_pit_loss(params, config, scenes, cap_db: float = SNR_CAP_DB) -> float:
    if not scenes:
        return math.nan
    with torch.no_grad():
        vec = torch.tensor(np.asarray(params, dtype=np.float64))
        model = MicroSepModel(config)
        pdict = _vector_to_param_dict(vec, config)
        total = 0.0
        for scene in scenes:
            mix_t, feats_t, refs = scene_tensors(scene, config)
            est, enhanced, _ = functional_call(model, pdict, (mix_t, feats_t))
            final = enhanced if enhanced is not None else est
            loss, _ = pit_loss_t(refs, final, cap_db=cap_db)
            total += float(loss)
    return total / len(scenes)


def mean_pit_snr_db(params, config, scenes, cap_db: float | None = None) -> float:
    """Mean per-term PIT SNR over scenes (positive is better)."""
    from .losses import permutation_scores

    values = []
    for scene in scenes:
        out = forward(params, config, scene.mixture)
        scores = permutation_scores(tuple(scene.references), out.estimates, cap_db=cap_db)
        values.append(max(scores) / 4.0)
    return float(np.mean(values))


# --- checkpoint format --------------------------------------------------------

def save_checkpoint(path, config: ModelConfig, params: np.ndarray) -> None:
    """Versioned binary: magic, version, config JSON, u64 count, f32-LE block."""
    blob = json.dumps(config.to_dict()).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(params)))
        fh.write(np.asarray(params, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        config = ModelConfig.from_dict(json.loads(fh.read(blob_len).decode()))
        (count,) = struct.unpack("<Q", fh.read(8))
        params = np.frombuffer(fh.read(count * 4), dtype="<f4").astype(np.float64)
    expected = param_count(config)
    if len(params) != expected:
        raise ValueError(f"checkpoint holds {len(params)} parameters, config needs {expected}")
    return config, params

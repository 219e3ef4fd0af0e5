"""Joint training of the two student branches against a frozen teacher.

Per batch: teacher features (cached, gradient-free), noisy bottleneck in
train mode, decoder reconstruction loss, encoder class-token loss, then
either the probabilistic joint objective or a plain sum of the enabled
branch losses, one optimizer step over both students.

Every random draw re-derives its generator from (seed, stream, iteration),
so checkpoints never store RNG state: the iteration counter is the RNG
state.  That makes resume-at-k bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import backward, no_grad
from .config import ExperimentConfig, save_config, to_text
from .data import RosterEntry, few_shot_subsample, generate, make_splits
from .distill import decoder_loss, encoder_loss, total_loss
from .errors import ConfigError, DataError, NumericError
from .nets import (FeatureDecoder, NoisyBottleneck, VisionTransformer,
                   assign_weights, fuse_mid_layers, parameter_checksum)
from .optim import StableAdamW
from .rng import STREAM_BATCH, STREAM_DROPOUT, stream_rng
from .tensorio import load_tensors, save_tensors

log = logging.getLogger(__name__)

CKPT_RE = re.compile(r"ckpt_(\d{7})\.bin$")
LOSS_COLUMNS = "iteration,total,encoder,decoder"

__all__ = ["TrainState", "build_state", "train_entry", "train",
           "save_checkpoint", "load_checkpoint", "latest_checkpoint",
           "resolve_roster"]


@dataclass
class TrainState:
    """Everything the loop owns for one roster entry."""

    cfg: ExperimentConfig
    entry: RosterEntry
    teacher: VisionTransformer
    encoder: VisionTransformer
    decoder: FeatureDecoder
    bottleneck: NoisyBottleneck
    optimizer: StableAdamW
    iteration: int = 0
    loss_count: int = 0
    loss_sum: float = 0.0
    loss_last: float = math.nan
    _teacher_cache: dict = field(default_factory=dict, repr=False)

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / self.loss_count if self.loss_count else math.nan

    def named_params(self):
        yield from (("teacher", self.teacher.parameters()),
                    ("encoder", self.encoder.parameters()),
                    ("decoder", self.decoder.parameters()),
                    ("bottleneck", self.bottleneck.parameters()))


def build_state(cfg: ExperimentConfig, entry: RosterEntry) -> TrainState:
    if not entry.train:
        raise DataError(f"roster entry {entry.name!r} has no training samples")
    teacher = VisionTransformer.create(cfg.teacher, cfg.seed)
    teacher.freeze()
    encoder = VisionTransformer.create(cfg.encoder, cfg.seed)
    decoder = FeatureDecoder.create(cfg.decoder, cfg.seed)
    bottleneck = NoisyBottleneck.create(cfg.bottleneck, cfg.teacher.embed_dim,
                                        cfg.seed)
    groups = []
    if cfg.loss.use_encoder:
        groups.append({
            "params": {f"encoder.{n}": p
                       for n, p in encoder.parameters().items()},
            "lr": cfg.optimizer.lr_encoder,
        })
    if cfg.loss.use_decoder:
        dec_params = {f"decoder.{n}": p
                      for n, p in decoder.parameters().items()}
        dec_params.update({f"bottleneck.{n}": p
                           for n, p in bottleneck.parameters().items()})
        groups.append({"params": dec_params, "lr": cfg.optimizer.lr_decoder})
    opt = StableAdamW(
        groups,
        betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
        eps=cfg.optimizer.eps,
        weight_decay=cfg.optimizer.weight_decay,
        max_second_moment=cfg.optimizer.max_second_moment,
        clamp_updates=cfg.optimizer.clamp_updates,
    )
    return TrainState(cfg=cfg, entry=entry, teacher=teacher, encoder=encoder,
                      decoder=decoder, bottleneck=bottleneck, optimizer=opt)


def teacher_features(state: TrainState, sample):
    """Frozen-teacher pyramid + fused mid-layer map, cached per sample."""
    got = state._teacher_cache.get(sample.sample_id)
    if got is None:
        with no_grad():
            pyramid = state.teacher.forward(sample.image)
            fused = fuse_mid_layers(pyramid)
        got = (pyramid, fused)
        state._teacher_cache[sample.sample_id] = got
    return got


def train_step(state: TrainState) -> tuple[float, float, float]:
    """One batch.  Returns (total, mean encoder, mean decoder) losses;
    disabled branches report nan."""
    cfg = state.cfg
    it = state.iteration
    use_e, use_d = cfg.loss.use_encoder, cfg.loss.use_decoder
    train = state.entry.train
    batch_rng = stream_rng(cfg.seed, STREAM_BATCH, counter=it)
    indices = batch_rng.integers(0, len(train), size=cfg.batch_size)
    drop_rng = stream_rng(cfg.seed, STREAM_DROPOUT, counter=it)

    samples = [train[i] for i in indices]
    feats = [teacher_features(state, s) for s in samples]
    enc_losses: list = [None] * len(samples)
    dec_losses: list = [None] * len(samples)
    if use_e:
        pyrs = state.encoder.forward_batch([s.image for s in samples],
                                           with_patch_maps=False)
        enc_losses = [encoder_loss(t, e) for (t, _), e in zip(feats, pyrs)]
    if use_d:
        z = state.bottleneck.forward_batch([f for _, f in feats],
                                           training=True, rng=drop_rng)
        dec_pyrs = state.decoder.forward_batch(z)
        dec_losses = [decoder_loss(t, d) for (t, _), d in zip(feats, dec_pyrs)]
    triples = list(zip(enc_losses, dec_losses, [1] * len(samples)))
    enc_vals = [float(t.data) for t in enc_losses if t is not None]
    dec_vals = [float(t.data) for t in dec_losses if t is not None]

    if cfg.loss.use_noisy_or and use_e and use_d:
        loss = total_loss(triples)
    else:
        acc = None
        for le, ld, _ in triples:
            for term in (le, ld):
                if term is None:
                    continue
                acc = term if acc is None else acc + term
        loss = acc * (1.0 / cfg.batch_size)

    total = float(loss.data)
    if not math.isfinite(total):
        raise NumericError(
            f"loss diverged at iteration {it}: total={total}, "
            f"encoder={enc_vals[-5:]}, decoder={dec_vals[-5:]}")
    backward(loss)
    state.optimizer.step()
    state.optimizer.zero_grad()

    state.iteration = it + 1
    state.loss_count += 1
    state.loss_sum += total
    state.loss_last = total
    enc_mean = float(np.mean(enc_vals)) if enc_vals else math.nan
    dec_mean = float(np.mean(dec_vals)) if dec_vals else math.nan
    return total, enc_mean, dec_mean


# -- checkpoints --------------------------------------------------------------


def checkpoint_path(out_dir: str, iteration: int) -> str:
    return os.path.join(out_dir, f"ckpt_{iteration:07d}.bin")


def save_checkpoint(state: TrainState, path: str) -> None:
    tensors: dict[str, np.ndarray] = {}
    for prefix, params in state.named_params():
        for name, p in params.items():
            tensors[f"{prefix}.{name}"] = p.data
    tensors.update(state.optimizer.state_dict())
    tensors["meta.iteration"] = np.float64(state.iteration)
    tensors["meta.loss_count"] = np.float64(state.loss_count)
    tensors["meta.loss_sum"] = np.float64(state.loss_sum)
    tensors["meta.loss_last"] = np.float64(state.loss_last)
    save_tensors(path, tensors)


def load_checkpoint(cfg: ExperimentConfig, entry: RosterEntry,
                    path: str) -> TrainState:
    """Rebuild a TrainState from a checkpoint; training resumes at the
    stored iteration with bit-identical dynamics."""
    state = build_state(cfg, entry)
    stored = load_tensors(path)
    for prefix, params in state.named_params():
        subset = {}
        for name in params:
            key = f"{prefix}.{name}"
            if key not in stored:
                raise ConfigError(f"checkpoint {path} missing {key}")
            subset[name] = stored[key]
        assign_weights(params, subset)
    state.optimizer.load_state_dict(
        {k: v for k, v in stored.items() if k.startswith("opt.")})
    state.iteration = int(stored["meta.iteration"])
    state.loss_count = int(stored["meta.loss_count"])
    state.loss_sum = float(stored["meta.loss_sum"])
    state.loss_last = float(stored["meta.loss_last"])
    return state


def latest_checkpoint(out_dir: str) -> str | None:
    best = None
    best_iter = -1
    if not os.path.isdir(out_dir):
        return None
    for name in os.listdir(out_dir):
        m = CKPT_RE.search(name)
        if m and int(m.group(1)) > best_iter:
            best_iter = int(m.group(1))
            best = os.path.join(out_dir, name)
    return best


# -- the loop -----------------------------------------------------------------


def train_entry(cfg: ExperimentConfig, entry: RosterEntry,
                resume: bool = False) -> TrainState:
    out_dir = os.path.join(cfg.out_dir, entry.name)
    os.makedirs(out_dir, exist_ok=True)
    cfg_path = os.path.join(out_dir, "config.cfg")
    if os.path.exists(cfg_path):
        with open(cfg_path, encoding="utf-8") as fh:
            if fh.read() != to_text(cfg):
                raise ConfigError(
                    f"{out_dir} holds a run with a different config; "
                    "refusing to mix them")
    else:
        save_config(cfg, cfg_path)

    start_ckpt = latest_checkpoint(out_dir) if resume else None
    if start_ckpt is not None:
        state = load_checkpoint(cfg, entry, start_ckpt)
        log.info("resuming %s at iteration %d", entry.name, state.iteration)
    else:
        state = build_state(cfg, entry)
        save_checkpoint(state, checkpoint_path(out_dir, 0))

    frozen = parameter_checksum(state.teacher.parameters())
    loss_path = os.path.join(out_dir, "losses.csv")
    mode = "a" if state.iteration > 0 and os.path.exists(loss_path) else "w"
    with open(loss_path, mode, encoding="ascii") as fh:
        if mode == "w":
            fh.write(LOSS_COLUMNS + "\n")
        while state.iteration < cfg.iterations:
            total, enc, dec = train_step(state)
            fh.write(f"{state.iteration},{total!r},{enc!r},{dec!r}\n")
            if state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(state,
                                checkpoint_path(out_dir, state.iteration))
    if state.iteration % cfg.checkpoint_every != 0 or cfg.iterations == 0:
        final = checkpoint_path(out_dir, state.iteration)
        if not os.path.exists(final) or state.iteration > 0:
            save_checkpoint(state, final)
    if parameter_checksum(state.teacher.parameters()) != frozen:
        raise NumericError("teacher parameters changed during training")
    return state


def resolve_roster(cfg: ExperimentConfig) -> list[RosterEntry]:
    """Dataset + splits + optional few-shot cut, all derived from config."""
    dataset = generate(cfg.dataset)
    roster = make_splits(dataset, cfg.split_mode)
    if cfg.shots is not None:
        roster = [replace(e, train=few_shot_subsample(e.train, cfg.shots,
                                                      cfg.seed))
                  for e in roster]
    return roster


def train(cfg: ExperimentConfig, resume: bool = False) -> dict[str, TrainState]:
    """Train one model per roster entry.  Returns entry name -> state."""
    states = {}
    for entry in resolve_roster(cfg):
        states[entry.name] = train_entry(cfg, entry, resume=resume)
    return states

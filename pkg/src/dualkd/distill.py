"""Losses, probability fusion, anomaly scoring, and score records.

Training losses are differentiable (built from autodiff ops); inference
scores and probabilities are plain floats.  The two branches meet in a
noisy-OR: each branch's sigmoid-squashed loss acts as an independent
"this looks anomalous" detector, and the fused anomaly score is the product
of the two sigmoids.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Tensor, as_tensor, clip, cosine_similarity, log, sigmoid
from .nets import FeaturePyramid, group_features

# clamp applied inside BCE log terms only; scores are never clamped
PROB_CLAMP = 1e-7
COSINE_EPS = 1e-8


@dataclass
class BranchLosses:
    """Per-sample scalar losses from one evaluation pass."""

    encoder: float        # mean squared class-token distance over all m levels
    decoder: float        # grouped-cosine reconstruction loss, in [0, 2]
    score_last: float     # final-token squared distance (inference score)
    score_prefix: float   # mean over the first m-1 levels (ablation score)


@dataclass
class FusionResult:
    p_normal: float    # probability the sample is normal
    anomaly: float     # fused anomaly score, = 1 - p_normal
    p_encoder: float   # encoder branch's normality probability
    p_decoder: float   # decoder branch's normality probability


def _sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def _as_float(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def _squared_distance(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return (d * d).sum()


def decoder_loss(teacher: FeaturePyramid, decoder: FeaturePyramid) -> Tensor:
    """Half the summed cosine distances between grouped teacher/decoder maps.

    Grouped maps are compared as flat vectors (C-order flattening, which any
    serialized feature dump must match).  Differentiable through the decoder.
    """
    total = None
    for i in (1, 2):
        ft = group_features(teacher, "teacher", i)
        fd = group_features(decoder, "decoder", i)
        term = 1.0 - cosine_similarity(ft, fd, eps=COSINE_EPS)
        total = term if total is None else total + term
    return total * 0.5


def encoder_loss(teacher: FeaturePyramid, encoder: FeaturePyramid) -> Tensor:
    """Mean squared class-token distance over all m levels.

    Level m uses the post-final-norm class token on both sides (the network's
    actual output head); levels 1..m-1 use the raw block tokens.
    """
    m = len(teacher.class_tokens)
    if m != len(encoder.class_tokens):
        raise ValueError("class-token count mismatch between pyramids")
    if teacher.final_class_token is None or encoder.final_class_token is None:
        raise ValueError("both pyramids need a final class token")
    total = None
    for j in range(m - 1):
        term = _squared_distance(teacher.class_tokens[j], encoder.class_tokens[j])
        total = term if total is None else total + term
    final = _squared_distance(teacher.final_class_token, encoder.final_class_token)
    total = final if total is None else total + final
    return total * (1.0 / m)


def encoder_score_last(teacher: FeaturePyramid, encoder: FeaturePyramid) -> float:
    """Squared distance between the final (post-norm) class tokens."""
    if teacher.final_class_token is None or encoder.final_class_token is None:
        raise ValueError("both pyramids need a final class token")
    d = teacher.final_class_token.data - encoder.final_class_token.data
    return float(np.dot(d, d))


def encoder_score_prefix(teacher: FeaturePyramid, encoder: FeaturePyramid) -> float:
    """Mean squared class-token distance over the first m-1 levels (ablation)."""
    m = len(teacher.class_tokens)
    if m != len(encoder.class_tokens):
        raise ValueError("class-token count mismatch between pyramids")
    if m < 2:
        raise ValueError("prefix score needs at least 2 levels")
    acc = 0.0
    for j in range(m - 1):
        d = teacher.class_tokens[j].data - encoder.class_tokens[j].data
        acc += float(np.dot(d, d))
    return acc / (m - 1)


def branch_losses(teacher: FeaturePyramid, encoder: FeaturePyramid,
                  decoder: FeaturePyramid) -> BranchLosses:
    return BranchLosses(
        encoder=_as_float(encoder_loss(teacher, encoder)),
        decoder=_as_float(decoder_loss(teacher, decoder)),
        score_last=encoder_score_last(teacher, encoder),
        score_prefix=encoder_score_prefix(teacher, encoder),
    )


def noisy_or_probability(l_encoder, l_decoder) -> FusionResult:
    """Fuse two branch losses into normality/anomaly probabilities.

    Each branch votes anomalous with probability sigmoid(loss); the sample is
    normal only if neither votes anomalous: p_normal = 1 - s_e * s_d.
    """
    le, ld = _as_float(l_encoder), _as_float(l_decoder)
    if not (math.isfinite(le) and math.isfinite(ld)):
        raise ValueError("losses must be finite")
    s_e = _sigmoid_scalar(le)
    s_d = _sigmoid_scalar(ld)
    anomaly = s_e * s_d
    return FusionResult(
        p_normal=1.0 - anomaly,
        anomaly=anomaly,
        p_encoder=_sigmoid_scalar(-le),
        p_decoder=_sigmoid_scalar(-ld),
    )


def total_loss(batch: list[tuple]) -> Tensor:
    """Binary cross-entropy over the noisy-OR normality probability.

    batch: (encoder_loss, decoder_loss, y) triples, y = 1 for normal.
    Loss terms may be Tensors (training) or plain floats.  Probabilities are
    clamped to [PROB_CLAMP, 1 - PROB_CLAMP] inside the logs only.
    """
    if not batch:
        raise ValueError("empty batch")
    total = None
    for le, ld, y in batch:
        if y not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {y!r}")
        anomaly = sigmoid(as_tensor(le)) * sigmoid(as_tensor(ld))
        p_normal = 1.0 - anomaly
        if y == 1:
            term = log(clip(p_normal, PROB_CLAMP, 1.0 - PROB_CLAMP))
        else:
            term = log(clip(anomaly, PROB_CLAMP, 1.0 - PROB_CLAMP))
        total = term if total is None else total + term
    return -(total * (1.0 / len(batch)))


def gate_coefficient(p_decoder: float, p_normal: float) -> float:
    """(1 - p_decoder) / p_normal: how much the other branch's confidence
    scales this branch's gradient on a normal sample."""
    if p_normal <= 0:
        raise ValueError("p_normal must be positive")
    return (1.0 - p_decoder) / p_normal


def anomaly_score(l_prime, l_decoder, fusion: str = "noisy_or") -> float:
    """Fused inference score from the last-token loss and the decoder loss."""
    lp, ld = _as_float(l_prime), _as_float(l_decoder)
    if fusion == "noisy_or":
        return _sigmoid_scalar(lp) * _sigmoid_scalar(ld)
    if fusion == "plain_sum":
        return lp + ld
    raise ValueError(f"unknown fusion {fusion!r}")


# -- pixel-level map and diagnostics -----------------------------------------


def bilinear_resize(arr: np.ndarray, target: int) -> np.ndarray:
    """Resize a 2-D array to (target, target), align-corners false."""
    h, w = arr.shape
    if (h, w) == (target, target):
        return arr.copy()
    scale_y, scale_x = h / target, w / target
    ys = np.clip((np.arange(target) + 0.5) * scale_y - 0.5, 0, h - 1)
    xs = np.clip((np.arange(target) + 0.5) * scale_x - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    tl = arr[np.ix_(y0, x0)]
    tr = arr[np.ix_(y0, x1)]
    bl = arr[np.ix_(y1, x0)]
    br = arr[np.ix_(y1, x1)]
    top = tl * (1 - wx) + tr * wx
    bot = bl * (1 - wx) + br * wx
    return top * (1 - wy) + bot * wy


def box_smooth3(arr: np.ndarray) -> np.ndarray:
    """3x3 box filter with edge replication."""
    padded = np.pad(arr, 1, mode="edge")
    out = np.zeros_like(arr)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy:dy + arr.shape[0], dx:dx + arr.shape[1]]
    return out / 9.0


def anomaly_map(teacher: FeaturePyramid, decoder: FeaturePyramid,
                target_size: int, smooth: bool = False) -> Tensor:
    """Per-pixel anomaly map from grouped per-location cosine distances.

    At each patch location the channel vectors of the grouped maps are
    compared; the two group distances add; the patch grid is bilinearly
    upsampled to target_size.
    """
    per_loc = None
    for i in (1, 2):
        ft = group_features(teacher, "teacher", i).data
        fd = group_features(decoder, "decoder", i).data
        if ft.shape != fd.shape:
            raise ValueError("grouped map shapes differ")
        dot = (ft * fd).sum(axis=0)
        denom = np.maximum(
            np.sqrt((ft * ft).sum(axis=0)) * np.sqrt((fd * fd).sum(axis=0)),
            COSINE_EPS)
        dist = 1.0 - dot / denom
        per_loc = dist if per_loc is None else per_loc + dist
    if smooth:
        per_loc = box_smooth3(per_loc)
    return Tensor(bilinear_resize(per_loc, target_size))


def feature_variance_map(features: list) -> Tensor:
    """Per-location variance (population) across samples of channel-mean value."""
    if len(features) < 2:
        raise ValueError("variance map needs at least 2 samples")
    stacked = np.stack([
        (f.data if isinstance(f, Tensor) else np.asarray(f, float)).mean(axis=0)
        for f in features])
    return Tensor(stacked.var(axis=0))


# -- per-sample score records -------------------------------------------------


@dataclass
class ScoreRecord:
    """One evaluated sample: all branch losses plus both fused scores.

    label keeps the dataset convention: 1 = normal, 0 = anomalous.
    """

    sample_id: str
    split: str
    label: int
    encoder_loss: float
    score_last: float
    score_prefix: float
    decoder_loss: float
    anomaly_noisy_or: float
    anomaly_plain_sum: float

    @classmethod
    def from_losses(cls, sample_id: str, split: str, label: int,
                    losses: BranchLosses) -> "ScoreRecord":
        return cls(
            sample_id=sample_id,
            split=split,
            label=label,
            encoder_loss=losses.encoder,
            score_last=losses.score_last,
            score_prefix=losses.score_prefix,
            decoder_loss=losses.decoder,
            anomaly_noisy_or=anomaly_score(losses.score_last, losses.decoder, "noisy_or"),
            anomaly_plain_sum=anomaly_score(losses.score_last, losses.decoder, "plain_sum"),
        )


SCORE_COLUMNS = [f.name for f in fields(ScoreRecord)]


def write_score_records(path: str | os.PathLike, records: list[ScoreRecord]) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_COLUMNS)
        for r in records:
            row = []
            for c in SCORE_COLUMNS:
                v = getattr(r, c)
                row.append(repr(float(v)) if isinstance(v, float) else v)
            writer.writerow(row)


def read_score_records(path: str | os.PathLike) -> list[ScoreRecord]:
    out = []
    with open(path, "r", newline="", encoding="ascii") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(ScoreRecord(
                sample_id=row["sample_id"],
                split=row["split"],
                label=int(row["label"]),
                encoder_loss=float(row["encoder_loss"]),
                score_last=float(row["score_last"]),
                score_prefix=float(row["score_prefix"]),
                decoder_loss=float(row["decoder_loss"]),
                anomaly_noisy_or=float(row["anomaly_noisy_or"]),
                anomaly_plain_sum=float(row["anomaly_plain_sum"]),
            ))
    return out

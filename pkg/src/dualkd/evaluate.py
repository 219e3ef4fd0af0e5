"""Inference-side evaluation: test-set scoring, metric reports, the
component-flag sweep, and the few-shot sweep.

Label convention: dataset samples carry 1 = normal, while every routine in
dualkd.metrics treats 1 = anomalous.  The flip happens in exactly one
function here (anomaly_labels); no other module inverts labels.

Reports are deterministic artifacts: wall-clock time lives on the in-memory
MetricsReport but is excluded from JSON and from equality, so identical runs
emit byte-identical report files.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import no_grad
from .config import ExperimentConfig, config_hash, with_loss_flags
from .distill import ScoreRecord, anomaly_map, anomaly_score, branch_losses, write_score_records
from .errors import ConfigError, DataError
from .metrics import ScoreSet, auroc, average_precision, f1_max, pixel_metrics
from .train import TrainState, latest_checkpoint, load_checkpoint, resolve_roster, teacher_features, train

SCORE_VARIANTS = ("last_token", "mean_prefix", "all_layers")
FUSIONS = ("noisy_or", "plain_sum")
EVAL_BATCH = 16
HIST_BINS = 50

__all__ = ["EntryReport", "MetricsReport", "AblationRow", "FewShotPoint",
           "anomaly_labels", "score_test_set", "fused_scores",
           "evaluate_entry", "evaluate", "report_to_json", "report_from_json",
           "emit_report", "ABLATION_ROWS", "run_ablation",
           "write_ablation_csv", "run_fewshot", "write_fewshot_csv",
           "score_histogram"]


def anomaly_labels(records: list[ScoreRecord]) -> np.ndarray:
    """Dataset labels (1 = normal) -> metric labels (1 = anomalous)."""
    return np.array([1 - r.label for r in records], dtype=np.int64)


def score_test_set(state: TrainState):
    """Score every test sample of the state's roster entry in eval mode.

    Returns (records, pixel_scores, pixel_masks).  All branch losses are
    recorded for every sample regardless of which branches were trained, so
    one pass serves every score variant.  Pixel pairs cover normal samples
    (all-zero mask) and masked anomalies; anomalies without pixel ground
    truth are left out.
    """
    entry = state.entry
    if not entry.test:
        raise DataError(f"roster entry {entry.name!r} has no test samples")
    records: list[ScoreRecord] = []
    pixel_scores: list[np.ndarray] = []
    pixel_masks: list[np.ndarray] = []
    for start in range(0, len(entry.test), EVAL_BATCH):
        chunk = entry.test[start:start + EVAL_BATCH]
        feats = [teacher_features(state, s) for s in chunk]
        with no_grad():
            enc_pyrs = state.encoder.forward_batch(
                [s.image for s in chunk], with_patch_maps=False)
            z = state.bottleneck.forward_batch([f for _, f in feats],
                                               training=False)
            dec_pyrs = state.decoder.forward_batch(z)
        for s, (tp, _), ep, dp in zip(chunk, feats, enc_pyrs, dec_pyrs):
            rec = ScoreRecord.from_losses(s.sample_id, s.split, s.label,
                                          branch_losses(tp, ep, dp))
            records.append(rec)
            side = s.image.shape[-1]
            if s.label == 1:
                pixel_scores.append(anomaly_map(tp, dp, side).data)
                pixel_masks.append(np.zeros((side, side), dtype=np.int64))
            elif s.mask is not None:
                pixel_scores.append(anomaly_map(tp, dp, side).data)
                pixel_masks.append(np.asarray(s.mask, dtype=np.int64))
    return records, pixel_scores, pixel_masks


def _l_prime(record: ScoreRecord, variant: str) -> float:
    if variant == "last_token":
        return record.score_last
    if variant == "mean_prefix":
        return record.score_prefix
    if variant == "all_layers":
        return record.encoder_loss
    raise ConfigError(f"score_variant must be one of {SCORE_VARIANTS}")


def fused_scores(records: list[ScoreRecord], use_encoder: bool,
                 use_decoder: bool, variant: str = "last_token",
                 fusion: str = "noisy_or") -> np.ndarray:
    """Final anomaly score per record under the given component flags.

    With both branches the fusion rule applies; with one branch the score is
    that branch's loss directly (monotone-equivalent to its sigmoid).
    """
    if fusion not in FUSIONS:
        raise ConfigError(f"fusion must be one of {FUSIONS}")
    if not (use_encoder or use_decoder):
        raise ConfigError("at least one branch must contribute a score")
    out = np.empty(len(records), dtype=np.float64)
    for i, r in enumerate(records):
        if use_encoder and use_decoder:
            out[i] = anomaly_score(_l_prime(r, variant), r.decoder_loss,
                                   fusion)
        elif use_encoder:
            out[i] = _l_prime(r, variant)
        else:
            out[i] = r.decoder_loss
    return out


@dataclass
class EntryReport:
    """Metrics for one roster entry.

    image always holds auroc/ap/f1max of the fused score plus the two
    single-branch aurocs (diagnostics even when a branch went untrained).
    pixel is None when the entry has no positive ground-truth pixels.
    """

    name: str
    num_test: int
    num_anomalous: int
    image: dict
    pixel: dict | None


@dataclass
class MetricsReport:
    config_hash: str
    score_variant: str
    fusion: str
    use_encoder: bool
    use_decoder: bool
    entries: list[EntryReport]
    mean: dict
    records: dict = field(default_factory=dict, compare=False, repr=False)
    wall_clock: float = field(default=0.0, compare=False)


def evaluate_entry(state: TrainState, score_variant: str = "last_token",
                   fusion: str = "noisy_or"):
    """One entry's report row.  Returns (EntryReport, records)."""
    records, pscores, pmasks = score_test_set(state)
    labels = anomaly_labels(records)
    if labels.min() == labels.max():
        raise DataError(
            f"entry {state.entry.name!r} test set needs both classes")
    fused = fused_scores(records, state.cfg.loss.use_encoder,
                         state.cfg.loss.use_decoder, score_variant, fusion)
    enc_branch = np.array([_l_prime(r, score_variant) for r in records])
    dec_branch = np.array([r.decoder_loss for r in records])
    image = {
        "auroc": auroc(ScoreSet(fused, labels)),
        "ap": average_precision(ScoreSet(fused, labels)),
        "f1max": f1_max(ScoreSet(fused, labels)),
        "auroc_encoder": auroc(ScoreSet(enc_branch, labels)),
        "auroc_decoder": auroc(ScoreSet(dec_branch, labels)),
    }
    pixel = None
    if pscores and any(m.any() for m in pmasks):
        pixel = pixel_metrics(pscores, pmasks)
    report = EntryReport(
        name=state.entry.name,
        num_test=len(records),
        num_anomalous=int(labels.sum()),
        image=image,
        pixel=pixel,
    )
    return report, records


def _mean_row(entries: list[EntryReport]) -> dict:
    mean = {}
    for key in entries[0].image:
        mean[key] = sum(e.image[key] for e in entries) / len(entries)
    if all(e.pixel is not None for e in entries):
        for key in entries[0].pixel:
            mean[key] = sum(e.pixel[key] for e in entries) / len(entries)
    return mean


def _load_states(cfg: ExperimentConfig) -> dict[str, TrainState]:
    states = {}
    for entry in resolve_roster(cfg):
        run_dir = os.path.join(cfg.out_dir, entry.name)
        ckpt = latest_checkpoint(run_dir)
        if ckpt is None:
            raise ConfigError(f"no checkpoint under {run_dir}; train first")
        states[entry.name] = load_checkpoint(cfg, entry, ckpt)
    return states


def evaluate(cfg: ExperimentConfig, score_variant: str = "last_token",
             fusion: str = "noisy_or",
             states: dict[str, TrainState] | None = None) -> MetricsReport:
    """Evaluate every roster entry of a trained run.

    states: pass the dict returned by train() to skip checkpoint loading;
    otherwise the newest checkpoint under cfg.out_dir/<entry>/ is used.
    """
    if score_variant not in SCORE_VARIANTS:
        raise ConfigError(f"score_variant must be one of {SCORE_VARIANTS}")
    if fusion not in FUSIONS:
        raise ConfigError(f"fusion must be one of {FUSIONS}")
    t0 = time.perf_counter()
    if states is None:
        states = _load_states(cfg)
    entries = []
    records = {}
    for name in sorted(states):
        row, recs = evaluate_entry(states[name], score_variant, fusion)
        entries.append(row)
        records[name] = recs
    if not entries:
        raise DataError("nothing to evaluate: empty roster")
    return MetricsReport(
        config_hash=config_hash(cfg),
        score_variant=score_variant,
        fusion=fusion,
        use_encoder=cfg.loss.use_encoder,
        use_decoder=cfg.loss.use_decoder,
        entries=entries,
        mean=_mean_row(entries),
        records=records,
        wall_clock=time.perf_counter() - t0,
    )


# -- serialization ------------------------------------------------------------


def report_to_json(report: MetricsReport) -> str:
    obj = {
        "config_hash": report.config_hash,
        "score_variant": report.score_variant,
        "fusion": report.fusion,
        "use_encoder": report.use_encoder,
        "use_decoder": report.use_decoder,
        "entries": [{
            "name": e.name,
            "num_test": e.num_test,
            "num_anomalous": e.num_anomalous,
            "image": e.image,
            "pixel": e.pixel,
        } for e in report.entries],
        "mean": report.mean,
    }
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> MetricsReport:
    obj = json.loads(text)
    entries = [EntryReport(name=e["name"], num_test=e["num_test"],
                           num_anomalous=e["num_anomalous"],
                           image=e["image"], pixel=e["pixel"])
               for e in obj["entries"]]
    return MetricsReport(config_hash=obj["config_hash"],
                         score_variant=obj["score_variant"],
                         fusion=obj["fusion"],
                         use_encoder=obj["use_encoder"],
                         use_decoder=obj["use_decoder"],
                         entries=entries, mean=obj["mean"])


def score_histogram(values: np.ndarray, labels: np.ndarray,
                    bins: int = HIST_BINS):
    """Two-class histogram on shared uniform bins over the observed range.

    labels: 1 = anomalous.  Returns (normal_counts, anomalous_counts, edges);
    the two count vectors sum to the sample count.
    """
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    normal, _ = np.histogram(values[labels == 0], bins=edges)
    anomalous, _ = np.histogram(values[labels == 1], bins=edges)
    return normal, anomalous, edges


def _plot_histograms(records: list[ScoreRecord], report: MetricsReport,
                     path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = anomaly_labels(records)
    panels = [
        ("encoder branch", np.array([_l_prime(r, report.score_variant)
                                     for r in records])),
        ("decoder branch", np.array([r.decoder_loss for r in records])),
        ("fused", fused_scores(records, report.use_encoder,
                               report.use_decoder, report.score_variant,
                               report.fusion)),
    ]
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3))
    for ax, (title, values) in zip(np.atleast_1d(axes), panels):
        normal, anomalous, edges = score_histogram(values, labels)
        width = edges[1] - edges[0]
        ax.bar(edges[:-1], normal, width=width, align="edge", alpha=0.6,
               label="normal")
        ax.bar(edges[:-1], anomalous, width=width, align="edge", alpha=0.6,
               label="anomalous")
        ax.set_title(title)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_report(report: MetricsReport, out_dir: str,
                formats: tuple = ("json", "csv", "histogram")) -> list[str]:
    """Write the report's artifacts; returns the paths written.

    json -> report.json (byte-deterministic), csv -> per-entry score records,
    histogram -> per-entry two-class score histograms.  Wall-clock goes to
    timing.txt on every call so the main artifacts stay reproducible.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        with open(path, "w", encoding="ascii") as fh:
            fh.write(report_to_json(report))
        written.append(path)
    for name, recs in sorted(report.records.items()):
        if "csv" in formats:
            path = os.path.join(out_dir, f"scores_{name}.csv")
            write_score_records(path, recs)
            written.append(path)
        if "histogram" in formats:
            path = os.path.join(out_dir, f"hist_{name}.png")
            _plot_histograms(recs, report, path)
            written.append(path)
    timing = os.path.join(out_dir, "timing.txt")
    with open(timing, "w", encoding="ascii") as fh:
        fh.write(f"eval_seconds={report.wall_clock!r}\n")
    return written


# -- component-flag sweep -----------------------------------------------------

# (use_encoder, use_decoder, use_last_token, use_noisy_or), one row per
# evaluated combination.  use_last_token only changes scoring, so rows
# sharing the other three flags reuse one training.
ABLATION_ROWS = [
    (True, False, False, False),
    (False, True, False, False),
    (True, False, True, False),
    (True, True, False, True),
    (True, True, True, False),
    (True, True, True, True),
]


@dataclass
class AblationRow:
    use_encoder: bool
    use_decoder: bool
    use_last_token: bool
    use_noisy_or: bool
    report: MetricsReport


def _training_tag(use_encoder: bool, use_decoder: bool,
                  use_noisy_or: bool) -> str:
    if use_encoder and use_decoder:
        return "joint_nor" if use_noisy_or else "joint_sum"
    return "enc_only" if use_encoder else "dec_only"


def run_ablation(cfg: ExperimentConfig, resume: bool = True) -> list[AblationRow]:
    """Train/evaluate all ABLATION_ROWS combinations on cfg's dataset.

    Each unique (use_encoder, use_decoder, use_noisy_or) trains once under
    cfg.out_dir/ablate_<tag>/; rows differing only in use_last_token share
    that training and differ in scoring.
    """
    trained: dict[str, tuple] = {}  # tag -> (states, training config)
    rows = []
    for use_e, use_d, use_tok, use_nor in ABLATION_ROWS:
        tag = _training_tag(use_e, use_d, use_nor)
        if tag not in trained:
            run_cfg = with_loss_flags(
                replace(cfg, out_dir=os.path.join(cfg.out_dir, f"ablate_{tag}")),
                use_encoder=use_e, use_decoder=use_d,
                use_last_token=True, use_noisy_or=use_nor)
            trained[tag] = (train(run_cfg, resume=resume), run_cfg)
        states, run_cfg = trained[tag]
        variant = "last_token" if use_tok or not use_e else "mean_prefix"
        fusion = "noisy_or" if use_nor else "plain_sum"
        report = evaluate(run_cfg, variant, fusion, states=states)
        rows.append(AblationRow(use_e, use_d, use_tok, use_nor, report))
    return rows


def write_ablation_csv(rows: list[AblationRow], path: str) -> None:
    flag_cols = ["use_encoder", "use_decoder", "use_last_token",
                 "use_noisy_or"]
    metric_cols = list(rows[0].report.mean)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(flag_cols + metric_cols) + "\n")
        for row in rows:
            flags = [str(int(getattr(row, c))) for c in flag_cols]
            vals = [repr(row.report.mean.get(c, math.nan))
                    for c in metric_cols]
            fh.write(",".join(flags + vals) + "\n")


# -- few-shot sweep -----------------------------------------------------------


@dataclass
class FewShotPoint:
    shots: int
    mean_auroc: float
    report: MetricsReport


def run_fewshot(cfg: ExperimentConfig, shots: tuple = (1, 2, 4, 8),
                resume: bool = True) -> list[FewShotPoint]:
    """Train/evaluate the run at each training-set size in `shots`.

    Each point trains under cfg.out_dir/shots_<k>/ on k normal samples per
    entry (deterministic subsample per cfg.seed).
    """
    if not shots or any(int(k) < 1 for k in shots):
        raise ConfigError("shots must be positive integers")
    points = []
    for k in shots:
        run_cfg = replace(cfg, shots=int(k),
                          out_dir=os.path.join(cfg.out_dir, f"shots_{int(k)}"))
        states = train(run_cfg, resume=resume)
        report = evaluate(run_cfg, states=states)
        points.append(FewShotPoint(shots=int(k),
                                   mean_auroc=report.mean["auroc"],
                                   report=report))
    return points


def write_fewshot_csv(points: list[FewShotPoint], path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("shots,mean_auroc\n")
        for p in points:
            fh.write(f"{p.shots},{p.mean_auroc!r}\n")

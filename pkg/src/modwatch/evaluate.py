"""Anomaly scoring and detection metrics.

A sample's anomaly score is its reconstruction MSE under a trained model,
kept per channel (different fault types light up different waveforms) with
the aggregate being the mean across channels.  Flagging convention: a
sample is flagged anomalous when score >= threshold.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as M
from .data import WaveformTensor
from .errors import ConfigError, DataError, ShapeError
from .model import ModelParameters, ModelSpec
from .tensor import Tensor
from .util import seeded_rng

_DRAW_TAG = 0x5C02
DENSITY_EDGES = 10.0 ** (np.arange(33) * 0.25 - 7.0)  # 1e-7 .. 1e1, 0.25 decades


@dataclass
class AnomalyScore:
    sample_id: int
    module_id: int
    label: str
    channel_mse: np.ndarray  # (channels,) float64
    aggregate: float
    replica_aggregates: np.ndarray | None = None  # (n_draws,) in sampled mode


@dataclass
class RocCurve:
    points: np.ndarray  # (K, 2) columns FPR, TPR; starts (0,0), ends (1,1)
    thresholds: np.ndarray  # (K,) sweep values, descending; starts +inf
    auc: float
    positive_count: int
    negative_count: int


def _channel_mse(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    err = (x.astype(np.float64) - x_hat.astype(np.float64)) ** 2
    return err.mean(axis=1)  # (batch, channels)


def score(
    params: ModelParameters,
    spec: ModelSpec,
    data: WaveformTensor,
    mode: str = "deterministic",
    n_draws: int = 100,
    seed: int = 0,
    batch_size: int = 32,
    jobs: int = 1,
) -> list[AnomalyScore]:
    """Reconstruction-error scores for every sample in ``data``.

    ``deterministic`` mode decodes from z = mu.  ``sampled`` mode averages
    ``n_draws`` stochastic reconstructions and keeps the per-draw aggregate
    scores so downstream metrics can carry uncertainty.
    """
    if mode not in ("deterministic", "sampled"):
        raise ConfigError(f"unknown scoring mode {mode!r}")
    if mode == "sampled" and n_draws < 2:
        raise ConfigError(f"sampled mode needs n_draws >= 2, got {n_draws}")
    data.validate()
    if data.data.shape[1:] != (spec.time_steps, spec.channels):
        raise ShapeError(
            f"data dims {data.data.shape[1:]} vs model ({spec.time_steps}, {spec.channels})"
        )
    if spec.mode == "cvae" and data.n_samples:
        worst = int(data.module_ids.max())
        if worst >= spec.module_count:
            raise DataError(f"module id {worst} unseen by this model")

    n = data.n_samples
    starts = list(range(0, n, batch_size))

    def _score_batch(start: int):
        stop = min(start + batch_size, n)
        x = data.data[start:stop]
        ids = data.module_ids[start:stop] if spec.mode == "cvae" else None
        if mode == "deterministic":
            x_hat = M.reconstruct(params, spec, x, ids, epsilon=None)
            ch = _channel_mse(x, x_hat)
            return start, ch, None
        ch_sum = np.zeros((stop - start, spec.channels), dtype=np.float64)
        reps = np.zeros((n_draws, stop - start), dtype=np.float64)
        xt = Tensor(x)
        dist = M.encode(params, spec, xt, ids)
        for draw in range(n_draws):
            rng = seeded_rng(seed, _DRAW_TAG, draw, start)
            eps = rng.standard_normal((stop - start, spec.latent_dim)).astype(np.float32)
            z = M.reparameterize(dist, eps)
            x_hat = M.decode(params, spec, z, ids).data
            ch = _channel_mse(x, x_hat)
            ch_sum += ch
            reps[draw] = ch.mean(axis=1)
        return start, ch_sum / n_draws, reps

    if jobs <= 1:
        batches = [_score_batch(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            batches = list(pool.map(_score_batch, starts))

    out: list[AnomalyScore] = []
    for start, ch, reps in batches:
        for i in range(ch.shape[0]):
            out.append(
                AnomalyScore(
                    sample_id=int(data.sample_ids[start + i]),
                    module_id=int(data.module_ids[start + i]),
                    label=str(data.labels[start + i]),
                    channel_mse=ch[i],
                    aggregate=float(ch[i].mean()),
                    replica_aggregates=None if reps is None else reps[:, i].copy(),
                )
            )
    return out


def roc_auc(normal_scores, abnormal_scores) -> RocCurve:
    """ROC curve and AUC with higher scores treated as more anomalous.

    AUC is the Mann-Whitney pair statistic: the fraction of
    (abnormal, normal) pairs where the abnormal sample scores higher,
    counting ties as one half.
    """
    neg = np.asarray(normal_scores, dtype=np.float64).ravel()
    pos = np.asarray(abnormal_scores, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise DataError("both score classes must be nonempty")

    neg_sorted = np.sort(neg)
    less = np.searchsorted(neg_sorted, pos, side="left")
    less_eq = np.searchsorted(neg_sorted, pos, side="right")
    wins = less.sum(dtype=np.float64) + 0.5 * (less_eq - less).sum(dtype=np.float64)
    auc = float(wins / (pos.size * neg.size))

    sweep = np.unique(np.concatenate([neg, pos]))[::-1]
    thresholds = np.concatenate([[np.inf], sweep])
    fpr = np.array([(neg >= t).mean() for t in thresholds])
    tpr = np.array([(pos >= t).mean() for t in thresholds])
    points = np.column_stack([fpr, tpr])
    return RocCurve(
        points=points,
        thresholds=thresholds,
        auc=auc,
        positive_count=int(pos.size),
        negative_count=int(neg.size),
    )


def pick_threshold(normal_scores, fpr_budget: float) -> float:
    """Smallest score value whose empirical FPR on ``normal_scores`` stays
    within the budget; a sample is flagged when its score >= threshold."""
    if not 0.0 < fpr_budget <= 1.0:
        raise ConfigError(f"fpr_budget must be in (0, 1], got {fpr_budget}")
    s = np.sort(np.asarray(normal_scores, dtype=np.float64).ravel())
    if s.size < 10:
        raise DataError(f"need >= 10 normal scores to resolve the quantile, got {s.size}")
    k = int(np.floor(fpr_budget * s.size))
    if k < 1:
        raise DataError(
            f"budget {fpr_budget} allows no false positives among {s.size} samples"
        )
    # count of scores >= v must be <= k; candidates are the data values
    for v in np.unique(s):
        if s.size - np.searchsorted(s, v, side="left") <= k:
            return float(v)
    return float(np.nextafter(s[-1], np.inf))


def flagged(scores, threshold: float) -> np.ndarray:
    return np.asarray(scores, dtype=np.float64) >= threshold


@dataclass
class BoxStats:
    count: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    mean: float


def box_stats(values) -> BoxStats:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DataError("cannot summarize an empty group")
    q1, med, q3 = np.percentile(v, [25.0, 50.0, 75.0])
    return BoxStats(
        count=int(v.size),
        minimum=float(v.min()),
        q1=float(q1),
        median=float(med),
        q3=float(q3),
        maximum=float(v.max()),
        mean=float(v.mean()),
    )


def density_counts(values) -> np.ndarray:
    """Histogram over the fixed log10 grid; values are clipped into range."""
    v = np.asarray(values, dtype=np.float64).ravel()
    v = np.clip(v, DENSITY_EDGES[0], DENSITY_EDGES[-1])
    counts, _ = np.histogram(v, bins=DENSITY_EDGES)
    return counts


def _aggregate_column(scores: list[AnomalyScore], channel: int | None) -> np.ndarray:
    if channel is None:
        return np.array([s.aggregate for s in scores], dtype=np.float64)
    return np.array([s.channel_mse[channel] for s in scores], dtype=np.float64)


def summarize(
    scores: list[AnomalyScore], channel_names: list[str]
) -> tuple[list[dict], list[dict]]:
    """Box statistics per (module, label, channel) and pooled log-bin
    densities per (label, channel); 'aggregate' rows cover the per-sample
    mean score."""
    if not scores:
        raise DataError("no scores to summarize")
    columns = [("aggregate", None)] + [(nm, c) for c, nm in enumerate(channel_names)]
    modules = sorted({s.module_id for s in scores})
    labels = sorted({s.label for s in scores})

    box_rows = []
    for module in modules:
        for label in labels:
            group = [s for s in scores if s.module_id == module and s.label == label]
            if not group:
                continue
            for name, ch in columns:
                st = box_stats(_aggregate_column(group, ch))
                box_rows.append(
                    {
                        "module": module,
                        "label": label,
                        "channel": name,
                        "count": st.count,
                        "min": st.minimum,
                        "q1": st.q1,
                        "median": st.median,
                        "q3": st.q3,
                        "max": st.maximum,
                        "mean": st.mean,
                    }
                )

    density_rows = []
    for label in labels:
        group = [s for s in scores if s.label == label]
        for name, ch in columns:
            counts = density_counts(_aggregate_column(group, ch))
            total = counts.sum()
            for b in range(counts.size):
                density_rows.append(
                    {
                        "label": label,
                        "channel": name,
                        "bin_low": DENSITY_EDGES[b],
                        "bin_high": DENSITY_EDGES[b + 1],
                        "count": int(counts[b]),
                        "fraction": counts[b] / total if total else 0.0,
                    }
                )
    return box_rows, density_rows


def auc_table(
    scores: list[AnomalyScore], channel_names: list[str], normal_label: str = "normal"
) -> list[dict]:
    """Per fault class: aggregate AUC pooled and per module, plus
    per-channel AUCs ranked by detection strength."""
    normals = [s for s in scores if s.label == normal_label]
    faults = sorted({s.label for s in scores if s.label != normal_label})
    if not normals:
        raise DataError("no normal samples to compare against")
    rows = []
    for fault in faults:
        abnormal = [s for s in scores if s.label == fault]
        channel_rows = []
        for name, ch in [("aggregate", None)] + [
            (nm, c) for c, nm in enumerate(channel_names)
        ]:
            curve = roc_auc(
                _aggregate_column(normals, ch), _aggregate_column(abnormal, ch)
            )
            channel_rows.append(
                {
                    "fault": fault,
                    "module": "all",
                    "channel": name,
                    "auc": curve.auc,
                    "n_normal": curve.negative_count,
                    "n_abnormal": curve.positive_count,
                }
            )
        ranked = sorted(
            (r for r in channel_rows if r["channel"] != "aggregate"),
            key=lambda r: -r["auc"],
        )
        rank_of = {r["channel"]: i + 1 for i, r in enumerate(ranked)}
        for r in channel_rows:
            r["channel_rank"] = rank_of.get(r["channel"], "")
            rows.append(r)
        for module in sorted({s.module_id for s in abnormal}):
            mod_norm = [s for s in normals if s.module_id == module]
            mod_abn = [s for s in abnormal if s.module_id == module]
            if not mod_norm:
                continue
            curve = roc_auc(
                _aggregate_column(mod_norm, None), _aggregate_column(mod_abn, None)
            )
            rows.append(
                {
                    "fault": fault,
                    "module": module,
                    "channel": "aggregate",
                    "auc": curve.auc,
                    "n_normal": curve.negative_count,
                    "n_abnormal": curve.positive_count,
                    "channel_rank": "",
                }
            )
    return rows


def _replica_auc_sd(
    normals: list[AnomalyScore], abnormal: list[AnomalyScore]
) -> float | None:
    if any(s.replica_aggregates is None for s in normals + abnormal):
        return None
    draws = {s.replica_aggregates.size for s in normals + abnormal}
    if len(draws) != 1:
        raise DataError("replica counts differ between samples")
    n_draws = draws.pop()
    aucs = np.empty(n_draws, dtype=np.float64)
    neg = np.stack([s.replica_aggregates for s in normals])  # (N, R)
    pos = np.stack([s.replica_aggregates for s in abnormal])
    for r in range(n_draws):
        aucs[r] = roc_auc(neg[:, r], pos[:, r]).auc
    return float(aucs.std())


@dataclass
class ComparisonCell:
    fault: str
    module: int
    n_normal: int
    n_abnormal: int
    auc_multi: float | None
    sd_multi: float | None
    auc_single: float | None
    sd_single: float | None

    @property
    def delta(self) -> float | None:
        if self.auc_multi is None or self.auc_single is None:
            return None
        return self.auc_multi - self.auc_single


def compare_methods(
    multi_scores: list[AnomalyScore],
    single_scores: dict[int, list[AnomalyScore]],
    normal_label: str = "normal",
) -> list[ComparisonCell]:
    """AUC of the multi-module model vs the per-module models on the same
    test set, one cell per (fault class, module); cells without fault or
    normal samples are marked absent (None) rather than zero."""
    faults = sorted({s.label for s in multi_scores if s.label != normal_label})
    modules = sorted({s.module_id for s in multi_scores})
    by_module = {m: [s for s in multi_scores if s.module_id == m] for m in modules}
    for m in modules:
        if m not in single_scores:
            raise DataError(f"no single-module scores for module {m}")
        multi_ids = sorted(s.sample_id for s in by_module[m])
        single_ids = sorted(s.sample_id for s in single_scores[m])
        if multi_ids != single_ids:
            raise DataError(f"methods scored different sample sets for module {m}")

    cells = []
    for fault in faults:
        for m in modules:
            def _split(group):
                neg = [s for s in group if s.label == normal_label]
                pos = [s for s in group if s.label == fault]
                return neg, pos

            m_neg, m_pos = _split(by_module[m])
            s_neg, s_pos = _split(single_scores[m])
            if not m_pos or not m_neg:
                cells.append(
                    ComparisonCell(fault, m, len(m_neg), len(m_pos), None, None, None, None)
                )
                continue
            auc_m = roc_auc(
                _aggregate_column(m_neg, None), _aggregate_column(m_pos, None)
            ).auc
            auc_s = roc_auc(
                _aggregate_column(s_neg, None), _aggregate_column(s_pos, None)
            ).auc
            cells.append(
                ComparisonCell(
                    fault,
                    m,
                    len(m_neg),
                    len(m_pos),
                    auc_m,
                    _replica_auc_sd(m_neg, m_pos),
                    auc_s,
                    _replica_auc_sd(s_neg, s_pos),
                )
            )
    return cells


# ---------------------------------------------------------------- CSV output


def write_scores_csv(path, scores: list[AnomalyScore], channel_names: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "module", "label", *channel_names, "aggregate"])
        for s in scores:
            w.writerow(
                [s.sample_id, s.module_id, s.label]
                + [repr(float(v)) for v in s.channel_mse]
                + [repr(s.aggregate)]
            )


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, (fpr, tpr) in zip(curve.thresholds, curve.points):
            w.writerow([repr(float(t)), repr(float(fpr)), repr(float(tpr))])


def write_auc_table_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["fault", "module", "channel", "auc", "n_normal", "n_abnormal", "channel_rank"]
        )
        for r in rows:
            w.writerow(
                [
                    r["fault"],
                    r["module"],
                    r["channel"],
                    repr(r["auc"]),
                    r["n_normal"],
                    r["n_abnormal"],
                    r["channel_rank"],
                ]
            )


def write_boxstats_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["module", "label", "channel", "count", "min", "q1", "median", "q3", "max", "mean"]
        )
        for r in rows:
            w.writerow(
                [r["module"], r["label"], r["channel"], r["count"]]
                + [repr(r[k]) for k in ("min", "q1", "median", "q3", "max", "mean")]
            )


def write_density_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "channel", "bin_low", "bin_high", "count", "fraction"])
        for r in rows:
            w.writerow(
                [
                    r["label"],
                    r["channel"],
                    repr(float(r["bin_low"])),
                    repr(float(r["bin_high"])),
                    r["count"],
                    repr(float(r["fraction"])),
                ]
            )


def write_comparison_csv(path, cells: list[ComparisonCell]) -> None:
    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "fault",
                "module",
                "n_normal",
                "n_abnormal",
                "auc_multi",
                "sd_multi",
                "auc_single",
                "sd_single",
                "delta",
            ]
        )
        for c in cells:
            w.writerow(
                [
                    c.fault,
                    c.module,
                    c.n_normal,
                    c.n_abnormal,
                    fmt(c.auc_multi),
                    fmt(c.sd_multi),
                    fmt(c.auc_single),
                    fmt(c.sd_single),
                    fmt(c.delta),
                ]
            )

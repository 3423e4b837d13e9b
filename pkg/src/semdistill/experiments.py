"""Evaluation suites built on a trained student.

Every runner takes ``(model, pca, dataset)``. ``model`` is anything with a
``predict(hs) -> list[GaussianMixture]`` method: an :class:`MdnModel`, or a
:class:`TruthOracle` that hands back the generating mixtures of synthetic
data. ``pca`` maps raw embeddings into the space the model predicts in and
may be ``None`` when the data is already there.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import mdn
from . import pca as pca_mod
from .errors import DimensionError
from .gmm import GaussianMixture, log_density, mixture_mean, renyi2_entropy
from .metrics import (
    ScoredSet,
    auroc,
    auprc,
    bootstrap,
    spearman,
    teacher_dispersion,
)

log = logging.getLogger(__name__)


@dataclass
class SuiteResult:
    name: str
    reports: dict = field(default_factory=dict)  # name -> EvalReport
    values: dict = field(default_factory=dict)  # name -> scalar or table
    scores: dict = field(default_factory=dict)  # name -> ScoredSet
    ids: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "suite": self.name,
            "reports": {k: r.to_dict() for k, r in self.reports.items()},
            "values": self.values,
        }


class TruthOracle:
    """Stand-in student that returns the ground-truth mixture of each prompt.

    Lookup is by the exact bytes of ``h``, so it only answers for prompts of
    the dataset it was built from.
    """

    def __init__(self, records, pca=None):
        self._table = {}
        for r in records:
            if r.truth is None:
                raise ValueError(f"record {r.id} carries no ground-truth mixture")
            t = r.truth if pca is None else pca_mod.transform_mixture(pca, r.truth)
            self._table[np.asarray(r.h, dtype=np.float64).tobytes()] = t

    def predict(self, hs) -> list[GaussianMixture]:
        hs = np.asarray(hs, dtype=np.float64)
        return [self._table[h.tobytes()] for h in hs]


def project(records, pca) -> list:
    """Records with samples/default embeddings (and isotropic truths) in PCA space."""
    if pca is None:
        return list(records)
    out = []
    for r in records:
        truth = r.truth
        if truth is not None:
            try:
                truth = pca_mod.transform_mixture(pca, truth)
            except ValueError:
                truth = None
        out.append(
            replace(
                r,
                samples=pca.transform(r.samples),
                default_embedding=pca.transform(r.default_embedding),
                truth=truth,
            )
        )
    return out


def _check_dims(model, records):
    cfg = getattr(model, "config", None)
    if cfg is None or not records:
        return
    r0 = records[0]
    if len(r0.h) != cfg.input_dim:
        raise DimensionError(f"dimension mismatch: model d_h={cfg.input_dim}, data d_h={len(r0.h)}")
    if np.shape(r0.samples)[-1] != cfg.target_dim:
        raise DimensionError(
            f"dimension mismatch: model d_z={cfg.target_dim}, "
            f"embeddings have d={np.shape(r0.samples)[-1]}"
        )


def _predict(model, records) -> list[GaussianMixture]:
    _check_dims(model, records)
    return model.predict(np.stack([r.h for r in records]))


def _labels(records) -> np.ndarray:
    return np.array([int(r.label) for r in records])


def _boot_pair(s: ScoredSet, prefix: str, resamples: int, seed: int, out: dict):
    out[f"{prefix}_auroc"] = bootstrap(s, "auroc", resamples, seed)
    out[f"{prefix}_auprc"] = bootstrap(s, "auprc", resamples, seed)


def run_hallucination_eval(model, pca, dataset, resamples: int = 1000, seed: int = 0,
                           probe=None, shuffle_labels: bool = False) -> SuiteResult:
    """Rank prompts by predicted Renyi-2 entropy against hallucination labels.

    Also scores the teacher-dispersion baseline, the negative log-likelihood of
    the default answer, and optionally a correctness probe on ``h``.
    ``shuffle_labels`` permutes labels with ``seed`` as a no-signal control.
    """
    recs = project(dataset, pca)
    mixtures = _predict(model, recs)
    labels = _labels(recs)
    if shuffle_labels:
        labels = np.random.default_rng(seed).permutation(labels)
    res = SuiteResult("hallucination", ids=[r.id for r in recs])
    ent = np.array([renyi2_entropy(m) for m in mixtures])
    td = np.array([teacher_dispersion(r.samples) for r in recs])
    nll = np.array([-log_density(m, r.default_embedding) for m, r in zip(mixtures, recs)])
    res.scores["ssd_entropy"] = ScoredSet(ent, labels, "entropy")
    res.scores["teacher_dispersion"] = ScoredSet(td, labels, "dispersion")
    res.scores["ssd_nll"] = ScoredSet(nll, labels, "negative-log-likelihood")
    _boot_pair(res.scores["ssd_entropy"], "ssd", resamples, seed, res.reports)
    _boot_pair(res.scores["teacher_dispersion"], "td", resamples, seed, res.reports)
    res.reports["ssd_nll_auroc"] = bootstrap(res.scores["ssd_nll"], "auroc", resamples, seed)
    if probe is not None:
        # probe predicts P(correct); 1 - p ranks hallucinations high
        p_bad = 1.0 - probe.predict_proba(np.stack([r.h for r in recs]))
        res.scores["pcp"] = ScoredSet(p_bad, labels, "probe-probability")
        _boot_pair(res.scores["pcp"], "pcp", resamples, seed, res.reports)
    res.values["n"] = len(recs)
    res.values["positive_rate"] = float(labels.mean())
    return res


def run_ood_eval(model, pca, dataset, resamples: int = 1000, seed: int = 0,
                 same_prompt_control: bool = False) -> SuiteResult:
    """Matched-vs-mismatched answers scored by log q(z | h); matched is the positive class."""
    recs = project(dataset, pca)
    pairs = data_mod.pair_for_ood(recs, seed=seed, same_prompt_control=same_prompt_control)
    mixtures = _predict(model, recs)
    scores = np.array([log_density(mixtures[i], emb) for _, emb, _, i in pairs])
    matched = np.array([int(m) for _, _, m, _ in pairs])
    res = SuiteResult("ood", ids=[f"{recs[i].id}:{'match' if m else 'mismatch'}" for _, _, m, i in pairs])
    res.scores["log_likelihood"] = ScoredSet(scores, matched, "log-likelihood")
    res.reports["ood_auroc"] = bootstrap(res.scores["log_likelihood"], "auroc", resamples, seed)
    res.values["n_pairs"] = len(pairs)
    res.values["same_prompt_control"] = same_prompt_control
    return res


def run_fidelity(model, pca, dataset) -> SuiteResult:
    """Spearman between predicted entropy and teacher dispersion (and truth entropy if known)."""
    recs = project(dataset, pca)
    mixtures = _predict(model, recs)
    ent = np.array([renyi2_entropy(m) for m in mixtures])
    td = np.array([teacher_dispersion(r.samples) for r in recs])
    res = SuiteResult("fidelity", ids=[r.id for r in recs])
    res.values["rho_fidelity"] = spearman(ent, td)
    if all(r.truth is not None for r in recs):
        truth = np.array([renyi2_entropy(r.truth) for r in recs])
        res.values["rho_truth"] = spearman(ent, truth)
    res.values["n"] = len(recs)
    return res


def _msd_row(d_default, d_ssd, resamples, rng):
    n = d_default.size
    row = {"n": int(n)}
    if n == 0:
        return row
    dm, sm = float(d_default.mean()), float(d_ssd.mean())
    boot_d, boot_s = [], []
    for _ in range(resamples):
        idx = rng.integers(0, n, size=n)
        boot_d.append(d_default[idx].mean())
        boot_s.append(d_ssd[idx].mean())
    row.update(
        default_msd=dm,
        ssd_msd=sm,
        default_boot_pct=100.0 * float(np.std(boot_d)) / dm if dm > 0 else 0.0,
        ssd_boot_pct=100.0 * float(np.std(boot_s)) / sm if sm > 0 else 0.0,
        improvement_pct=100.0 * (dm - sm) / dm if dm > 0 else 0.0,
        win_rate=float(np.mean(d_ssd < d_default)),
    )
    return row


def run_consensus_eval(model, pca, dataset, resamples: int = 1000, seed: int = 0) -> SuiteResult:
    """Distance of the default answer and of the mixture mean to the sample centroid.

    Squared Euclidean distances are averaged per subset (all, correct,
    incorrect); bootstrap spread is reported as a percentage of the mean.
    """
    recs = project(dataset, pca)
    mixtures = _predict(model, recs)
    centroid = np.stack([np.mean(r.samples, axis=0) for r in recs])
    default = np.stack([r.default_embedding for r in recs])
    ssd = np.stack([mixture_mean(m) for m in mixtures])
    d_def = np.sum((default - centroid) ** 2, axis=1)
    d_ssd = np.sum((ssd - centroid) ** 2, axis=1)
    labels = _labels(recs)
    rng = np.random.default_rng(seed)
    table = {
        "all": _msd_row(d_def, d_ssd, resamples, rng),
        "correct": _msd_row(d_def[labels == 0], d_ssd[labels == 0], resamples, rng),
        "incorrect": _msd_row(d_def[labels == 1], d_ssd[labels == 1], resamples, rng),
    }
    res = SuiteResult("consensus", ids=[r.id for r in recs])
    res.values["table"] = table
    res.values["per_prompt"] = {"default_sq_dist": d_def.tolist(), "ssd_sq_dist": d_ssd.tolist()}
    return res


def format_report(res: SuiteResult) -> str:
    """Aligned plain-text rendering of a suite result."""
    lines = [f"== {res.name} =="]
    if res.reports:
        w = max(len(k) for k in res.reports)
        lines.append(f"{'metric':<{w}}  {'point':>8}  {'boot mean':>9}  {'boot std':>8}  skipped")
        for k, r in res.reports.items():
            lines.append(
                f"{k:<{w}}  {r.point:8.4f}  {r.boot_mean:9.4f}  {r.boot_std:8.4f}  {r.skipped}"
            )
    table = res.values.get("table")
    if table:
        lines.append(
            f"{'subset':<10} {'n':>6} {'default MSD':>12} {'(std %)':>8} {'SSD MSD':>10} "
            f"{'(std %)':>8} {'imp %':>7} {'win %':>6}"
        )
        for name, row in table.items():
            if row["n"] == 0:
                lines.append(f"{name:<10} {0:>6}")
                continue
            lines.append(
                f"{name:<10} {row['n']:>6} {row['default_msd']:12.5f} {row['default_boot_pct']:8.1f} "
                f"{row['ssd_msd']:10.5f} {row['ssd_boot_pct']:8.1f} {row['improvement_pct']:7.1f} "
                f"{100 * row['win_rate']:6.1f}"
            )
    for k, v in res.values.items():
        if k in ("table", "per_prompt"):
            continue
        lines.append(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
    return "\n".join(lines)


SWEEP_FIELDS = (
    "d_pca", "components", "hidden_width", "depth", "seed",
    "best_epoch", "val_nll", "auroc", "auprc", "td_auroc", "rho_fidelity", "rho_truth",
)


def run_sweep(train_records, test_records, d_pca=(16,), components=(1, 2, 5, 10),
              hidden_width=(128,), depth=(2,), train_cfg=mdn.TrainConfig(), seed: int = 0):
    """Grid over PCA dimension and student capacity.

    One row per configuration with test AUROC/AUPRC of predicted entropy, the
    TD baseline AUROC at the same PCA dimension, and fidelity. Point
    estimates only.
    """
    rows = []
    flat = np.concatenate([np.asarray(r.samples) for r in train_records])
    d_h = len(train_records[0].h)
    for dp in d_pca:
        t = pca_mod.fit(flat, dp)
        tr = project(train_records, t)
        te = project(test_records, t)
        labels = _labels(te)
        td = np.array([teacher_dispersion(r.samples) for r in te])
        td_auc = auroc(ScoredSet(td, labels, "dispersion"))
        truth = None
        if all(r.truth is not None for r in te):
            truth = np.array([renyi2_entropy(r.truth) for r in te])
        for k, hw, dd in itertools.product(components, hidden_width, depth):
            cfg = mdn.MdnConfig(d_h, dp, k, hw, dd, seed=seed)
            log.info("sweep: d_pca=%d K=%d H=%d D=%d", dp, k, hw, dd)
            model, tlog = mdn.train(tr, cfg, train_cfg)
            ent = mdn.predicted_entropy(model, np.stack([r.h for r in te]))
            s = ScoredSet(ent, labels)
            rows.append({
                "d_pca": dp, "components": k, "hidden_width": hw, "depth": dd, "seed": seed,
                "best_epoch": tlog.best_epoch, "val_nll": tlog.best_val_nll,
                "auroc": auroc(s),
                "auprc": auprc(s),
                "td_auroc": td_auc,
                "rho_fidelity": spearman(ent, td),
                "rho_truth": spearman(ent, truth) if truth is not None else None,
            })
    return rows

"""Prompt records, the NDJSON dataset format, and a synthetic teacher.

A dataset file is one JSON header line followed by one JSON object per
prompt::

    {"format": "semdistill-dataset", "version": 1, "d_h": 32, "d_raw": 16,
     "S": 32, "count": 1000, "split": "test", "provenance": "..."}
    {"id": "p000000", "h": [...], "samples": [[...], ...],
     "default_embedding": [...], "label": 1, "truth": {...}}

Floats are written with 17 significant digits so every value survives the
round trip bit for bit. ``truth`` (weights, means, scales of the generating
mixture) is present only for synthetic data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import DimensionError, FormatError
from .gmm import GaussianMixture, renyi2_entropy, sample

DATASET_FORMAT = "semdistill-dataset"
DATASET_VERSION = 1


@dataclass
class PromptRecord:
    id: str
    h: np.ndarray
    samples: np.ndarray  # (S, d)
    default_embedding: np.ndarray
    label: int  # 1 = incorrect / hallucinated
    truth: Optional[GaussianMixture] = None


@dataclass
class DatasetHeader:
    d_h: int
    d_raw: int
    S: int
    count: int
    split: str = "train"
    provenance: str = ""
    version: int = DATASET_VERSION

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": DATASET_FORMAT,
                "version": self.version,
                "d_h": self.d_h,
                "d_raw": self.d_raw,
                "S": self.S,
                "count": self.count,
                "split": self.split,
                "provenance": self.provenance,
            },
            sort_keys=True,
        )


def _fmt(v) -> str:
    x = float(v)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} cannot be serialized")
    return format(x, ".17g")


def _vec(a) -> str:
    return "[" + ",".join(_fmt(v) for v in np.asarray(a, dtype=np.float64).ravel()) + "]"


def _mat(a) -> str:
    a = np.asarray(a, dtype=np.float64)
    return "[" + ",".join(_vec(row) for row in a) + "]"


def _record_line(r: PromptRecord) -> str:
    parts = [
        f'"id":{json.dumps(str(r.id))}',
        f'"h":{_vec(r.h)}',
        f'"samples":{_mat(r.samples)}',
        f'"default_embedding":{_vec(r.default_embedding)}',
        f'"label":{int(r.label)}',
    ]
    if r.truth is not None:
        t = r.truth
        parts.append(
            f'"truth":{{"weights":{_vec(t.weights)},"means":{_mat(t.means)},'
            f'"scales":{_mat(t.scales)}}}'
        )
    return "{" + ",".join(parts) + "}"


def write_dataset(header: DatasetHeader, records, path) -> None:
    """Write header + records. Output bytes depend only on the inputs.

    The file is staged next to ``path`` and only moved into place once the
    number of records matches ``header.count``.
    """
    records = list(records)
    if len(records) != header.count:
        raise ValueError(
            f"header declares {header.count} records but {len(records)} were supplied"
        )
    lines = [header.to_json()]
    for i, r in enumerate(records):
        _validate(r, header, i)
        lines.append(_record_line(r))
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def _validate(r: PromptRecord, header: DatasetHeader, i: int) -> None:
    if np.shape(r.h) != (header.d_h,):
        raise DimensionError(f"record {i}: field 'h' has shape {np.shape(r.h)}, expected ({header.d_h},)")
    if np.shape(r.samples) != (header.S, header.d_raw):
        raise DimensionError(
            f"record {i}: field 'samples' has shape {np.shape(r.samples)}, "
            f"expected ({header.S}, {header.d_raw})"
        )
    if np.shape(r.default_embedding) != (header.d_raw,):
        raise DimensionError(
            f"record {i}: field 'default_embedding' has shape {np.shape(r.default_embedding)}, "
            f"expected ({header.d_raw},)"
        )
    if int(r.label) not in (0, 1):
        raise ValueError(f"record {i}: field 'label' must be 0 or 1")
    if r.truth is not None and r.truth.dim != header.d_raw:
        raise DimensionError(f"record {i}: field 'truth' has dimension {r.truth.dim}")


def _parse_header(line: str, path) -> DatasetHeader:
    try:
        obj = json.loads(line)
    except ValueError as exc:
        raise FormatError(f"{path}: header line is not valid JSON") from exc
    if not isinstance(obj, dict) or obj.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a dataset file")
    if obj.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {obj.get('version')!r}")
    try:
        return DatasetHeader(
            d_h=int(obj["d_h"]), d_raw=int(obj["d_raw"]), S=int(obj["S"]),
            count=int(obj["count"]), split=str(obj.get("split", "")),
            provenance=str(obj.get("provenance", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc


def _parse_record(line: str, i: int, header: DatasetHeader) -> PromptRecord:
    try:
        obj = json.loads(line)
        truth = None
        if obj.get("truth") is not None:
            t = obj["truth"]
            truth = GaussianMixture(t["weights"], t["means"], t["scales"])
        r = PromptRecord(
            id=str(obj["id"]),
            h=np.asarray(obj["h"], dtype=np.float64),
            samples=np.asarray(obj["samples"], dtype=np.float64),
            default_embedding=np.asarray(obj["default_embedding"], dtype=np.float64),
            label=int(obj["label"]),
            truth=truth,
        )
    except DimensionError:
        raise
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise FormatError(f"record {i}: malformed record ({exc})") from exc
    _validate(r, header, i)
    return r


def iter_dataset(path) -> tuple[DatasetHeader, Iterator[PromptRecord]]:
    """Streaming reader: the header is parsed eagerly, records lazily.

    The iterator raises FormatError on the first bad line, or at the end if
    the number of records differs from the header.
    """
    fh = open(path, "r")
    first = fh.readline()
    if not first:
        fh.close()
        raise FormatError(f"{path}: empty file")
    try:
        header = _parse_header(first, path)
    except Exception:
        fh.close()
        raise

    def records():
        n = 0
        with fh:
            for line in fh:
                if not line.strip():
                    continue
                if n >= header.count:
                    raise FormatError(f"{path}: more records than the header count {header.count}")
                yield _parse_record(line, n, header)
                n += 1
        if n != header.count:
            raise FormatError(f"{path}: header declares {header.count} records, found {n}")

    return header, records()


def read_dataset(path) -> tuple[DatasetHeader, list[PromptRecord]]:
    header, it = iter_dataset(path)
    return header, list(it)


def header_for(records, split="train", provenance="") -> DatasetHeader:
    r0 = records[0]
    return DatasetHeader(
        d_h=len(r0.h), d_raw=np.shape(r0.samples)[1], S=np.shape(r0.samples)[0],
        count=len(records), split=split, provenance=provenance,
    )


# ---------------------------------------------------------------------------
# synthetic teacher
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTeacherConfig:
    """Knobs for the stand-in teacher.

    Each prompt has a latent vector u ~ N(0, I_{d_h}). A fixed random map
    (drawn from ``seed``) turns u into an uncertainty level t(u) in (0, 1),
    a semantic center, a number of active components and their weights.
    Component means sit at center + separation * t(u) * offset_k, where the
    offsets are fixed unit-norm directions. Components are isotropic with
    scale component_scale * exp(scale_spread * (2 t(u) - 1)), so uncertain
    prompts also have wider clusters. The observed representation is
    h = u + noise_scale * eps.
    """

    n_prompts: int = 5000
    d_h: int = 32
    d_z: int = 16
    n_samples: int = 32
    min_components: int = 2
    max_components: int = 5
    separation: float = 2.0
    component_scale: float = 0.3
    scale_spread: float = 0.4
    center_scale: float = 1.0
    noise_scale: float = 0.1
    label_midpoint: Optional[float] = None  # None: median truth entropy
    label_slope: float = 4.0  # per standard deviation of truth entropy
    seed: int = 0

    def __post_init__(self):
        if self.n_prompts < 1 or self.d_h < 1 or self.d_z < 1 or self.n_samples < 1:
            raise ValueError("counts and dimensions must be >= 1")
        if not 1 <= self.min_components <= self.max_components <= 10:
            raise ValueError("component range must satisfy 1 <= min <= max <= 10")
        if self.separation < 0 or self.scale_spread < 0:
            raise ValueError("separation and scale_spread must be non-negative")
        for name in ("component_scale", "noise_scale", "center_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class _TeacherMap:
    w_t: np.ndarray  # (d_h,)  uncertainty direction
    w_c: np.ndarray  # (d_h, d_z) center map
    offsets: np.ndarray  # (Kmax, d_z), unit rows
    w_pi: np.ndarray  # (d_h, Kmax) weight logits


def _teacher_map(cfg: SyntheticTeacherConfig, rng) -> _TeacherMap:
    k, dh, dz = cfg.max_components, cfg.d_h, cfg.d_z
    w_t = rng.standard_normal(dh)
    w_t /= np.linalg.norm(w_t)
    offsets = rng.standard_normal((k, dz))
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    return _TeacherMap(
        w_t=w_t,
        w_c=rng.standard_normal((dh, dz)) / math.sqrt(dh),
        offsets=offsets,
        w_pi=rng.standard_normal((dh, k)) / math.sqrt(dh),
    )


def truth_mixture(cfg: SyntheticTeacherConfig, tm: _TeacherMap, u: np.ndarray) -> GaussianMixture:
    """Ground-truth mixture for latent u; smooth in u apart from the component count."""
    t = 1.0 / (1.0 + math.exp(-1.5 * float(u @ tm.w_t)))
    span = cfg.max_components - cfg.min_components
    k = cfg.min_components + min(span, int(t * (span + 1)))
    center = cfg.center_scale * (u @ tm.w_c)
    means = center + cfg.separation * t * tm.offsets[:k]
    logits = (u @ tm.w_pi)[:k]
    w = np.exp(logits - logits.max())
    scales = np.full((k, cfg.d_z), cfg.component_scale * math.exp(cfg.scale_spread * (2 * t - 1)))
    return GaussianMixture(w / w.sum(), means, scales)


def generate_synthetic(cfg: SyntheticTeacherConfig, split: str = "all") -> list[PromptRecord]:
    """Draw ``cfg.n_prompts`` records from the synthetic teacher.

    Labels follow P(label=1) = sigmoid(slope * (H2 - midpoint) / sd(H2)) where
    H2 is the ground-truth Renyi-2 entropy.
    """
    rng = np.random.default_rng(cfg.seed)
    tm = _teacher_map(cfg, rng)
    us = rng.standard_normal((cfg.n_prompts, cfg.d_h))
    hs = us + cfg.noise_scale * rng.standard_normal(us.shape)
    truths = [truth_mixture(cfg, tm, u) for u in us]
    ent = np.array([renyi2_entropy(m) for m in truths])
    mid = float(np.median(ent)) if cfg.label_midpoint is None else cfg.label_midpoint
    spread = float(ent.std())
    z = (ent - mid) / spread if spread > 1e-12 else ent - mid
    p_bad = 1.0 / (1.0 + np.exp(-cfg.label_slope * z))
    labels = (rng.random(cfg.n_prompts) < p_bad).astype(int)
    width = len(str(cfg.n_prompts - 1))
    records = []
    for i, m in enumerate(truths):
        draws = sample(m, rng, cfg.n_samples + 1)
        records.append(
            PromptRecord(
                id=f"{split}-{i:0{width}d}",
                h=hs[i],
                samples=draws[:-1],
                default_embedding=draws[-1],
                label=int(labels[i]),
                truth=m,
            )
        )
    return records


def split_records(records, n_test: int):
    """First ``len - n_test`` records for training, the rest for testing."""
    if not 0 <= n_test < len(records):
        raise ValueError("n_test must lie in [0, len(records))")
    cut = len(records) - n_test
    return records[:cut], records[cut:]


def pair_for_ood(dataset, seed: int = 0, same_prompt_control: bool = False):
    """Matched and mismatched (h, embedding) pairs for context verification.

    Every prompt contributes its own default embedding (matched, flag True)
    and the default embedding of another prompt picked by a seeded
    derangement (flag False). With ``same_prompt_control`` the "mismatched"
    entry is instead one of the prompt's own teacher samples, which makes the
    two classes indistinguishable by construction.

    Returns a list of ``(h, embedding, matched, prompt_index)`` tuples.
    """
    n = len(dataset)
    if n < 2:
        raise ValueError("pairing needs at least two prompts")
    rng = np.random.default_rng(seed)
    perm = derangement(n, rng)
    out = []
    for i, r in enumerate(dataset):
        out.append((r.h, r.default_embedding, True, i))
        if same_prompt_control:
            s = np.asarray(r.samples)
            other = s[rng.integers(s.shape[0])]
        else:
            other = dataset[perm[i]].default_embedding
        out.append((r.h, other, False, i))
    return out


def derangement(n: int, rng) -> np.ndarray:
    """Uniform random permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise ValueError("no derangement exists for n < 2")
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p

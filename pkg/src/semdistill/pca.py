"""Target-space reduction for answer embeddings.

The basis is fitted once on the flattened pool of teacher samples and then
shared by every embedding of a run (teacher samples, default answers, and
candidate answers alike). No whitening: component scales carry semantic
spread and are left alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .gmm import GaussianMixture

PCA_FORMAT = "semdistill-pca"
PCA_VERSION = 1


@dataclass(frozen=True)
class PcaTransform:
    mean: np.ndarray  # (d_raw,)
    basis: np.ndarray  # (d_pca, d_raw), orthonormal rows
    explained_variance: np.ndarray  # (d_pca,), descending

    def __post_init__(self):
        for name in ("mean", "basis", "explained_variance"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.basis.ndim != 2 or self.basis.shape[1] != self.mean.shape[0]:
            raise ValueError("basis rows must match the mean dimension")
        if self.basis.shape[0] > self.basis.shape[1]:
            raise ValueError("d_pca cannot exceed d_raw")
        if self.explained_variance.shape != (self.basis.shape[0],):
            raise ValueError("one explained variance per basis row")

    @property
    def d_raw(self) -> int:
        return self.mean.shape[0]

    @property
    def d_pca(self) -> int:
        return self.basis.shape[0]

    @property
    def id(self) -> str:
        h = hashlib.sha256()
        for arr in (self.mean, self.basis, self.explained_variance):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def transform(self, z):
        return transform(self, z)

    def inverse_transform(self, y):
        return inverse_transform(self, y)


def fit(embeddings, d_pca: int) -> PcaTransform:
    """Fit a PCA basis by eigendecomposition of the sample covariance.

    Each basis vector is signed so that its largest-magnitude coordinate is
    positive, which makes refits on identical data byte-identical.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be a 2-D array (n, d_raw)")
    n, d_raw = x.shape
    if d_pca < 1 or d_pca > d_raw:
        raise ValueError(f"d_pca must lie in [1, {d_raw}], got {d_pca}")
    if n < d_pca or n < 2:
        raise ValueError(f"need at least max(2, d_pca)={max(2, d_pca)} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d_pca]
    basis = evecs[:, order].T.copy()
    pivot = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(d_pca), pivot])
    signs[signs == 0] = 1.0
    basis *= signs[:, None]
    var = np.clip(evals[order], 0.0, None)
    return PcaTransform(mean=mean, basis=basis, explained_variance=var)


def transform(t: PcaTransform, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != t.d_raw:
        raise DimensionError(f"dimension mismatch: expected d_raw={t.d_raw}, got {z.shape[-1]}")
    return (z - t.mean) @ t.basis.T


def inverse_transform(t: PcaTransform, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != t.d_pca:
        raise DimensionError(f"dimension mismatch: expected d_pca={t.d_pca}, got {y.shape[-1]}")
    return t.mean + y @ t.basis


def transform_mixture(t: PcaTransform, mixture: GaussianMixture) -> GaussianMixture:
    """Push a mixture with isotropic components through the projection.

    An orthonormal projection of an isotropic Gaussian is isotropic with the
    same scale, so the image is again a diagonal mixture. Anisotropic
    components would pick up off-diagonal covariance and are rejected.
    """
    sd = mixture.scales
    if not np.allclose(sd, sd[:, :1], rtol=1e-12, atol=0.0):
        raise ValueError("only mixtures with isotropic components can be projected exactly")
    means = transform(t, mixture.means)
    scales = np.repeat(sd[:, :1], t.d_pca, axis=1)
    return GaussianMixture(mixture.weights, means, scales, mixture.scale_floor)


def save(t: PcaTransform, path) -> None:
    """Write a JSON header line followed by little-endian float64 blocks."""
    header = {
        "format": PCA_FORMAT,
        "version": PCA_VERSION,
        "d_raw": t.d_raw,
        "d_pca": t.d_pca,
        "id": t.id,
        "dtype": "<f8",
    }
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (t.mean, t.basis, t.explained_variance)
    )
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load(path) -> PcaTransform:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable PCA header") from exc
    if not isinstance(header, dict) or header.get("format") != PCA_FORMAT:
        raise FormatError(f"{path}: not a PCA transform file")
    if header.get("version") != PCA_VERSION:
        raise FormatError(f"{path}: unsupported PCA format version {header.get('version')!r}")
    d_raw, d_pca = int(header["d_raw"]), int(header["d_pca"])
    dtype = np.dtype(header.get("dtype", "<f8"))
    counts = (d_raw, d_pca * d_raw, d_pca)
    body = raw[nl + 1:]
    if len(body) != sum(counts) * dtype.itemsize:
        raise FormatError(f"{path}: payload length does not match header")
    flat = np.frombuffer(body, dtype=dtype).astype(np.float64)
    mean, basis, var = np.split(flat, np.cumsum(counts)[:-1])
    t = PcaTransform(mean, basis.reshape(d_pca, d_raw), var)
    if t.id != header["id"]:
        raise FormatError(f"{path}: content hash mismatch")
    return t

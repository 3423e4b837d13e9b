"""Mixture density network student.

A ReLU MLP maps a prompt representation h to the parameters of a
diagonal Gaussian mixture over (PCA-reduced) answer embeddings:

    logits  alpha(h) in R^K          -> weights = softmax(alpha)
    means   mu(h)    in R^{K x d}
    scales  log sigma(h) in R^{K x d}, clamped below at log(scale_floor)
            (and above at a huge ceiling so exp never overflows)

Training maximizes the per-prompt mean log-likelihood of the teacher samples.
Gradients are computed by hand so the whole thing runs on numpy alone; the
test-suite checks them against central finite differences.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, FormatError, TrainingError
from .gmm import LOG_2PI, SCALE_FLOOR, GaussianMixture, renyi2_entropy

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "semdistill-mdn"
CHECKPOINT_VERSION = 1
# exp(2 * 300) is still finite, so squared scales never overflow
LOG_SCALE_CEIL = 300.0


@dataclass(frozen=True)
class MdnConfig:
    input_dim: int
    target_dim: int
    components: int = 5
    hidden_width: int = 128
    depth: int = 2
    scale_floor: float = SCALE_FLOOR
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "target_dim", "components", "hidden_width", "depth"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.scale_floor > 0:
            raise ValueError("scale_floor must be positive")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for backbone layers, then logits/means/log-scales heads."""
        h, k, d = self.hidden_width, self.components, self.target_dim
        shapes = [(self.input_dim, h)] + [(h, h)] * (self.depth - 1)
        return shapes + [(h, k), (h, k * d), (h, k * d)]

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    validation_fraction: float = 0.1
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        for name in ("learning_rate", "clip_norm", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("moment coefficients must lie in [0, 1)")


@dataclass
class MdnModel:
    config: MdnConfig
    params: np.ndarray
    input_shift: np.ndarray = None
    input_scale: np.ndarray = None

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.config.n_params,):
            raise ValueError(
                f"expected {self.config.n_params} parameters, got {self.params.shape}"
            )
        d_h = self.config.input_dim
        if self.input_shift is None:
            self.input_shift = np.zeros(d_h)
        if self.input_scale is None:
            self.input_scale = np.ones(d_h)
        self.input_shift = np.asarray(self.input_shift, dtype=np.float64)
        self.input_scale = np.asarray(self.input_scale, dtype=np.float64)

    def layers(self, params=None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (W, b) into the flat parameter vector."""
        p = self.params if params is None else params
        out, pos = [], 0
        for i, o in self.config.layer_shapes():
            w = p[pos:pos + i * o].reshape(i, o)
            pos += i * o
            out.append((w, p[pos:pos + o]))
            pos += o
        return out

    def with_params(self, params) -> "MdnModel":
        return replace(self, params=np.array(params, dtype=np.float64))

    def forward(self, h) -> GaussianMixture:
        return forward(self, h)

    def predict(self, hs) -> list[GaussianMixture]:
        return predict(self, hs)


def _check_inputs(model: MdnModel, hs: np.ndarray) -> np.ndarray:
    hs = np.asarray(hs, dtype=np.float64)
    if hs.ndim != 2 or hs.shape[1] != model.config.input_dim:
        raise DimensionError(
            f"dimension mismatch: model expects d_h={model.config.input_dim}, got {hs.shape}"
        )
    return hs


def _heads(model: MdnModel, hs, params=None):
    """Run the network; returns (log_weights, means, log_scales, raw_log_scales, cache)."""
    cfg = model.config
    layers = model.layers(params)
    x = (hs - model.input_shift) / model.input_scale
    acts, pres = [x], []
    for w, b in layers[: cfg.depth]:
        a = acts[-1] @ w + b
        pres.append(a)
        acts.append(np.maximum(a, 0.0))
    hid = acts[-1]
    (wa, ba), (wm, bm), (ws, bs) = layers[cfg.depth:]
    n, k, d = hs.shape[0], cfg.components, cfg.target_dim
    alpha = hid @ wa + ba
    mu = (hid @ wm + bm).reshape(n, k, d)
    raw_ls = (hid @ ws + bs).reshape(n, k, d)
    ls = np.clip(raw_ls, math.log(cfg.scale_floor), LOG_SCALE_CEIL)
    log_pi = alpha - logsumexp(alpha, axis=1, keepdims=True)
    return log_pi, mu, ls, raw_ls, (acts, pres)


def _mixture(log_pi, mu, ls, floor) -> GaussianMixture:
    w = np.exp(log_pi)
    return GaussianMixture(w / w.sum(), mu, np.exp(ls), floor)


def forward(model: MdnModel, h) -> GaussianMixture:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1:
        raise DimensionError(f"forward takes a single vector, got shape {h.shape}")
    log_pi, mu, ls, _, _ = _heads(model, _check_inputs(model, h[None, :]))
    return _mixture(log_pi[0], mu[0], ls[0], model.config.scale_floor)


def predict(model: MdnModel, hs) -> list[GaussianMixture]:
    log_pi, mu, ls, _, _ = _heads(model, _check_inputs(model, hs))
    floor = model.config.scale_floor
    return [_mixture(log_pi[i], mu[i], ls[i], floor) for i in range(len(log_pi))]


def predicted_entropy(model: MdnModel, hs) -> np.ndarray:
    return np.array([renyi2_entropy(m) for m in predict(model, hs)])


def _stack_targets(target_lists, d_z: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad ragged target lists into (B, S_max, d) plus a 0/1 mask."""
    arrs = []
    for i, t in enumerate(target_lists):
        a = np.asarray(t, dtype=np.float64)
        if a.size == 0:
            raise ValueError(f"record {i} has an empty target list")
        if a.shape[-1] != d_z:
            raise DimensionError(
                f"dimension mismatch: model expects d_z={d_z}, got targets of shape {a.shape}"
            )
        arrs.append(a.reshape(-1, d_z))
    s_max = max(a.shape[0] for a in arrs)
    z = np.zeros((len(arrs), s_max, d_z))
    mask = np.zeros((len(arrs), s_max))
    for i, a in enumerate(arrs):
        z[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = 1.0
    return z, mask


def _loss_and_grad(model: MdnModel, hs, z, mask, params=None, need_grad=True):
    """Mean over prompts of -(1/S_b) sum_s log q(z_bs | h_b), and its gradient."""
    cfg = model.config
    p = model.params if params is None else params
    log_pi, mu, ls, raw_ls, (acts, pres) = _heads(model, hs, p)
    inv_sd = np.exp(-ls)
    u = (z[:, :, None, :] - mu[:, None, :, :]) * inv_sd[:, None, :, :]  # (B,S,K,d)
    log_n = -0.5 * np.einsum("bskd,bskd->bsk", u, u) - ls.sum(-1)[:, None, :]
    log_n -= 0.5 * cfg.target_dim * LOG_2PI
    lc = log_pi[:, None, :] + log_n
    lse = logsumexp(lc, axis=2)  # (B,S)
    wts = mask / (mask.sum(axis=1, keepdims=True) * hs.shape[0])
    loss = -float(np.sum(wts * lse))
    if not need_grad:
        return loss, None

    g = -wts[:, :, None] * np.exp(lc - lse[:, :, None])  # dL/dlc, (B,S,K)
    g_k = g.sum(axis=1)
    d_alpha = g_k - np.exp(log_pi) * g_k.sum(axis=1, keepdims=True)
    d_mu = np.einsum("bsk,bskd->bkd", g, u) * inv_sd
    d_ls = np.einsum("bsk,bskd->bkd", g, u * u) - g_k[:, :, None]
    d_ls = d_ls * ((raw_ls > math.log(cfg.scale_floor)) & (raw_ls < LOG_SCALE_CEIL))

    n = hs.shape[0]
    layers = model.layers(p)
    grads = [None] * len(layers)
    hid = acts[-1]
    head_grads = (d_alpha, d_mu.reshape(n, -1), d_ls.reshape(n, -1))
    d_hid = np.zeros_like(hid)
    for j, dout in enumerate(head_grads):
        w, _ = layers[cfg.depth + j]
        grads[cfg.depth + j] = (hid.T @ dout, dout.sum(axis=0))
        d_hid += dout @ w.T
    for i in range(cfg.depth - 1, -1, -1):
        da = d_hid * (pres[i] > 0)
        w, _ = layers[i]
        grads[i] = (acts[i].T @ da, da.sum(axis=0))
        d_hid = da @ w.T
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return loss, flat


def nll_loss(model: MdnModel, h, targets) -> float:
    """-(1/S) sum_s log q(z_s | h) for one prompt."""
    hs = _check_inputs(model, np.asarray(h, dtype=np.float64).reshape(1, -1))
    z, mask = _stack_targets([targets], model.config.target_dim)
    return _loss_and_grad(model, hs, z, mask, need_grad=False)[0]


def nll_gradient(model: MdnModel, batch) -> np.ndarray:
    """Exact gradient of the batch-mean NLL w.r.t. the flat parameter vector.

    ``batch`` is a sequence of (h, targets) pairs.
    """
    if len(batch) == 0:
        raise ValueError("batch is empty")
    hs = _check_inputs(model, np.stack([np.asarray(h, dtype=np.float64) for h, _ in batch]))
    z, mask = _stack_targets([t for _, t in batch], model.config.target_dim)
    return _loss_and_grad(model, hs, z, mask)[1]


def _f32(a) -> np.ndarray:
    # checkpoints store float32; keep in-memory parameters on that grid
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def init_model(cfg: MdnConfig, inputs=None, targets=None) -> MdnModel:
    """Fresh model whose initial mixture sits at the marginal target distribution.

    ``inputs`` (n, d_h) sets the input standardization; ``targets`` (m, d_z)
    sets the mean-head bias to the global target mean and the log-scale bias
    to log of the per-dimension standard deviation. Both are optional.
    """
    rng = np.random.default_rng(cfg.seed)
    k, d = cfg.components, cfg.target_dim
    if targets is not None:
        t = np.asarray(targets, dtype=np.float64).reshape(-1, d)
        t_mean = t.mean(axis=0)
        t_std = t.std(axis=0) if t.shape[0] > 1 else np.ones(d)
        t_std = np.where(t_std > cfg.scale_floor, t_std, 1.0)
    else:
        t_mean, t_std = np.zeros(d), np.ones(d)
    if inputs is not None:
        x = np.asarray(inputs, dtype=np.float64).reshape(-1, cfg.input_dim)
        shift = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    else:
        shift, scale = np.zeros(cfg.input_dim), np.ones(cfg.input_dim)

    chunks = []
    shapes = cfg.layer_shapes()
    for li, (i, o) in enumerate(shapes):
        if li < cfg.depth:
            lim = math.sqrt(6.0 / i)
            w = rng.uniform(-lim, lim, size=(i, o))
            b = np.zeros(o)
        else:
            head = li - cfg.depth
            lim = 1.0 / math.sqrt(i)
            w = rng.uniform(-lim, lim, size=(i, o))
            if head == 0:
                w *= 0.1
                b = np.zeros(k)
            elif head == 1:
                w *= np.tile(t_std, k)[None, :]
                b = np.tile(t_mean, k)
            else:
                w *= 0.1
                b = np.tile(np.log(t_std), k)
        chunks += [w.ravel(), b]
    return MdnModel(cfg, _f32(np.concatenate(chunks)), _f32(shift), _f32(scale))


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_nll, val_nll
    best_epoch: int = -1
    best_val_nll: float = math.inf
    stopped_early: bool = False
    train_config: dict = field(default_factory=dict)
    mdn_config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class _Adam:
    def __init__(self, n, cfg: TrainConfig):
        self.cfg = cfg
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        m_hat = self.m / (1 - c.beta1**self.t)
        v_hat = self.v / (1 - c.beta2**self.t)
        return params - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)


def _clip(grad, max_norm):
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


def _dataset_arrays(dataset, d_h, d_z):
    hs = np.stack([np.asarray(r.h, dtype=np.float64) for r in dataset])
    if hs.shape[1] != d_h:
        raise DimensionError(f"dimension mismatch: config d_h={d_h}, records have {hs.shape[1]}")
    z, mask = _stack_targets([r.samples for r in dataset], d_z)
    return hs, z, mask


def mean_nll(model: MdnModel, hs, z, mask, chunk: int = 256) -> float:
    total = 0.0
    for a in range(0, hs.shape[0], chunk):
        sl = slice(a, a + chunk)
        total += _loss_and_grad(model, hs[sl], z[sl], mask[sl], need_grad=False)[0] * len(hs[sl])
    return total / hs.shape[0]


def train(dataset, mdn_cfg: MdnConfig, train_cfg: TrainConfig = TrainConfig()):
    """Fit a student by conditional maximum likelihood with Adam.

    ``dataset`` is a sequence of records with ``h`` and ``samples`` attributes
    (samples already in the target space the model should predict). The
    last ``validation_fraction`` of a seeded shuffle is held out; the returned
    model is the snapshot with the lowest validation NLL.

    Returns ``(model, TrainingLog)``.
    """
    n = len(dataset)
    if n < train_cfg.batch_size:
        raise ValueError(f"dataset has {n} records, fewer than batch_size={train_cfg.batch_size}")
    hs, z, mask = _dataset_arrays(dataset, mdn_cfg.input_dim, mdn_cfg.target_dim)

    rng = np.random.default_rng(train_cfg.seed)
    perm = rng.permutation(n)
    n_val = min(n - 1, max(1, int(round(train_cfg.validation_fraction * n))))
    tr_idx, va_idx = perm[: n - n_val], perm[n - n_val:]

    model = init_model(mdn_cfg, hs[tr_idx], z[tr_idx][mask[tr_idx] > 0])
    params = model.params.copy()
    opt = _Adam(params.size, train_cfg)
    record = TrainingLog(train_config=asdict(train_cfg), mdn_config=asdict(mdn_cfg))

    best = params.copy()
    best_val = mean_nll(model, hs[va_idx], z[va_idx], mask[va_idx])
    record.best_val_nll = best_val
    record.epochs.append({"epoch": 0, "train_nll": None, "val_nll": best_val})
    record.best_epoch = 0
    wait = 0
    bs = train_cfg.batch_size
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(tr_idx)
        running, seen = 0.0, 0
        for bi, a in enumerate(range(0, order.size, bs)):
            idx = order[a:a + bs]
            loss, grad = _loss_and_grad(model, hs[idx], z[idx], mask[idx], params)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch index {bi} (loss={loss!r})"
                )
            params = opt.step(params, _clip(grad, train_cfg.clip_norm))
            running += loss * idx.size
            seen += idx.size
        current = model.with_params(params)
        val = mean_nll(current, hs[va_idx], z[va_idx], mask[va_idx])
        record.epochs.append({"epoch": epoch, "train_nll": running / seen, "val_nll": val})
        log.debug("epoch %d train %.4f val %.4f", epoch, running / seen, val)
        if val < best_val:
            best_val, best, wait = val, params.copy(), 0
            record.best_epoch, record.best_val_nll = epoch, val
        else:
            wait += 1
            if wait >= train_cfg.patience:
                record.stopped_early = True
                break
    return model.with_params(_f32(best)), record


def save_model(model: MdnModel, path, pca_id=None, metrics=None) -> None:
    """JSON header line, then a little-endian float32 block.

    The block holds the parameter vector followed by the input shift and
    scale; its byte length is declared in the header.
    """
    cfg = model.config
    block = np.concatenate([model.params, model.input_shift, model.input_scale])
    payload = block.astype("<f4").tobytes()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "pca_id": pca_id,
        "metrics": metrics or {},
        "dtype": "<f4",
        "n_params": cfg.n_params,
        "payload_bytes": len(payload),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_model(path) -> tuple[MdnModel, dict]:
    """Returns ``(model, header)``; raises FormatError on any layout problem."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl].decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a student checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    try:
        cfg = MdnConfig(**header["config"])
        dtype = np.dtype(header["dtype"])
        n_bytes = int(header["payload_bytes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header ({exc})") from exc
    body = raw[nl + 1:]
    expected = (cfg.n_params + 2 * cfg.input_dim) * dtype.itemsize
    if len(body) != n_bytes or n_bytes != expected:
        raise FormatError(
            f"{path}: truncated or oversized payload ({len(body)} bytes, header says {n_bytes})"
        )
    flat = np.frombuffer(body, dtype=dtype).astype(np.float64)
    p, d_h = cfg.n_params, cfg.input_dim
    model = MdnModel(cfg, flat[:p], flat[p:p + d_h], flat[p + d_h:])
    return model, header

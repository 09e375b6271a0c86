"""Concept-conditioned variational autoencoder over KPI windows.

Encoder and decoder are stacks of three LSTM layers with a linear head each.
The encoder emits a per-timestep Gaussian (mu, logvar) over 30 latent
dimensions; the first five carry per-KPI conceptual priors whose means come
from the cluster centroids, the remaining 25 use a standard normal prior.
Training minimizes KL + recon_weight * (-log-likelihood); reported losses are
always the unweighted kl - loglik.

All math is float64 with hand-written reverse-mode gradients, which keeps the
whole pipeline bit-reproducible and lets tests check gradients against central
finite differences.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .concepts import ConceptModel
from .data import SequenceWindow
from .errors import (
    ConfigError,
    MissingArtifactError,
    NonFiniteError,
    ParseError,
    TrainingDivergedError,
    ValidationError,
)
from .nn import (
    Adam,
    linear_backward,
    linear_forward,
    linear_init,
    lstm_backward,
    lstm_forward,
    lstm_init,
    sigmoid,
)

LOG_2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_MAGIC = b"KPIVAE\x00\x01"
CHECKPOINT_FORMAT = "kpivae-ckpt-v1"


@dataclass
class LatentConfig:
    concept_dims: int = 5
    free_dims: int = 25
    prior_std: float = 1.0

    @property
    def total(self) -> int:
        return self.concept_dims + self.free_dims

    def validate(self, n_kpis: int) -> None:
        if self.concept_dims != n_kpis:
            raise ConfigError(
                f"concept_dims ({self.concept_dims}) must equal the KPI count ({n_kpis})"
            )
        if self.free_dims < 0:
            raise ConfigError("free_dims must be >= 0")
        if self.prior_std <= 0:
            raise ConfigError("prior_std must be positive")


@dataclass
class ArchConfig:
    input_dim: int = 5
    hidden: int = 64
    layers: int = 3
    logvar_lo: float = -8.0
    logvar_hi: float = 8.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    recon_weight: float = 10.0
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    eval_samples: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be >= 1")


@dataclass
class VaeParams:
    arch: ArchConfig
    latent: LatentConfig
    tensors: dict[str, np.ndarray]
    seed: int

    @property
    def n_params(self) -> int:
        return sum(int(v.size) for v in self.tensors.values())

    def copy_tensors(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.tensors.items()}


@dataclass
class PriorSpec:
    """Per-record latent prior: concept dims at the cluster's scaled centroid,
    free dims standard normal."""

    mean: np.ndarray  # (total,)
    std: float
    concept_dims: int

    def validate(self) -> None:
        if self.std <= 0:
            raise ConfigError("prior std must be positive")
        head = self.mean[: self.concept_dims]
        tail = self.mean[self.concept_dims :]
        if head.size and (head.min() < -1.0 - 1e-12 or head.max() > 1.0 + 1e-12):
            raise ValidationError("concept-dim prior means must lie in [-1, 1]")
        if tail.size and np.any(tail != 0.0):
            raise ValidationError("free-dim prior means must be exactly 0")


def build_prior(model: ConceptModel, latent: LatentConfig, cluster: int) -> PriorSpec:
    if model.prior_means is None:
        raise ValidationError("concept model has no prior_means; run scale_centroids")
    mean = np.zeros(latent.total)
    mean[: latent.concept_dims] = model.prior_means[cluster]
    spec = PriorSpec(mean=mean, std=latent.prior_std, concept_dims=latent.concept_dims)
    spec.validate()
    return spec


def init_params(
    arch: ArchConfig,
    latent: LatentConfig,
    seed: int = 0,
    rng: np.random.Generator | None = None,
) -> VaeParams:
    """Fresh parameters: orthogonal kernels (QR of Gaussians), zero biases."""
    latent.validate(arch.input_dim)
    if rng is None:
        rng = np.random.default_rng(seed)
    total = latent.total
    tensors: dict[str, np.ndarray] = {}
    dim = arch.input_dim
    for i in range(arch.layers):
        layer = lstm_init(dim, arch.hidden, rng)
        for k, v in layer.items():
            tensors[f"enc{i}.{k}"] = v
        dim = arch.hidden
    head = linear_init(arch.hidden, 2 * total, rng)
    tensors["enc_head.W"] = head["W"]
    tensors["enc_head.b"] = head["b"]
    dim = total
    for i in range(arch.layers):
        layer = lstm_init(dim, arch.hidden, rng)
        for k, v in layer.items():
            tensors[f"dec{i}.{k}"] = v
        dim = arch.hidden
    head = linear_init(arch.hidden, 2 * arch.input_dim, rng)
    tensors["dec_head.W"] = head["W"]
    tensors["dec_head.b"] = head["b"]
    return VaeParams(arch=arch, latent=latent, tensors=tensors, seed=seed)


def recurrent_weight_blocks(params: VaeParams):
    """Yield (name, block) for every square recurrent gate kernel."""
    H = params.arch.hidden
    for k, v in params.tensors.items():
        if k.endswith(".Wh"):
            for g, gate in enumerate("ifgo"):
                yield f"{k}[{gate}]", v[:, g * H : (g + 1) * H]


def _layer(params: VaeParams, key: str) -> dict[str, np.ndarray]:
    t = params.tensors
    return {"Wx": t[f"{key}.Wx"], "Wh": t[f"{key}.Wh"], "b": t[f"{key}.b"]}


def _head(params: VaeParams, key: str) -> dict[str, np.ndarray]:
    t = params.tensors
    return {"W": t[f"{key}.W"], "b": t[f"{key}.b"]}


def _first_bad_timestep(*arrays: np.ndarray) -> int:
    bad = np.zeros(arrays[0].shape[1], dtype=bool)
    for a in arrays:
        bad |= ~np.isfinite(a).all(axis=(0, 2))
    return int(np.argmax(bad))


def _encoder_forward(params: VaeParams, x: np.ndarray, want_cache: bool = False):
    arch = params.arch
    caches = []
    h = x
    for i in range(arch.layers):
        h, cache = lstm_forward(h, _layer(params, f"enc{i}"))
        caches.append(cache)
    raw, head_cache = linear_forward(h, _head(params, "enc_head"))
    total = params.latent.total
    mu = raw[..., :total]
    lv_raw = raw[..., total:]
    lv = np.clip(lv_raw, arch.logvar_lo, arch.logvar_hi)
    if not (np.isfinite(mu).all() and np.isfinite(lv).all()):
        t = _first_bad_timestep(mu, lv)
        raise NonFiniteError(f"encoder produced non-finite values at timestep {t}")
    if want_cache:
        mask = (lv_raw > arch.logvar_lo) & (lv_raw < arch.logvar_hi)
        return mu, lv, (caches, head_cache, mask)
    return mu, lv, None


def _decoder_forward(params: VaeParams, z: np.ndarray, want_cache: bool = False):
    arch = params.arch
    caches = []
    h = z
    for i in range(arch.layers):
        h, cache = lstm_forward(h, _layer(params, f"dec{i}"))
        caches.append(cache)
    raw, head_cache = linear_forward(h, _head(params, "dec_head"))
    d = arch.input_dim
    mu_x = sigmoid(raw[..., :d])
    lx_raw = raw[..., d:]
    lx = np.clip(lx_raw, arch.logvar_lo, arch.logvar_hi)
    if not (np.isfinite(mu_x).all() and np.isfinite(lx).all()):
        t = _first_bad_timestep(mu_x, lx)
        raise NonFiniteError(f"decoder produced non-finite values at timestep {t}")
    if want_cache:
        mask = (lx_raw > arch.logvar_lo) & (lx_raw < arch.logvar_hi)
        return mu_x, lx, (caches, head_cache, mask)
    return mu_x, lx, None


def encode(params: VaeParams, window) -> tuple[np.ndarray, np.ndarray]:
    """Per-timestep (mu, logvar) of shape (T, total) for one window."""
    values = window.values if isinstance(window, SequenceWindow) else np.asarray(window)
    mu, lv, _ = _encoder_forward(params, values[None])
    return mu[0], lv[0]


def decode(params: VaeParams, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-timestep reconstruction (mu_x in (0,1), logvar_x) for one z sequence."""
    mu_x, lx, _ = _decoder_forward(params, np.asarray(z)[None])
    return mu_x[0], lx[0]


def encode_windows(
    params: VaeParams, windows: list[SequenceWindow], batch_size: int = 256
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-window (mu, logvar), batching equal-length windows together.

    Output is aligned with the input order.
    """
    out: list = [None] * len(windows)
    groups: dict[int, list[int]] = {}
    for i, w in enumerate(windows):
        groups.setdefault(w.length, []).append(i)
    for length in sorted(groups):
        idx = groups[length]
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            x = np.stack([windows[i].values for i in chunk])
            mu, lv, _ = _encoder_forward(params, x)
            for j, i in enumerate(chunk):
                out[i] = (mu[j], lv[j])
    return out


def sample_latent(mu: np.ndarray, logvar: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Reparameterized draw z = mu + exp(logvar/2) * eps."""
    eps = rng.standard_normal(np.shape(mu))
    return np.asarray(mu) + np.exp(np.asarray(logvar) / 2.0) * eps


def _kl_ts(mu, logvar, prior_means, prior_std):
    # closed-form KL(q || p) per (batch, timestep), summed over dimensions:
    # per dim log(s_p/s_q) + (s_q^2 + (mu - m)^2) / (2 s_p^2) - 1/2
    var_p = prior_std**2
    per_dim = (
        0.5 * np.log(var_p)
        - 0.5 * logvar
        + (np.exp(logvar) + (mu - prior_means) ** 2) / (2.0 * var_p)
        - 0.5
    )
    return per_dim.sum(axis=-1)


def _loglik_ts(x, mu_x, logvar_x):
    # diagonal Gaussian log density per (batch, timestep), summed over KPIs
    per_dim = -0.5 * (LOG_2PI + logvar_x + (x - mu_x) ** 2 * np.exp(-logvar_x))
    return per_dim.sum(axis=-1)


def kl_loss(mu: np.ndarray, logvar: np.ndarray, prior: PriorSpec) -> float:
    """Closed-form KL against the conceptual prior, averaged over timesteps."""
    if prior.std <= 0:
        raise ConfigError("prior std must be positive")
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=np.float64))
    return float(_kl_ts(mu, logvar, prior.mean, prior.std).mean())


def recon_loglik(x: np.ndarray, mu_x: np.ndarray, logvar_x: np.ndarray) -> float:
    """Gaussian reconstruction log-likelihood averaged over timesteps."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mu_x = np.atleast_2d(np.asarray(mu_x, dtype=np.float64))
    logvar_x = np.atleast_2d(np.asarray(logvar_x, dtype=np.float64))
    return float(_loglik_ts(x, mu_x, logvar_x).mean())


def batch_components(
    params: VaeParams,
    x: np.ndarray,
    prior_means: np.ndarray,
    prior_std: float,
    eps: np.ndarray,
):
    """Per-timestep KL and sample-averaged log-likelihood for a batch.

    x is (B, T, 5), prior_means (B, total), eps (S, B, T, total). Returns
    (mu, logvar, kl_ts, loglik_ts) with the *_ts arrays shaped (B, T).
    """
    mu, lv, _ = _encoder_forward(params, x)
    kl_ts = _kl_ts(mu, lv, prior_means[:, None, :], prior_std)
    std = np.exp(lv / 2.0)
    ll = np.zeros(x.shape[:2])
    for s in range(eps.shape[0]):
        z = mu + std * eps[s]
        mu_x, lx, _ = _decoder_forward(params, z)
        ll += _loglik_ts(x, mu_x, lx)
    return mu, lv, kl_ts, ll / eps.shape[0]


def eval_loss(
    params: VaeParams,
    window,
    prior: PriorSpec,
    eval_samples: int = 10,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Unweighted evaluation loss for one window: loss = kl - loglik.

    The log-likelihood is the mean over `eval_samples` independent latent
    draws; the KL term is closed-form, so loss decomposes exactly.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    values = window.values if isinstance(window, SequenceWindow) else np.asarray(window)
    x = values[None]
    eps = rng.standard_normal((eval_samples, 1) + (x.shape[1], params.latent.total))
    _, _, kl_ts, ll_ts = batch_components(params, x, prior.mean[None], prior.std, eps)
    kl = float(kl_ts.mean())
    loglik = float(ll_ts.mean())
    return {"loss": kl - loglik, "kl": kl, "loglik": loglik}


def objective_and_grads(
    params: VaeParams,
    x: np.ndarray,
    prior_means: np.ndarray,
    prior_std: float,
    recon_weight: float,
    eps: np.ndarray,
):
    """Training objective kl + recon_weight * (-loglik) and its exact gradients.

    One reparameterized sample per window (eps is (B, T, total)). Returns
    (objective, components dict, gradient dict keyed like params.tensors).
    """
    arch = params.arch
    B, T, _ = x.shape
    scale = 1.0 / (B * T)
    var_p = prior_std**2

    mu, lv, (enc_caches, enc_head_cache, enc_mask) = _encoder_forward(params, x, want_cache=True)
    std = np.exp(lv / 2.0)
    z = mu + std * eps
    mu_x, lx, (dec_caches, dec_head_cache, dec_mask) = _decoder_forward(params, z, want_cache=True)

    resid = x - mu_x
    inv_var_x = np.exp(-lx)
    loglik = float(_loglik_ts(x, mu_x, lx).mean())
    kl = float(_kl_ts(mu, lv, prior_means[:, None, :], prior_std).mean())
    objective = kl - recon_weight * loglik

    grads: dict[str, np.ndarray] = {}

    # reconstruction term: d(-w * loglik) through the decoder head
    coef = -recon_weight * scale
    dmu_x = coef * (resid * inv_var_x)
    dlx = coef * (-0.5 + 0.5 * resid**2 * inv_var_x)
    draw = np.concatenate([dmu_x * mu_x * (1.0 - mu_x), dlx * dec_mask], axis=-1)
    dh, head_grads = linear_backward(draw, dec_head_cache, _head(params, "dec_head"))
    grads["dec_head.W"] = head_grads["W"]
    grads["dec_head.b"] = head_grads["b"]
    for i in range(arch.layers - 1, -1, -1):
        dh, layer_grads = lstm_backward(dh, dec_caches[i], _layer(params, f"dec{i}"))
        for k, v in layer_grads.items():
            grads[f"dec{i}.{k}"] = v
    dz = dh

    # KL term plus the pathwise gradient through z = mu + std * eps
    dmu = scale * (mu - prior_means[:, None, :]) / var_p + dz
    dlv = scale * (0.5 * np.exp(lv) / var_p - 0.5) + dz * eps * 0.5 * std
    draw = np.concatenate([dmu, dlv * enc_mask], axis=-1)
    dh, head_grads = linear_backward(draw, enc_head_cache, _head(params, "enc_head"))
    grads["enc_head.W"] = head_grads["W"]
    grads["enc_head.b"] = head_grads["b"]
    for i in range(arch.layers - 1, -1, -1):
        dh, layer_grads = lstm_backward(dh, enc_caches[i], _layer(params, f"enc{i}"))
        for k, v in layer_grads.items():
            grads[f"enc{i}.{k}"] = v

    components = {"objective": objective, "kl": kl, "loglik": loglik}
    return objective, components, grads


def train_step(
    params: VaeParams,
    opt: Adam,
    x: np.ndarray,
    prior_means: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
) -> dict[str, float]:
    """One Adam update on a batch; mutates params in place via the optimizer."""
    eps = rng.standard_normal((x.shape[0], x.shape[1], params.latent.total))
    objective, components, grads = objective_and_grads(
        params, x, prior_means, params.latent.prior_std, config.recon_weight, eps
    )
    if not np.isfinite(objective):
        raise TrainingDivergedError(
            f"training objective is non-finite ({objective})", diagnostics=components
        )
    opt.step(grads)
    return components


def _stack_windows(windows: list[SequenceWindow]) -> np.ndarray:
    lengths = {w.length for w in windows}
    if len(lengths) != 1:
        raise ValidationError(f"windows have mixed lengths {sorted(lengths)}")
    return np.stack([w.values for w in windows])


def _window_priors(
    windows: list[SequenceWindow], model: ConceptModel, latent: LatentConfig
) -> np.ndarray:
    missing = sorted({w.element_id for w in windows if w.element_id not in model.assignment})
    if missing:
        raise ValidationError(
            "elements without a cluster assignment: " + ", ".join(missing)
        )
    return np.stack(
        [build_prior(model, latent, model.assignment[w.element_id]).mean for w in windows]
    )


def train(
    train_windows: list[SequenceWindow],
    val_windows: list[SequenceWindow],
    concept_model: ConceptModel,
    config: TrainConfig,
    arch: ArchConfig | None = None,
    latent: LatentConfig | None = None,
) -> tuple[VaeParams, list[dict[str, float]]]:
    """Mini-batch training with early stopping on validation loss.

    Returns the best-validation parameters and the per-epoch history
    (epoch, train_loss, train_kl, train_loglik, val_loss), where losses are
    unweighted kl - loglik. Validation reuses one fixed noise draw across
    epochs so successive epochs are compared on common random numbers.
    """
    config.validate()
    if not train_windows:
        raise ValidationError("training set is empty")
    if not val_windows:
        raise ValidationError("validation set is empty; cannot early-stop")
    arch = arch or ArchConfig()
    latent = latent or LatentConfig()

    seq = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss, noise_ss, val_ss = seq.spawn(4)
    params = init_params(arch, latent, seed=config.seed, rng=np.random.default_rng(init_ss))
    rng_shuffle = np.random.default_rng(shuffle_ss)
    rng_noise = np.random.default_rng(noise_ss)
    rng_val = np.random.default_rng(val_ss)

    x_train = _stack_windows(train_windows)
    p_train = _window_priors(train_windows, concept_model, latent)
    x_val = _stack_windows(val_windows)
    p_val = _window_priors(val_windows, concept_model, latent)
    val_eps = rng_val.standard_normal((1,) + x_val.shape[:2] + (latent.total,))

    opt = Adam(params.tensors, lr=config.learning_rate)
    history: list[dict[str, float]] = []
    best_val = np.inf
    best_tensors = params.copy_tensors()
    since_best = 0
    n = len(train_windows)

    for epoch in range(config.max_epochs):
        order = rng_shuffle.permutation(n)
        kl_sum = ll_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            comps = train_step(params, opt, x_train[idx], p_train[idx], config, rng_noise)
            kl_sum += comps["kl"] * len(idx)
            ll_sum += comps["loglik"] * len(idx)
        train_kl = kl_sum / n
        train_ll = ll_sum / n

        _, _, kl_ts, ll_ts = batch_components(
            params, x_val, p_val, latent.prior_std, val_eps
        )
        val_loss = float(kl_ts.mean() - ll_ts.mean())
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_kl - train_ll,
                "train_kl": train_kl,
                "train_loglik": train_ll,
                "val_loss": val_loss,
            }
        )
        if val_loss < best_val:
            best_val = val_loss
            best_tensors = params.copy_tensors()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    params.tensors = best_tensors
    return params, history


def save_checkpoint(params: VaeParams, path) -> None:
    """Versioned binary checkpoint; identical params give identical bytes."""
    names = sorted(params.tensors)
    header = {
        "format": CHECKPOINT_FORMAT,
        "arch": asdict(params.arch),
        "latent": asdict(params.latent),
        "seed": params.seed,
        "arrays": [
            [k, str(params.tensors[k].dtype), list(params.tensors[k].shape)] for k in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(">Q", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(params.tensors[k]).tobytes())


def load_checkpoint(path) -> VaeParams:
    try:
        fh = open(path, "rb")
    except FileNotFoundError:
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"not a kpivae checkpoint: {path}")
        (blob_len,) = struct.unpack(">Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ParseError(f"unsupported checkpoint format {header.get('format')!r}")
        arch = ArchConfig(**header["arch"])
        latent = LatentConfig(**header["latent"])
        tensors = {}
        for name, dtype, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * np.dtype(dtype).itemsize)
            tensors[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return VaeParams(arch=arch, latent=latent, tensors=tensors, seed=header["seed"])

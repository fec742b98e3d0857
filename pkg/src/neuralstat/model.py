"""The neural statistician: statistic network, inference and generative nets, and the bound.

Shapes: a batch of datasets is ``(B, N, n)``. Per-dataset quantities (the
context ``c``, the top latent prior) are ``(B, d)`` and are broadcast over the
sample axis only where they meet per-sample quantities.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from ._binio import FormatError, Reader
from .distributions import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    GaussianParams,
    bernoulli_log_prob,
    kl_diag,
    kl_to_standard,
    log_pdf,
    reparam_sample,
)
from .tensor import Parameter, ShapeError, Tensor

ACTIVATIONS = {"relu": T.relu, "elu": T.elu}
POOLINGS = ("mean", "sum", "max")
LIKELIHOODS = ("gaussian", "bernoulli")

CHECKPOINT_MAGIC = b"NSTM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_features: int = 1
    c_dim: int = 3
    z_dim: int = 32
    n_stochastic_layers: int = 1
    hidden_width: int = 128
    hidden_depth: int = 3
    activation: str = "relu"
    likelihood: str = "gaussian"
    pooling: str = "mean"
    sample_dropout_rate: float = 0.0
    append_count_feature: bool = False
    # count feature is kept / max_set_size
    max_set_size: int = 200
    # one learned per-feature variance for all datapoints instead of a per-point decoder output
    shared_obs_variance: bool = False
    # inference nets read the statistic network's instance encoding instead of raw x
    shared_encoder: bool = False
    # multiplies the He init of every output head; full-scale heads put log-variances
    # at the clamp on the first steps and the resulting loss spike kills hidden units
    head_init_scale: float = 0.01

    def __post_init__(self):
        for name in ("n_features", "c_dim", "z_dim", "n_stochastic_layers", "hidden_width",
                     "hidden_depth", "max_set_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ValueError(f"ModelConfig.{name} must be an integer, got {v!r}")
            if v < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"ModelConfig.activation must be one of {sorted(ACTIVATIONS)}")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"ModelConfig.likelihood must be one of {LIKELIHOODS}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"ModelConfig.pooling must be one of {POOLINGS}")
        if not 0.0 <= self.sample_dropout_rate < 1.0:
            raise ValueError("ModelConfig.sample_dropout_rate must lie in [0, 1)")
        if not self.head_init_scale >= 0:
            raise ValueError("ModelConfig.head_init_scale must be >= 0")

    @property
    def n_layers(self) -> int:
        return self.n_stochastic_layers

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


SYNTHETIC_PRESET = ModelConfig(n_features=1, c_dim=3, z_dim=32, n_stochastic_layers=1,
                               hidden_width=128, hidden_depth=3, activation="relu", max_set_size=200)
SPATIAL_PRESET = ModelConfig(n_features=2, c_dim=64, z_dim=2, n_stochastic_layers=3,
                             hidden_width=256, hidden_depth=3, activation="relu", max_set_size=50)
PRESETS = {"synthetic": SYNTHETIC_PRESET, "spatial": SPATIAL_PRESET}


# -- layers ---------------------------------------------------------------------------
class Dense:
    """Dense layer over the concatenation of several inputs.

    Holding one weight block per input is the same map as concatenating first,
    but lets per-dataset inputs (rank 2) be multiplied once per dataset and
    broadcast over the sample axis of per-sample inputs (rank 3).
    """

    def __init__(self, in_dims: Sequence[int], out_dim: int, rng: np.random.Generator):
        self.in_dims = list(in_dims)
        fan_in = sum(self.in_dims)
        w = T.he_normal(rng, fan_in, out_dim)
        bounds = np.cumsum([0] + self.in_dims)
        self.weights = [Parameter(w[bounds[i]:bounds[i + 1]]) for i in range(len(self.in_dims))]
        self.bias = Parameter(np.zeros(out_dim))

    def params(self, prefix: str) -> dict[str, Parameter]:
        out = {f"{prefix}.W{i}": w for i, w in enumerate(self.weights)}
        out[f"{prefix}.b"] = self.bias
        return out

    def __call__(self, *inputs: Tensor) -> Tensor:
        if len(inputs) != len(self.weights):
            raise ShapeError(f"Dense: expected {len(self.weights)} inputs, got {len(inputs)}")
        for x, d in zip(inputs, self.in_dims):
            if x.shape[-1] != d:
                raise ShapeError(f"Dense: input of shape {x.shape} where last dim {d} was expected")
        rank = max(x.ndim for x in inputs)
        out = None
        # per-sample inputs first, so the bias rides on the largest term
        order = sorted(range(len(inputs)), key=lambda i: -inputs[i].ndim)
        for k, i in enumerate(order):
            h = T.linear(inputs[i], self.weights[i], self.bias if k == 0 else None)
            if h.ndim < rank:
                h = T.reshape(h, h.shape[:-1] + (1,) * (rank - h.ndim) + h.shape[-1:])
            out = h if out is None else out + h
        return out


class MLP:
    """``depth`` activated dense layers, optionally followed by a linear head."""

    def __init__(self, in_dims: Sequence[int], width: int, depth: int, activation: str,
                 rng: np.random.Generator, out_dim: int | None = None, head_scale: float = 1.0):
        self.act = ACTIVATIONS[activation]
        self.layers = [Dense(in_dims, width, rng)]
        self.layers += [Dense([width], width, rng) for _ in range(depth - 1)]
        self.head = Dense([width], out_dim, rng) if out_dim is not None else None
        if self.head is not None:
            for w in self.head.weights:
                w.data *= head_scale

    def params(self, prefix: str) -> dict[str, Parameter]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.{i}"))
        if self.head is not None:
            out.update(self.head.params(f"{prefix}.head"))
        return out

    def __call__(self, *inputs: Tensor) -> Tensor:
        h = self.act(self.layers[0](*inputs))
        for layer in self.layers[1:]:
            h = self.act(layer(h))
        return h if self.head is None else self.head(h)


def _gaussian_head(out: Tensor, dim: int) -> GaussianParams:
    mean = T.slice_axis(out, -1, 0, dim)
    log_var = T.clamp(T.slice_axis(out, -1, dim, 2 * dim), LOG_VAR_MIN, LOG_VAR_MAX)
    return GaussianParams(mean, log_var)


# -- containers -------------------------------------------------------------------------
@dataclass
class ElboNoise:
    """Standard-normal draws feeding one evaluation of the bound.

    ``latents[i]`` drives z_{i+1}; ``keep`` is the sample-dropout mask (None = keep all).
    """

    context: np.ndarray
    latents: list[np.ndarray]
    keep: np.ndarray | None = None

    def permuted(self, perms: np.ndarray) -> "ElboNoise":
        """Re-index per-sample noise by ``perms`` (B, N), matching a permutation of the data."""
        rows = np.arange(perms.shape[0])[:, None]
        return ElboNoise(
            self.context.copy(),
            [z[rows, perms] for z in self.latents],
            None if self.keep is None else self.keep[rows, perms],
        )

    @staticmethod
    def concat(parts: Sequence["ElboNoise"]) -> "ElboNoise":
        keeps = [p.keep for p in parts]
        keep = None if all(k is None for k in keeps) else np.concatenate(
            [k if k is not None else np.ones(p.latents[0].shape[:2], bool) for k, p in zip(keeps, parts)])
        return ElboNoise(
            np.concatenate([p.context for p in parts]),
            [np.concatenate([p.latents[i] for p in parts]) for i in range(len(parts[0].latents))],
            keep,
        )


@dataclass
class ElboTerms:
    """Batch-averaged terms of the per-dataset bound; ``per_set`` holds the unaveraged values."""

    r_d: Tensor
    c_d: Tensor
    l_d: Tensor
    total: Tensor
    per_set: dict[str, np.ndarray] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        return {"r_d": self.r_d.item(), "c_d": self.c_d.item(), "l_d": self.l_d.item(),
                "total": self.total.item()}


@dataclass
class LatentPath:
    samples: list[Tensor]          # z_1 .. z_L
    params: list[GaussianParams]   # q(z_i | ...) for i = 1 .. L


# -- the model ----------------------------------------------------------------------------
class NeuralStatistician:
    def __init__(self, config: ModelConfig, seed: int | np.random.Generator = 0):
        self.config = cfg = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        h, L, zd, cd, n = cfg.hidden_width, cfg.n_stochastic_layers, cfg.z_dim, cfg.c_dim, cfg.n_features
        mlp = lambda dims, out=None: MLP(dims, h, cfg.hidden_depth, cfg.activation, rng, out, cfg.head_init_scale)

        # statistic network q(c|D)
        self.instance_encoder = mlp([n])
        self.post_pool = mlp([h + int(cfg.append_count_feature)], 2 * cd)

        # inference nets q(z_i | z_{i+1}, x, c); index i-1 holds layer i
        x_dim = h if cfg.shared_encoder else n
        self.inference_nets = [mlp([x_dim, cd] if i == L else [zd, x_dim, cd], 2 * zd)
                               for i in range(1, L + 1)]
        # latent decoders p(z_i | z_{i+1}, c)
        self.latent_decoders = [mlp([cd] if i == L else [zd, cd], 2 * zd) for i in range(1, L + 1)]
        # observation decoder p(x | z_1..z_L, c)
        out = n if (cfg.likelihood == "bernoulli" or cfg.shared_obs_variance) else 2 * n
        self.observation_decoder = mlp([zd] * L + [cd], out)
        self.obs_log_var = Parameter(np.zeros(n)) if (
            cfg.likelihood == "gaussian" and cfg.shared_obs_variance) else None

    # -- parameters ------------------------------------------------------------------------
    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        out.update(self.instance_encoder.params("stat.encoder"))
        out.update(self.post_pool.params("stat.post_pool"))
        for i, net in enumerate(self.inference_nets, start=1):
            out.update(net.params(f"inference.{i}"))
        for i, net in enumerate(self.latent_decoders, start=1):
            out.update(net.params(f"latent_decoder.{i}"))
        out.update(self.observation_decoder.params("obs_decoder"))
        if self.obs_log_var is not None:
            out["obs_decoder.log_var"] = self.obs_log_var
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- noise -----------------------------------------------------------------------------
    def draw_noise(self, n_sets: int, sample_size: int, rng: np.random.Generator,
                   training: bool = False) -> ElboNoise:
        cfg = self.config
        context = rng.standard_normal((n_sets, cfg.c_dim))
        latents: list[np.ndarray] = [None] * cfg.n_stochastic_layers  # type: ignore[list-item]
        for i in reversed(range(cfg.n_stochastic_layers)):
            latents[i] = rng.standard_normal((n_sets, sample_size, cfg.z_dim))
        keep = None
        if training and cfg.sample_dropout_rate > 0:
            keep = rng.random((n_sets, sample_size)) >= cfg.sample_dropout_rate
            keep[np.arange(n_sets), rng.integers(sample_size, size=n_sets)] = True
        return ElboNoise(context, latents, keep)

    def zero_noise(self, n_sets: int, sample_size: int) -> ElboNoise:
        cfg = self.config
        return ElboNoise(np.zeros((n_sets, cfg.c_dim)),
                         [np.zeros((n_sets, sample_size, cfg.z_dim)) for _ in range(cfg.n_stochastic_layers)])

    # -- statistic network -----------------------------------------------------------------
    def _check_batch(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.config.n_features:
            raise ShapeError(f"expected a (batch, sample, {self.config.n_features}) batch, got {x.shape}")
        if x.shape[1] < 1:
            raise ValueError("empty dataset: sample axis has extent 0")
        return x

    def pool(self, e: Tensor, keep: np.ndarray | None = None) -> Tensor:
        """Exchangeable pooling of instance encodings (B, N, h) -> (B, h)."""
        cfg = self.config
        B, N = e.shape[:2]
        if keep is None:
            if cfg.pooling == "mean":
                v = T.mean(e, axis=1)
            elif cfg.pooling == "sum":
                v = T.tsum(e, axis=1)
            else:
                v = T.tmax(e, axis=1)
            count = np.full((B, 1), float(N))
        else:
            keep = np.asarray(keep, dtype=bool)
            count = keep.sum(axis=1, keepdims=True).astype(float)
            if np.any(count == 0):
                raise ValueError("sample dropout removed every sample of a dataset")
            if cfg.pooling == "max":
                v = T.tmax(e + np.where(keep, 0.0, -1e300)[..., None], axis=1)
            else:
                w = keep[..., None].astype(float)
                if cfg.pooling == "mean":
                    w = w / count[:, None]
                v = T.tsum(e * w, axis=1)
        if cfg.append_count_feature:
            v = T.concat([v, count / cfg.max_set_size], axis=-1)
        return v

    def encode_instances(self, x) -> Tensor:
        return self.instance_encoder(T.as_tensor(x))

    def context_from_pooled(self, v: Tensor) -> GaussianParams:
        return _gaussian_head(self.post_pool(v), self.config.c_dim)

    def encode_context(self, x, keep: np.ndarray | None = None, rng: np.random.Generator | None = None,
                       training: bool = False) -> GaussianParams:
        """q(c | D) for each dataset of the batch.

        With ``training`` and a positive dropout rate, a keep-mask is drawn from
        ``rng`` unless one is given explicitly.
        """
        x = self._check_batch(x)
        if keep is None and training and self.config.sample_dropout_rate > 0:
            if rng is None:
                raise ValueError("encode_context: training with sample dropout needs an rng")
            keep = self.draw_noise(x.shape[0], x.shape[1], rng, training=True).keep
        return self.context_from_pooled(self.pool(self.encode_instances(x), keep))

    # -- inference and generative nets --------------------------------------------------------
    def infer_latents(self, x, c: Tensor, noise: Sequence[np.ndarray],
                      encoded: Tensor | None = None) -> LatentPath:
        """Draw z_L, ..., z_1 top-down from q(z_i | z_{i+1}, x, c)."""
        cfg = self.config
        x = T.as_tensor(x)
        c = T.as_tensor(c)
        if c.shape[-1] != cfg.c_dim or c.shape[0] != x.shape[0]:
            raise ShapeError(f"infer_latents: context {c.shape} does not match batch {x.shape}")
        if len(noise) != cfg.n_stochastic_layers:
            raise ShapeError(f"infer_latents: need {cfg.n_stochastic_layers} noise arrays, got {len(noise)}")
        h = x
        if cfg.shared_encoder:
            h = encoded if encoded is not None else self.encode_instances(x)
        L = cfg.n_stochastic_layers
        samples: list[Tensor] = [None] * L  # type: ignore[list-item]
        params: list[GaussianParams] = [None] * L  # type: ignore[list-item]
        z_next = None
        for i in reversed(range(L)):
            net = self.inference_nets[i]
            out = net(h, c) if z_next is None else net(z_next, h, c)
            params[i] = _gaussian_head(out, cfg.z_dim)
            samples[i] = reparam_sample(params[i], noise[i])
            z_next = samples[i]
        return LatentPath(samples, params)

    def decode_latent_params(self, z_next: Tensor | None, c, layer: int) -> GaussianParams:
        """p(z_layer | z_{layer+1}, c), with ``layer`` counted from 1."""
        L = self.config.n_stochastic_layers
        if not 1 <= layer <= L:
            raise ValueError(f"layer must be in 1..{L}, got {layer}")
        if layer == L and z_next is not None:
            raise ValueError(f"top layer {L} takes no z_next")
        if layer < L and z_next is None:
            raise ValueError(f"layer {layer} requires z_next")
        net = self.latent_decoders[layer - 1]
        c = T.as_tensor(c)
        out = net(c) if z_next is None else net(T.as_tensor(z_next), c)
        return _gaussian_head(out, self.config.z_dim)

    def decode_observation(self, zs: Sequence[Tensor], c) -> GaussianParams | Tensor:
        """Gaussian params over x, or Bernoulli probabilities in (0, 1)."""
        cfg = self.config
        if len(zs) != cfg.n_stochastic_layers:
            raise ShapeError(f"decode_observation: need {cfg.n_stochastic_layers} latents, got {len(zs)}")
        out = self._observation_logits(zs, c)
        if cfg.likelihood == "bernoulli":
            return T.sigmoid(out)
        return self._gaussian_obs(out)

    def _observation_logits(self, zs, c) -> Tensor:
        return self.observation_decoder(*[T.as_tensor(z) for z in zs], T.as_tensor(c))

    def _gaussian_obs(self, out: Tensor) -> GaussianParams:
        n = self.config.n_features
        if self.obs_log_var is None:
            return _gaussian_head(out, n)
        lv = T.clamp(self.obs_log_var, LOG_VAR_MIN, LOG_VAR_MAX)
        return GaussianParams(out, T.broadcast_to(lv, out.shape))

    def observation_log_prob(self, x, zs, c) -> Tensor:
        """log p(x | z_1..z_L, c) per sample."""
        out = self._observation_logits(zs, c)
        if self.config.likelihood == "bernoulli":
            return bernoulli_log_prob(x, out)
        return log_pdf(x, self._gaussian_obs(out))

    # -- the bound ---------------------------------------------------------------------------
    def elbo(self, x, noise: ElboNoise | None = None, rng: np.random.Generator | None = None,
             training: bool = False) -> ElboTerms:
        """Single-draw Monte-Carlo estimate of the per-dataset bound, averaged over the batch.

        Pass ``noise`` to freeze every random draw, or ``rng`` to draw fresh noise.
        """
        x = self._check_batch(x)
        B, N = x.shape[:2]
        if noise is None:
            if rng is None:
                raise ValueError("elbo: pass either noise or rng")
            noise = self.draw_noise(B, N, rng, training=training)
        cfg = self.config

        e = self.encode_instances(x)
        q_c = self.context_from_pooled(self.pool(e, noise.keep))
        c = reparam_sample(q_c, noise.context)
        path = self.infer_latents(x, c, noise.latents, encoded=e)

        latent_kl = None
        for i in range(cfg.n_stochastic_layers):
            layer = i + 1
            z_next = None if layer == cfg.n_stochastic_layers else path.samples[i + 1]
            p = self.decode_latent_params(z_next, c, layer)
            if p.mean.ndim == 2:
                p = GaussianParams(T.reshape(p.mean, (B, 1, cfg.z_dim)), T.reshape(p.log_var, (B, 1, cfg.z_dim)))
            kl = kl_diag(path.params[i], p)
            latent_kl = kl if latent_kl is None else latent_kl + kl

        r_set = T.tsum(self.observation_log_prob(x, path.samples, c), axis=1)
        c_set = kl_to_standard(q_c)
        l_set = T.tsum(latent_kl, axis=1)
        total_set = r_set - c_set - l_set
        return ElboTerms(
            r_d=T.mean(r_set), c_d=T.mean(c_set), l_d=T.mean(l_set), total=T.mean(total_set),
            per_set={"r_d": r_set.data.copy(), "c_d": c_set.data.copy(), "l_d": l_set.data.copy(),
                     "total": total_set.data.copy()},
        )

    # -- checkpoints --------------------------------------------------------------------------
    def state_bytes(self) -> bytes:
        """Serialise to the NSTM container (layout documented in docs/FORMATS.md)."""
        cfg_bytes = json.dumps(self.config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        params = self.named_parameters()
        chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg_bytes)), cfg_bytes,
                  struct.pack("<I", len(params))]
        for name, p in params.items():
            nb = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(nb)) + nb)
            chunks.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.data.shape))
            chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return b"".join(chunks)

    def save(self, path) -> None:
        Path(path).write_bytes(self.state_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "NeuralStatistician":
        r = Reader(buf, "NSTM checkpoint")
        r.magic(CHECKPOINT_MAGIC)
        version = r.u32("version")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"NSTM checkpoint: unsupported version {version}")
        cfg_len = r.u32("config length")
        try:
            cfg = ModelConfig.from_dict(json.loads(r.take(cfg_len, "config").decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise FormatError(f"NSTM checkpoint: invalid config block: {exc}") from None
        model = cls(cfg, seed=0)
        params = model.named_parameters()
        n_params = r.u32("parameter count")
        if n_params != len(params):
            raise FormatError(f"NSTM checkpoint: {n_params} parameters stored, model has {len(params)}")
        for _ in range(n_params):
            name = r.take(r.u32("name length"), "name").decode("utf-8", errors="replace")
            rank = r.u32(f"rank of {name}")
            if rank > 8:
                raise FormatError(f"NSTM checkpoint: implausible rank {rank} for {name}")
            shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(r.take(8 * count, f"values of {name}"), dtype="<f8").reshape(shape)
            if name not in params:
                raise FormatError(f"NSTM checkpoint: unknown parameter {name!r}")
            if params[name].data.shape != shape:
                raise FormatError(f"NSTM checkpoint: {name} has shape {shape}, expected {params[name].data.shape}")
            params[name].data[...] = data
        if r.remaining:
            raise FormatError(f"NSTM checkpoint: {r.remaining} trailing bytes")
        return model

    @classmethod
    def load(cls, path) -> "NeuralStatistician":
        return cls.from_bytes(Path(path).read_bytes())

"""Inference-time procedures on a trained model. None of them touch the parameters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import DatasetBatch
from .distributions import GaussianParams, kl_diag_numpy
from .model import NeuralStatistician
from .tensor import Tensor


@dataclass
class ContextPosterior:
    mean: np.ndarray
    log_var: np.ndarray
    source_size: int

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def _as_set(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[None, :]
    if points.ndim != 2:
        raise ValueError(f"expected a (m, n_features) set, got shape {points.shape}")
    if points.shape[0] == 0:
        raise ValueError("empty set")
    return points


def context_posterior(model: NeuralStatistician, points) -> ContextPosterior:
    """q(c | points) for a single set."""
    points = _as_set(points)
    with T.no_grad():
        q = model.encode_context(points[None])
    return ContextPosterior(q.mean.data[0].copy(), q.log_var.data[0].copy(), len(points))


def context_posteriors(model: NeuralStatistician, sets: np.ndarray, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """q(c | D) for a stack of equal-sized sets (S, N, n); returns (means, log_vars)."""
    means, log_vars = [], []
    with T.no_grad():
        for lo in range(0, len(sets), chunk):
            q = model.encode_context(sets[lo:lo + chunk])
            means.append(q.mean.data)
            log_vars.append(q.log_var.data)
    return np.concatenate(means), np.concatenate(log_vars)


def _generate(model: NeuralStatistician, c: np.ndarray, k: int, rng: np.random.Generator | None) -> np.ndarray:
    """Ancestral sampling of k points given one context; rng=None takes the mean path."""
    cfg = model.config
    draw = (lambda shape: rng.standard_normal(shape)) if rng is not None else np.zeros
    ct = Tensor(c.reshape(1, cfg.c_dim))
    zs: list[Tensor] = [None] * cfg.n_stochastic_layers  # type: ignore[list-item]
    z_next = None
    with T.no_grad():
        for layer in range(cfg.n_stochastic_layers, 0, -1):
            p = model.decode_latent_params(z_next, ct, layer)
            mean, log_var = p.mean.data, p.log_var.data
            if mean.ndim == 2:
                mean = np.broadcast_to(mean[:, None, :], (1, k, cfg.z_dim))
                log_var = np.broadcast_to(log_var[:, None, :], (1, k, cfg.z_dim))
            z = Tensor(mean + np.exp(0.5 * log_var) * draw((1, k, cfg.z_dim)))
            zs[layer - 1] = z
            z_next = z
        obs = model.decode_observation(zs, ct)
    if cfg.likelihood == "bernoulli":
        probs = obs.data[0]
        return probs.copy() if rng is None else (rng.random(probs.shape) < probs).astype(np.float64)
    mean, log_var = obs.mean.data[0], obs.log_var.data[0]
    return mean + np.exp(0.5 * log_var) * draw(mean.shape)


def sample_dataset(model: NeuralStatistician, k: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample a fresh context from the prior, then k points given it. Returns (k, n_features)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    c = rng.standard_normal(model.config.c_dim) if rng is not None else np.zeros(model.config.c_dim)
    return _generate(model, c, k, rng)


def conditional_sample(model: NeuralStatistician, points, k: int,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample k points with the context fixed at the posterior mean of q(c | points)."""
    post = context_posterior(model, points)
    if k == 0:
        return np.empty((0, model.config.n_features))
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    return _generate(model, post.mean, k, rng)


@dataclass
class SubsampleResult:
    indices: np.ndarray        # survivors, increasing
    removed: list[int]         # in removal order
    kl_path: list[float]       # KL(q(c|D) || q(c|S)) after each removal


def representative_subsample(model: NeuralStatistician, points, k: int) -> SubsampleResult:
    """Greedy backward elimination down to k points.

    Each step removes the point whose removal leaves the context posterior of
    the remainder closest, in KL(q(c|D) || q(c|S)), to that of the full set.
    Ties go to the smallest index.
    """
    points = _as_set(points)
    m = len(points)
    if not 1 <= k < m:
        raise ValueError(f"need 1 <= k < m, got k={k}, m={m}")
    with T.no_grad():
        enc = model.encode_instances(points[None]).data[0]
        ref = model.context_from_pooled(model.pool(Tensor(enc[None])))
        ref_mean, ref_lv = ref.mean.data[0], ref.log_var.data[0]
        alive = list(range(m))
        removed, kl_path = [], []
        while len(alive) > k:
            r = len(alive)
            # row j holds alive minus its j-th entry
            drop = np.array([[a for i, a in enumerate(alive) if i != j] for j in range(r)])
            cand = model.context_from_pooled(model.pool(Tensor(enc[drop])))
            kls = kl_diag_numpy(ref_mean, ref_lv, cand.mean.data, cand.log_var.data)
            t = int(np.argmin(kls))
            removed.append(alive.pop(t))
            kl_path.append(float(kls[t]))
    return SubsampleResult(np.array(alive), removed, kl_path)


def classify_context(class_means, class_log_vars, q_mean, q_log_var) -> tuple[int, np.ndarray]:
    """argmin_i KL(N_i || N_x) over given class posteriors; ties go to the smallest index."""
    kls = kl_diag_numpy(np.asarray(class_means), np.asarray(class_log_vars), np.asarray(q_mean),
                        np.asarray(q_log_var))
    return int(np.argmin(kls)), kls


def few_shot_classify(model: NeuralStatistician, class_sets, x) -> tuple[int, np.ndarray]:
    """argmin_i KL(q(c | D_i) || q(c | x)); ties go to the smallest class index.

    ``x`` is a single point (n,) or a query set (s, n). Returns the class and all KLs.
    """
    if len(class_sets) < 2:
        raise ValueError(f"need at least 2 classes, got {len(class_sets)}")
    query = context_posterior(model, x)
    posts = []
    for i, d in enumerate(class_sets):
        try:
            posts.append(context_posterior(model, d))
        except ValueError as exc:
            raise ValueError(f"class {i}: {exc}") from None
    return classify_context([p.mean for p in posts], [p.log_var for p in posts], query.mean, query.log_var)


@dataclass
class FewShotResult:
    accuracies: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def stderr(self) -> float:
        n = len(self.accuracies)
        return float(self.accuracies.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def _episode_plan(labels: np.ndarray, k_shot: int, k_way: int, rng: np.random.Generator):
    classes = np.unique(labels)
    eligible = [c for c in classes if np.sum(labels == c) >= k_shot + 1]
    if len(eligible) < k_way:
        raise ValueError(f"corpus has {len(eligible)} classes with >= {k_shot + 1} examples; need {k_way}")
    chosen = rng.choice(np.array(eligible), size=k_way, replace=False)
    support, queries = [], []
    for c in chosen:
        idx = rng.permutation(np.flatnonzero(labels == c))
        support.append(idx[:k_shot])
        queries.append(idx[k_shot:])
    return support, queries


def fewshot_episode_eval(model: NeuralStatistician, corpus: DatasetBatch, k_shot: int = 1, k_way: int = 5,
                         n_episodes: int = 100, rng: np.random.Generator | None = None) -> FewShotResult:
    """Episodic K-way, k-shot evaluation.

    Each set of ``corpus`` is one labelled example (a single point when its
    sample size is 1). Per episode: draw ``k_way`` classes, ``k_shot`` support
    examples per class (pooled into one support set), and classify every
    remaining example of those classes.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = corpus.label_ids()
    q_mean, q_lv = context_posteriors(model, corpus.values)
    accs = np.empty(n_episodes)
    for ep in range(n_episodes):
        support, queries = _episode_plan(labels, k_shot, k_way, rng)
        s_mean, s_lv = [], []
        for idx in support:
            if k_shot == 1:
                s_mean.append(q_mean[idx[0]])
                s_lv.append(q_lv[idx[0]])
            else:
                post = context_posterior(model, corpus.values[idx].reshape(-1, corpus.n_features))
                s_mean.append(post.mean)
                s_lv.append(post.log_var)
        s_mean, s_lv = np.array(s_mean), np.array(s_lv)
        correct = total = 0
        for cls, idx in enumerate(queries):
            # (n_queries, k_way): KL(N_i || N_x)
            kls = kl_diag_numpy(s_mean[None], s_lv[None], q_mean[idx][:, None], q_lv[idx][:, None])
            correct += int(np.sum(np.argmin(kls, axis=1) == cls))
            total += len(idx)
        accs[ep] = correct / total
    return FewShotResult(accs)


def chance_accuracy(labels: np.ndarray, k_shot: int, k_way: int, n_episodes: int,
                    rng: np.random.Generator, n_sims: int = 200) -> tuple[float, float]:
    """Mean and spread of the episode-averaged accuracy of uniform random guessing.

    Uses the same episode structure as :func:`fewshot_episode_eval`.
    """
    labels = np.asarray(labels)
    means = np.empty(n_sims)
    for s in range(n_sims):
        accs = np.empty(n_episodes)
        for ep in range(n_episodes):
            _, queries = _episode_plan(labels, k_shot, k_way, rng)
            hits = sum(int(np.sum(rng.integers(k_way, size=len(idx)) == cls)) for cls, idx in enumerate(queries))
            accs[ep] = hits / sum(len(idx) for idx in queries)
        means[s] = accs.mean()
    return float(means.mean()), float(means.std(ddof=1))

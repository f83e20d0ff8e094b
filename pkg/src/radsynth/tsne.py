"""Exact O(N^2) t-SNE: per-row perplexity calibration by bisection,
symmetrized joint probabilities, Student-t low-dimensional kernel, and
momentum gradient descent with early exaggeration."""

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ConfigError

_EPS = 1e-12


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_start: float = 0.5
    momentum_final: float = 0.8
    momentum_switch_iter: int = 250
    seed: int = 0
    log_every: int = 50

    def validate(self, n):
        if n > 10000:
            raise ConfigError(f"exact t-SNE is limited to 10000 points, got {n}")
        if self.perplexity >= n / 3:
            raise ConfigError(f"perplexity {self.perplexity} infeasible for {n} points "
                              f"(must be < N/3)")
        if self.iterations < 1 or self.learning_rate <= 0:
            raise ConfigError("iterations and learning_rate must be positive")


def perplexity_calibrate(sq_distances_row, target_perplexity, row_index=None,
                         tol=1e-5, max_iter=200):
    """Bisection on the Gaussian bandwidth until 2^H(p) matches the target
    perplexity. The row must exclude the self-distance. Returns
    (sigma, probabilities over the other points)."""
    d = np.asarray(sq_distances_row, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ConfigError(f"need at least 2 neighbor distances, got shape {d.shape}")
    if not 0 < target_perplexity < d.size + 1:
        raise ConfigError(f"target perplexity {target_perplexity} out of range for row of {d.size}")

    target_h = np.log2(target_perplexity)

    def entropy_probs(beta):
        logits = -(d - d.min()) * beta
        p = np.exp(logits)
        total = p.sum()
        p /= total
        h = float(-(p * np.log2(np.maximum(p, _EPS))).sum())
        return h, p

    beta = 1.0
    lo, hi = 0.0, np.inf
    h, p = entropy_probs(beta)
    for _ in range(max_iter):
        if abs(h - target_h) < tol:
            return float(np.sqrt(1.0 / (2.0 * beta))), p
        if h > target_h:  # distribution too flat: raise beta
            lo = beta
            beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
        else:
            hi = beta
            beta = beta / 2.0 if lo == 0.0 else (beta + lo) / 2.0
        h, p = entropy_probs(beta)
    where = f" for row {row_index}" if row_index is not None else ""
    raise CalibrationError(f"perplexity calibration did not converge{where} "
                           f"(target {target_perplexity}, reached 2^H = {2 ** h:.6f})")


def joint_probabilities(features, perplexity):
    """Symmetrized P with p_ij = (p_j|i + p_i|j) / 2N; sums to 1."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    sq_norms = (x * x).sum(axis=1)
    d2 = np.maximum(sq_norms[:, None] + sq_norms[None, :] - 2.0 * x @ x.T, 0.0)
    cond = np.zeros((n, n))
    idx = np.arange(n)
    for i in range(n):
        row = np.delete(d2[i], i)
        _, p = perplexity_calibrate(row, perplexity, row_index=i)
        cond[i, idx != i] = p
    p_joint = (cond + cond.T) / (2.0 * n)
    return p_joint


def _kl(p, q):
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / np.maximum(q[mask], _EPS))).sum())


def tsne_embed(features, cfg: TsneConfig):
    """Embed rows of ``features`` into 2-D. Returns (embedding, kl_log)
    where kl_log holds (iteration, KL against the true P) pairs."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    cfg.validate(n)
    p = joint_probabilities(x, cfg.perplexity)

    rng = np.random.default_rng(cfg.seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    kl_log = []

    for it in range(1, cfg.iterations + 1):
        p_eff = p * cfg.exaggeration if it <= cfg.exaggeration_iters else p
        sq = ((y[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
        w = 1.0 / (1.0 + sq)
        np.fill_diagonal(w, 0.0)
        q = w / max(w.sum(), _EPS)
        pq = (p_eff - q) * w
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
        momentum = cfg.momentum_start if it < cfg.momentum_switch_iter else cfg.momentum_final
        velocity = momentum * velocity - cfg.learning_rate * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        if it % cfg.log_every == 0 or it == cfg.iterations:
            kl_log.append((it, _kl(p, q)))
    return y, kl_log


def write_embedding_csv(path, embedding, ids, labels):
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "x", "y"])
        for i, (px, py) in enumerate(embedding):
            writer.writerow([ids[i], labels[i], f"{px:.9g}", f"{py:.9g}"])

"""WGAN-GP objective, optimizer, and training schedule.

The critic loss is mean D(fake) - mean D(real) plus the gradient penalty
lambda * E[(||grad_xhat D(xhat)||_2 - 1)^2] evaluated at per-sample uniform
interpolates of the real and fake batches. Each generator update follows
``critic_iters`` critic updates, every one on a fresh real minibatch and
freshly generated fakes. Everything is driven by seeded streams so a run
is bit-reproducible.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .errors import ConfigError, ShapeError, TrainingAbort

# Table 1 rows: (size, critic iterations, epochs, denoise). Batch size,
# learning rate, lambda and the optimizer are not reported there; the
# defaults below are conventional and freely overridable.
PRESETS = {
    "M1": dict(image_size=256, critic_iters=2, epochs=550, denoise=False),
    "M2": dict(image_size=256, critic_iters=1, epochs=150, denoise=True),
    "M3": dict(image_size=256, critic_iters=4, epochs=250, denoise=True),
    "M4": dict(image_size=256, critic_iters=5, epochs=100, denoise=True),
}


@dataclass
class TrainConfig:
    image_size: int = 256
    critic_iters: int = 5
    epochs: int = 100
    denoise: bool = False
    batch_size: int = 64
    gp_lambda: float = 10.0
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 0  # generator steps between checkpoints; 0 = final only
    max_steps: int = 0  # stop after this many generator steps; 0 = run all epochs

    def validate(self):
        if self.critic_iters < 1:
            raise ConfigError(f"critic_iters must be >= 1, got {self.critic_iters}")
        if self.gp_lambda < 0:
            raise ConfigError(f"gp_lambda must be >= 0, got {self.gp_lambda}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")

    @classmethod
    def from_preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
        kwargs = dict(PRESETS[name])
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class LogRecord:
    step: int
    epoch: int
    d_loss: float
    g_loss: float
    gp: float
    wasserstein_estimate: float


class TrainLog:
    """Append-only per-step records with strictly increasing step numbers."""

    FIELDS = ("step", "epoch", "d_loss", "g_loss", "gp", "wasserstein_estimate")

    def __init__(self):
        self.records = []

    def append(self, record: LogRecord):
        if self.records and record.step <= self.records[-1].step:
            raise ConfigError("TrainLog steps must be strictly increasing")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            for r in self.records:
                writer.writerow([r.step, r.epoch,
                                 repr(r.d_loss), repr(r.g_loss),
                                 repr(r.gp), repr(r.wasserstein_estimate)])

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.append(LogRecord(int(row["step"]), int(row["epoch"]),
                                     float(row["d_loss"]), float(row["g_loss"]),
                                     float(row["gp"]), float(row["wasserstein_estimate"])))
        return log


# ---------------------------------------------------------------------------
# loss pieces
# ---------------------------------------------------------------------------

def interpolate_samples(real, fake, eps):
    """Per-sample straight-line interpolation eps*real + (1-eps)*fake."""
    real, fake = ad.astensor(real), ad.astensor(fake)
    if real.shape != fake.shape:
        raise ShapeError(f"real {real.shape} and fake {fake.shape} shapes differ")
    eps_arr = np.asarray(eps, dtype=real.dtype)
    if eps_arr.shape != (real.shape[0],):
        raise ShapeError(f"eps must have shape ({real.shape[0]},), got {eps_arr.shape}")
    if eps_arr.min() < 0 or eps_arr.max() > 1:
        raise ConfigError("eps values must lie in [0, 1]")
    eps_t = ad.Tensor(eps_arr.reshape((-1,) + (1,) * (real.ndim - 1)))
    return eps_t * real + (1.0 - eps_t) * fake


def _as_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def gradient_penalty(critic, real_batch, fake_batch, gp_lambda, seed):
    """lambda * mean((||grad_xhat D(xhat)||_2 - 1)^2), differentiable into
    the critic parameters (the inner gradient is taken with create_graph)."""
    if gp_lambda < 0:
        raise ConfigError(f"gp_lambda must be >= 0, got {gp_lambda}")
    real, fake = ad.astensor(real_batch), ad.astensor(fake_batch)
    if gp_lambda == 0:
        return ad.Tensor(np.asarray(0.0, dtype=real.dtype))
    rng = _as_rng(seed)
    eps = rng.uniform(0.0, 1.0, size=real.shape[0])
    xhat = ad.Tensor(interpolate_samples(real.detach(), fake.detach(), eps).data,
                     requires_grad=True)
    scores = critic(xhat)
    grad_x = ad.grad(ad.tsum(scores), xhat, create_graph=True)
    sq = ad.tsum(grad_x * grad_x, axis=tuple(range(1, grad_x.ndim)))
    # +1e-12 keeps sqrt differentiable if a gradient ever vanishes
    norm = ad.sqrt(sq + 1e-12)
    return gp_lambda * ad.tmean((norm - 1.0) ** 2)


def critic_loss(critic, real_batch, fake_batch, gp_lambda, seed):
    """mean D(fake) - mean D(real) + gradient penalty."""
    real, fake = ad.astensor(real_batch), ad.astensor(fake_batch)
    if real.shape[0] != fake.shape[0]:
        raise ShapeError(f"batch sizes differ: {real.shape[0]} vs {fake.shape[0]}")
    loss = ad.tmean(critic(fake)) - ad.tmean(critic(real))
    return loss + gradient_penalty(critic, real, fake, gp_lambda, seed)


def generator_loss(fake_scores):
    """-mean(scores): the generator maximizes the critic's score."""
    fake_scores = ad.astensor(fake_scores)
    if fake_scores.size == 0:
        raise ShapeError("generator_loss requires a non-empty score batch")
    return ad.neg(ad.tmean(fake_scores))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class OptimizerState:
    """Per-parameter first/second moment accumulators plus a step counter."""

    def __init__(self):
        self.moments = {}  # name -> (m, v)
        self.step = 0

    def slot(self, name, shape, dtype):
        if name not in self.moments:
            self.moments[name] = (np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))
        m, v = self.moments[name]
        if m.shape != tuple(shape):
            raise ShapeError(f"optimizer slot {name!r} has shape {m.shape}, expected {shape}")
        return m, v


def adam_step(params, grads, state, lr=1e-4, beta1=0.0, beta2=0.9, eps=1e-8):
    """Bias-corrected adaptive-moment update, in place on the parameters."""
    items = params.items() if isinstance(params, nets.ParameterStore) else list(params)
    if len(items) != len(grads):
        raise ShapeError(f"{len(items)} parameters but {len(grads)} gradients")
    state.step += 1
    t = state.step
    for (name, p), g in zip(items, grads):
        g_arr = g.data if isinstance(g, ad.Tensor) else np.asarray(g)
        if g_arr.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g_arr.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g_arr)):
            raise TrainingAbort(f"non-finite gradient for parameter {name!r} at optimizer step {t}")
        m, v = state.slot(name, p.shape, p.dtype)
        m *= beta1
        m += (1 - beta1) * g_arr
        v *= beta2
        v += (1 - beta2) * g_arr * g_arr
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

class ArrayDataset:
    """In-memory image dataset, values already normalized to [-1, 1]."""

    def __init__(self, images):
        images = np.asarray(images)
        if images.ndim != 4:
            raise ShapeError(f"expected (N, C, H, W) images, got shape {images.shape}")
        self.images = images

    def __len__(self):
        return len(self.images)

    def batch(self, indices):
        return self.images[indices]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    generator: nets.Network
    critic: nets.Network
    log: TrainLog
    checkpoints: list = field(default_factory=list)


def run_training(cfg: TrainConfig, dataset, gen_cfg: nets.GeneratorConfig,
                 critic_cfg: nets.CriticConfig, run_dir=None, dtype=np.float32,
                 step_callback=None):
    """Train the pair per the configured schedule.

    Per generator step: ``critic_iters`` critic updates (fresh real batch
    and fresh fakes each) then one generator update. Logs every step;
    checkpoints at the configured interval and at the end when ``run_dir``
    is given. Raises TrainingAbort on a non-finite loss or gradient,
    leaving any checkpoints already written in place.
    """
    cfg.validate()
    gen_cfg.validate()
    critic_cfg.validate()
    if len(dataset) < cfg.batch_size:
        raise ConfigError(f"dataset has {len(dataset)} images, batch_size is {cfg.batch_size}")

    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, z_rng, eps_rng, g_seed, d_seed = [np.random.default_rng(s) for s in ss.spawn(5)]
    generator = nets.build_generator(gen_cfg, seed=int(g_seed.integers(2 ** 31)), dtype=dtype)
    critic = nets.build_critic(critic_cfg, seed=int(d_seed.integers(2 ** 31)), dtype=dtype)
    g_params, d_params = generator.parameters(), critic.parameters()
    g_state, d_state = OptimizerState(), OptimizerState()

    log = TrainLog()
    checkpoints = []
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w") as fh:
            json.dump({"train": asdict(cfg), "generator": asdict(gen_cfg),
                       "critic": asdict(critic_cfg)}, fh, indent=2, sort_keys=True)

    def sample_z(n):
        z = z_rng.standard_normal((n, gen_cfg.noise_channels, 1, 1))
        return ad.Tensor(z.astype(dtype))

    last_saved = [-1]

    def save_ckpt(step):
        if run_dir is None or step == last_saved[0]:
            return
        last_saved[0] = step
        for tag, net in (("gen", generator), ("critic", critic)):
            path = os.path.join(run_dir, f"{tag}_{step:06d}.ckpt")
            nets.save_checkpoint(path, net)
            checkpoints.append(path)
        log.to_csv(os.path.join(run_dir, "log.csv"))

    n = len(dataset)
    batches_per_epoch = n // cfg.batch_size
    steps_per_epoch = batches_per_epoch // cfg.critic_iters
    if steps_per_epoch < 1:
        raise ConfigError(
            f"dataset yields {batches_per_epoch} batches per epoch, fewer than "
            f"critic_iters={cfg.critic_iters}")

    step = 0
    done = False
    for epoch in range(cfg.epochs):
        if done:
            break
        order = shuffle_rng.permutation(n)
        bi = 0
        for _ in range(steps_per_epoch):
            d_loss_val = gp_val = w_est = 0.0
            for _ in range(cfg.critic_iters):
                idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
                bi += 1
                real = ad.Tensor(dataset.batch(idx).astype(dtype))
                with ad.no_grad():
                    fake = generator(sample_z(cfg.batch_size)).detach()
                real_scores = critic(real)
                fake_scores = critic(fake)
                gp = gradient_penalty(critic, real, fake, cfg.gp_lambda, eps_rng)
                loss = ad.tmean(fake_scores) - ad.tmean(real_scores) + gp
                if not np.isfinite(loss.item()):
                    raise TrainingAbort(f"non-finite critic loss at step {step}")
                grads = ad.grad(loss, d_params.tensors())
                adam_step(d_params, grads, d_state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                d_loss_val, gp_val = loss.item(), gp.item()
                w_est = float(real_scores.data.mean() - fake_scores.data.mean())
            fake = generator(sample_z(cfg.batch_size))
            g_loss = generator_loss(critic(fake))
            if not np.isfinite(g_loss.item()):
                raise TrainingAbort(f"non-finite generator loss at step {step}")
            grads = ad.grad(g_loss, g_params.tensors())
            adam_step(g_params, grads, g_state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

            step += 1
            log.append(LogRecord(step, epoch, d_loss_val, g_loss.item(), gp_val, w_est))
            if step_callback is not None:
                step_callback(step, log.records[-1])
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                save_ckpt(step)
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
    save_ckpt(step)
    return TrainResult(generator, critic, log, checkpoints)


# ---------------------------------------------------------------------------
# 1-D exact Wasserstein oracle
# ---------------------------------------------------------------------------

def wasserstein1d_exact(a, b):
    """Exact W1 between two equal-size empirical 1-D distributions:
    mean |sorted(a) - sorted(b)|."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or a.size != b.size:
        raise ShapeError(f"sample counts must match and be >= 1, got {a.size} and {b.size}")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))

"""Adversarial training loop for the pore network.

Each iteration draws one labeled source batch and one unlabeled target batch,
runs them through the pore branch separately (batch-norm statistics must not
mix domains), and propagates a single combined loss:

    total = L_pore + L_domain_source + L_domain_target

The gradient-reversal coupling inside the domain head scales the domain
gradients by -lam on their way into the pore branch, so minimizing `total`
moves the pore parameters toward domain-confusing features while the head
itself still learns to separate the domains. The logged objective is
E = L_pore - lam * (L_domain_source + L_domain_target).
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndgrad as ng
from .dataprep import DOMAIN_SOURCE, DOMAIN_TARGET, DomainSample
from .ndgrad import DOMAIN_GROUP, PORE_GROUP, Grid4, ParamSet, Tape
from .porenet import (Checkpoint, PoreModel, TrainMeta, _init_array,
                      forward_backbone, forward_domain, forward_head,
                      forward_pore, respore_census, save_checkpoint)


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; the step was aborted before any update."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    lam: float = 0.005
    epochs: int = 10
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1      # epochs between checkpoints; 0 = final only

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("lam must be finite and nonnegative")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs and checkpoint_every must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class AdamState:
    """First/second moment accumulators and per-parameter step counts."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState, lr: float,
              names=None, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected moment update for every named param with a gradient."""
    for name in (params.names() if names is None else names):
        p = params[name]
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values, dtype=np.float64)
            state.v[name] = np.zeros_like(p.values, dtype=np.float64)
            state.t[name] = 0
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g)
        state.t[name] += 1
        t = state.t[name]
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.values -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.values.dtype)


def sgd_step(params: ParamSet, lr: float, names=None) -> None:
    for name in (params.names() if names is None else names):
        p = params[name]
        if p.grad is not None:
            p.values -= (lr * p.grad).astype(p.values.dtype)


def optimizer_step(params: ParamSet, cfg: TrainConfig, state: AdamState,
                   names=None) -> None:
    if cfg.optimizer == "adam":
        adam_step(params, state, cfg.learning_rate, names,
                  cfg.beta1, cfg.beta2, cfg.eps)
    else:
        sgd_step(params, cfg.learning_rate, names)


# ---------------------------------------------------------------------------
# batches

def stack_batch(samples: list[DomainSample]) -> tuple[np.ndarray, np.ndarray | None]:
    """(n, 1, s, s) patch batch plus the matching label batch when labeled."""
    patches = np.stack([s.patch for s in samples])[:, None].astype(np.float32)
    if any(s.label is None for s in samples):
        return patches, None
    labels = np.stack([s.label for s in samples])[:, None].astype(np.float32)
    return patches, labels


class CyclicSampler:
    """Endless shuffled batches over a sample list; reshuffles on wraparound."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("need at least one sample")
        self._n = n
        self._batch = batch_size
        self._rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        out = []
        count = 0
        while count < self._batch:
            if self._pos == self._n:
                self._order = self._rng.permutation(self._n)
                self._pos = 0
            take = min(self._batch - count, self._n - self._pos)
            out.append(self._order[self._pos:self._pos + take])
            self._pos += take
            count += take
        return np.concatenate(out)


def iterations_per_epoch(n_target: int, batch_size: int) -> int:
    """Batches needed to cover the target set once: ceil(n / b)."""
    if n_target < 1 or batch_size < 1:
        raise ValueError("need positive target count and batch size")
    return math.ceil(n_target / batch_size)


# ---------------------------------------------------------------------------
# single steps

@dataclass
class IterationLog:
    iteration: int
    epoch: int
    loss_pore: float
    loss_domain_source: float
    loss_domain_target: float
    objective: float
    seconds: float


def _require_finite(name: str, value: float, iteration: int) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"iteration {iteration}: {name} is {value!r}; aborting before update")


def train_step(model: PoreModel, cfg: TrainConfig, opt: AdamState,
               src_patches: np.ndarray, src_labels: np.ndarray,
               tgt_patches: np.ndarray, iteration: int = 0,
               epoch: int = 0) -> IterationLog:
    """One adversarial update on a source batch and a target batch."""
    t0 = time.perf_counter()
    params = model.params
    params.zero_grads()
    tape = Tape()

    yhat_s = forward_pore(model, Grid4(src_patches), "train", tape)
    loss_pore = ng.mse_loss(yhat_s, Grid4(src_labels), tape=tape)
    probs_s = forward_domain(model, yhat_s, cfg.lam, tape)
    loss_ds = ng.cross_entropy(probs_s, DOMAIN_SOURCE, tape=tape)

    yhat_t = forward_pore(model, Grid4(tgt_patches), "train", tape)
    probs_t = forward_domain(model, yhat_t, cfg.lam, tape)
    loss_dt = ng.cross_entropy(probs_t, DOMAIN_TARGET, tape=tape)

    lp, ls, lt = (float(loss_pore.item()), float(loss_ds.item()),
                  float(loss_dt.item()))
    _require_finite("pore loss", lp, iteration)
    _require_finite("source domain loss", ls, iteration)
    _require_finite("target domain loss", lt, iteration)

    total = ng.residual_add(ng.residual_add(loss_pore, loss_ds, tape=tape),
                            loss_dt, tape=tape)
    ng.backward(total, tape)
    optimizer_step(params, cfg, opt)
    return IterationLog(iteration, epoch, lp, ls, lt,
                        lp - cfg.lam * (ls + lt), time.perf_counter() - t0)


def train_pore_step(model: PoreModel, cfg: TrainConfig, opt: AdamState,
                    src_patches: np.ndarray, src_labels: np.ndarray,
                    iteration: int = 0, epoch: int = 0) -> IterationLog:
    """Domain-free baseline update: pore regression loss only."""
    t0 = time.perf_counter()
    params = model.params
    params.zero_grads()
    tape = Tape()
    yhat = forward_pore(model, Grid4(src_patches), "train", tape)
    loss = ng.mse_loss(yhat, Grid4(src_labels), tape=tape)
    lp = float(loss.item())
    _require_finite("pore loss", lp, iteration)
    ng.backward(loss, tape)
    optimizer_step(params, cfg, opt, names=params.group_names(PORE_GROUP))
    return IterationLog(iteration, epoch, lp, 0.0, 0.0, lp,
                        time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# epoch loop

CSV_HEADER = "iter,epoch,L_pore,L_d_src,L_d_tgt,E,seconds"


def train(model: PoreModel, source: list[DomainSample], target: list[DomainSample],
          cfg: TrainConfig, out_dir: str | None = None,
          log_hook=None) -> list[IterationLog]:
    """Full adversarial schedule: one epoch covers the target set once.

    Writes iteration logs to train_log.csv and periodic checkpoints under
    out_dir when given. Source batches come from an independent cyclic
    shuffled stream, so source and target set sizes need not match.
    """
    if not source or not target:
        raise ValueError("both domains need at least one sample")
    if any(s.label is None for s in source):
        raise ValueError("source samples must be labeled")
    src_rng, tgt_rng = [np.random.default_rng(c)
                        for c in np.random.SeedSequence(cfg.seed).spawn(2)]
    sampler = CyclicSampler(len(source), cfg.batch_size, src_rng)
    iters = iterations_per_epoch(len(target), cfg.batch_size)

    csv_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_file = open(os.path.join(out_dir, "train_log.csv"), "w")
        csv_file.write(CSV_HEADER + "\n")

    logs: list[IterationLog] = []
    opt = AdamState()
    iteration = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = tgt_rng.permutation(len(target))
            for k in range(iters):
                iteration += 1
                tgt_idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
                tgt_batch, _ = stack_batch([target[i] for i in tgt_idx])
                src_idx = sampler.next_indices()
                src_batch, src_labels = stack_batch([source[i] for i in src_idx])
                entry = train_step(model, cfg, opt, src_batch, src_labels,
                                   tgt_batch, iteration, epoch)
                logs.append(entry)
                if csv_file is not None:
                    csv_file.write(f"{entry.iteration},{entry.epoch},"
                                   f"{entry.loss_pore:.8g},{entry.loss_domain_source:.8g},"
                                   f"{entry.loss_domain_target:.8g},{entry.objective:.8g},"
                                   f"{entry.seconds:.4f}\n")
                    csv_file.flush()
                if log_hook is not None:
                    log_hook(entry)
            if out_dir is not None and cfg.checkpoint_every \
                    and epoch % cfg.checkpoint_every == 0:
                _save(model, cfg, epoch,
                      os.path.join(out_dir, f"checkpoint_epoch_{epoch:03d}.ckpt"))
        if out_dir is not None:
            _save(model, cfg, cfg.epochs, os.path.join(out_dir, "checkpoint_final.ckpt"))
    finally:
        if csv_file is not None:
            csv_file.close()
    return logs


def _save(model: PoreModel, cfg: TrainConfig, epoch: int, path: str) -> None:
    meta = TrainMeta(epoch=epoch, seed=cfg.seed, lam=cfg.lam,
                     learning_rate=cfg.learning_rate)
    save_checkpoint(Checkpoint(model.cfg, model.head_cfg, model.params, meta), path)


# ---------------------------------------------------------------------------
# last-layer fine-tuning

HEAD_PARAM_NAMES = ("conv6.weight", "conv6.bias", "bn6.gamma", "bn6.beta")


def reinitialize_head(model: PoreModel, seed: int) -> None:
    """Fresh final conv + batch norm; everything upstream keeps its weights."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    specs, _ = respore_census(model.cfg)
    for name in HEAD_PARAM_NAMES:
        p = model.params[name]
        p.values = _init_array(specs[name], rng, p.values.dtype)
        p.grad = None
    st = model.params.stats["bn6"]
    st.mean[:] = 0.0
    st.var[:] = 1.0


def finetune_last_layer(model: PoreModel, samples: list[DomainSample],
                        cfg: TrainConfig, cache_limit_bytes: int = 1 << 30
                        ) -> list[float]:
    """Adapt only the final conv/bn pair on a small labeled set.

    The frozen backbone runs in eval mode; its features are cached across
    epochs when they fit the byte budget, otherwise recomputed per batch.
    Returns the mean pore loss of each epoch.
    """
    if not samples:
        raise ValueError("need at least one labeled sample")
    if any(s.label is None for s in samples):
        raise ValueError("fine-tuning samples must be labeled")
    reinitialize_head(model, cfg.seed)

    n = len(samples)
    size = model.cfg.input_size
    c_feat = model.cfg.channel_plan()[-1]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    cache_bytes = n * c_feat * size * size * 4
    cache: np.ndarray | None = None
    if cache_bytes <= cache_limit_bytes:
        chunks = []
        for i in range(0, n, cfg.batch_size):
            batch, _ = stack_batch(samples[i:i + cfg.batch_size])
            chunks.append(forward_backbone(model, Grid4(batch), "eval").values)
        cache = np.concatenate(chunks)

    labels = np.stack([s.label for s in samples])[:, None].astype(np.float32)
    patches = np.stack([s.patch for s in samples])[:, None].astype(np.float32)
    opt = AdamState()
    epoch_losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if cache is not None:
                feats = Grid4(cache[idx])
            else:
                # re-wrap so the head tape treats the features as constants
                feats = Grid4(forward_backbone(model, Grid4(patches[idx]), "eval").values)
            model.params.zero_grads()
            tape = Tape()
            yhat = forward_head(model, feats, "train", tape)
            loss = ng.mse_loss(yhat, Grid4(labels[idx]), tape=tape)
            lp = float(loss.item())
            _require_finite("fine-tune loss", lp, batches)
            ng.backward(loss, tape)
            optimizer_step(model.params, cfg, opt, names=HEAD_PARAM_NAMES)
            total += lp
            batches += 1
        epoch_losses.append(total / batches)
    return epoch_losses

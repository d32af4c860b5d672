"""Training objective, AdamW with EMA shadow weights, and ancestral sampling."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import numerics as nm
from .errors import NumericError, ParameterError
from .model import ModelConfig, ModelParameters
from .numerics import RngStream, Tensor
from .schedule import NoiseSchedule, forward_marginal


@dataclass
class TrainConfig:
    iterations: int = 250_000
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    ema_decay: float = 0.9999
    ratio_original: int = 1
    ratio_augmented: int = 4
    seed: int = 0
    grad_clip: float | None = None
    log_every: int = 100


@dataclass
class TrainState:
    params: ModelParameters
    ema_params: ModelParameters
    m: dict
    v: dict
    step: int
    rng: RngStream
    schedule: NoiseSchedule


def init_train_state(config: ModelConfig, schedule: NoiseSchedule, seed: int) -> TrainState:
    master = RngStream(seed)
    params = mdl.init_parameters(config, master.child(0))
    ema = ModelParameters(config, {k: Tensor(v.data.copy()) for k, v in params.tensors.items()})
    m = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}
    v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
    return TrainState(params, ema, m, v, 0, master, schedule)


def training_loss(batch_x0: np.ndarray, batch_e: np.ndarray, state: TrainState,
                  rng: RngStream | None = None):
    """Noise-prediction MSE over a batch of (log-count, condition) pairs.

    Draws t uniformly in 1..T and eps ~ N(0, I) per example, forms x_t through
    the forward marginal, and returns (loss, aux) where aux records the draws
    so tests can replay the corruption exactly.
    """
    batch_x0 = np.asarray(batch_x0)
    batch_e = np.asarray(batch_e)
    if batch_x0.ndim != 2 or batch_x0.shape[0] == 0:
        raise ParameterError(f"batch must be nonempty 2-D, got shape {batch_x0.shape}")
    rng = rng if rng is not None else state.rng
    sched = state.schedule
    B = batch_x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.standard_normal(batch_x0.shape, dtype=batch_x0.dtype)
    x_t = forward_marginal(batch_x0, t, eps, sched).astype(batch_x0.dtype)
    eps_hat = mdl.predict_noise(state.params, x_t, t, batch_e, sched.T)
    loss = nm.tmean(nm.square(eps_hat - Tensor(eps)))
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite training loss at step {state.step}")
    return loss, {"t": t, "eps": eps, "x_t": x_t}


def optimizer_step(state: TrainState, lr: float, weight_decay: float = 0.0,
                   beta1: float = 0.9, beta2: float = 0.999, eps_adam: float = 1e-8,
                   grad_clip: float | None = None):
    """Decoupled-weight-decay adaptive-moment update with bias correction."""
    step = state.step + 1
    if grad_clip is not None:
        total = 0.0
        for t in state.params.tensors.values():
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        norm = np.sqrt(total)
        if norm > grad_clip:
            scale = grad_clip / norm
            for t in state.params.tensors.values():
                if t.grad is not None:
                    t.grad = t.grad * scale
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, p in state.params.tensors.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps_adam)
        p.data = p.data - lr * update - lr * weight_decay * p.data
    state.step = step


def ema_update(state: TrainState, decay: float):
    """ema <- decay * ema + (1 - decay) * params, elementwise."""
    if not (0.0 <= decay < 1.0):
        raise ParameterError(f"ema decay must be in [0, 1), got {decay}")
    for name, p in state.params.tensors.items():
        e = state.ema_params.tensors[name]
        e.data = decay * e.data + (1.0 - decay) * p.data


def _chain_noise(rng: RngStream, T: int, C: int, dtype=np.float32) -> np.ndarray:
    """All Gaussian draws for one chain: row 0 is x_T, rows 1..T-1 are the
    per-step z for t = T..2 (t = 1 is deterministic)."""
    return rng.standard_normal((T, C), dtype=dtype)


def _reverse_chains(x: np.ndarray, noise: np.ndarray, e: np.ndarray,
                    predict, schedule: NoiseSchedule) -> np.ndarray:
    """Run the ancestral recursion on a batch of chains.

    x: (N, C) initial x_T; noise: (N, T, C); e: (N, cond_dim);
    predict(x, t, e) -> eps_hat (N, C).
    """
    T = schedule.T
    dtype = x.dtype
    for t in range(T, 0, -1):
        i = t - 1
        eps_hat = predict(x, t, e)
        mu = (x - (schedule.beta[i] / np.sqrt(1.0 - schedule.alpha_bar[i])) * eps_hat)
        mu = mu / np.sqrt(schedule.alpha[i])
        if t >= 2:
            x = (mu + np.sqrt(schedule.sigma2[i]) * noise[:, T - t + 1, :]).astype(dtype)
        else:
            x = mu.astype(dtype)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite sampler state at step t={t}")
    return x


def _model_predictor(params: ModelParameters, T: int):
    def predict(x, t, e):
        with nm.no_grad():
            tt = np.full(x.shape[0], t, dtype=np.int64)
            return mdl.predict_noise(params, x, tt, e, T).data
    return predict


def sample(e, n: int, params: ModelParameters, schedule: NoiseSchedule,
           rng: RngStream, predict=None) -> np.ndarray:
    """Draw n conditional chains for one condition embedding; returns (n, C).

    Chains use independent child streams keyed by chain index, so results do
    not depend on batching or execution order. `predict` may replace the
    model's noise predictor (e.g. an analytic oracle in tests).
    """
    if n < 1:
        raise ParameterError(f"need n >= 1 chains, got {n}")
    C = params.config.C
    T = schedule.T
    noise = np.stack([_chain_noise(rng.child(i), T, C) for i in range(n)])
    e_rep = np.broadcast_to(np.asarray(e, dtype=np.float32), (n, len(np.asarray(e)))).copy()
    predict = predict if predict is not None else _model_predictor(params, T)
    return _reverse_chains(noise[:, 0, :].copy(), noise, e_rep, predict, schedule)


def sample_many(embeddings: np.ndarray, n: int, params: ModelParameters,
                schedule: NoiseSchedule, rng: RngStream, chunk: int = 8192,
                predict=None) -> np.ndarray:
    """Sample n chains for each of S condition embeddings; returns (S, n, C).

    Noise streams are keyed by (spot index, chain index), so the output is
    identical whatever the chunking.
    """
    embeddings = np.asarray(embeddings, dtype=np.float32)
    S = embeddings.shape[0]
    C = params.config.C
    T = schedule.T
    predict = predict if predict is not None else _model_predictor(params, T)
    out = np.empty((S, n, C), dtype=np.float32)
    pairs = [(s, i) for s in range(S) for i in range(n)]
    for start in range(0, len(pairs), chunk):
        block = pairs[start:start + chunk]
        noise = np.stack([_chain_noise(rng.child(s).child(i), T, C) for s, i in block])
        e_blk = np.stack([embeddings[s] for s, _ in block])
        x0 = _reverse_chains(noise[:, 0, :].copy(), noise, e_blk, predict, schedule)
        for j, (s, i) in enumerate(block):
            out[s, i] = x0[j]
    return out


def train(plan, model_config: ModelConfig, schedule: NoiseSchedule,
          train_config: TrainConfig, log=None) -> TrainState:
    """Run the loss/step/EMA loop over batches drawn from a sampling plan.

    `plan.draw(rng, batch_size)` must yield (x0, e) arrays; `log` receives
    "step,loss,wallclock_ms" lines.
    """
    state = init_train_state(model_config, schedule, train_config.seed)
    batch_rng = state.rng.child(1)
    noise_rng = state.rng.child(2)
    t0 = time.monotonic()
    for _ in range(train_config.iterations):
        x0, e = plan.draw(batch_rng, train_config.batch_size)
        loss, _ = training_loss(x0, e, state, rng=noise_rng)
        nm.backward(loss)
        optimizer_step(state, train_config.lr, train_config.weight_decay,
                       train_config.beta1, train_config.beta2,
                       grad_clip=train_config.grad_clip)
        ema_update(state, train_config.ema_decay)
        if log is not None and (state.step % train_config.log_every == 0
                                or state.step == train_config.iterations):
            ms = int((time.monotonic() - t0) * 1000)
            log(f"{state.step},{loss.item():.6f},{ms}")
    return state

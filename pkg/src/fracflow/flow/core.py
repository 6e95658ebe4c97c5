"""Rectified-flow training and Euler integration."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Union

import numpy as np

from .mlp import Adam, Architecture, FlowError, FlowModel

log = logging.getLogger(__name__)

Field = Union[FlowModel, Callable[[np.ndarray, np.ndarray], np.ndarray]]


class DivergenceError(FlowError):
    pass


class SolverBlowUp(FlowError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    scheduler: str = "cosine"
    min_lr: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise FlowError("learning_rate must be positive")
        if self.batch_size < 1:
            raise FlowError("batch_size must be >= 1")
        if self.epochs < 1:
            raise FlowError("epochs must be >= 1")
        if self.scheduler not in ("cosine", "constant"):
            raise FlowError(f"unknown scheduler {self.scheduler!r}")

    def lr_at(self, step: int, total: int) -> float:
        if self.scheduler == "constant" or total <= 1:
            return self.learning_rate
        frac = min(step / (total - 1), 1.0)
        return self.min_lr + 0.5 * (self.learning_rate - self.min_lr) * (1.0 + np.cos(np.pi * frac))


@dataclass(frozen=True)
class SolverConfig:
    n_steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise FlowError("n_steps must be >= 1")


class CouplingBatch(NamedTuple):
    x0: np.ndarray
    x1: np.ndarray

    def check(self) -> None:
        if len(self.x0) == 0:
            raise FlowError("empty batch")
        if np.shape(self.x0) != np.shape(self.x1):
            raise FlowError("x0 and x1 differ in shape")


def _field(f: Field, x: np.ndarray, t) -> np.ndarray:
    return f.velocity(x, t) if isinstance(f, FlowModel) else np.asarray(f(x, t))


# --------------------------------------------------------------------------
# objective

def flow_loss(model: Field, batch: CouplingBatch, t: np.ndarray) -> float:
    """Mean over pairs of ||(x1 - x0) - v(x_t, t)||^2 on the straight path."""
    batch.check()
    x0, x1 = np.atleast_2d(batch.x0), np.atleast_2d(batch.x1)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    xt = (1.0 - t) * x0 + t * x1
    resid = (x1 - x0) - _field(model, xt, t.ravel())
    return float(np.mean(np.sum(np.asarray(resid, dtype=np.float64) ** 2, axis=1)))


def flow_loss_and_grad(model: FlowModel, x0: np.ndarray, x1: np.ndarray, t: np.ndarray):
    if len(x0) == 0:
        raise FlowError("empty batch")
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    xt = (1.0 - t) * x0 + t * x1
    target = (x1 - x0).astype(model.dtype)
    out, cache = model.forward(xt, t.ravel(), keep=True)
    resid = target - out
    n = len(x0)
    loss = float(np.sum(resid.astype(np.float64) ** 2) / n)
    grads = model.backward(cache, (-2.0 / n) * resid)
    return loss, grads


# --------------------------------------------------------------------------
# training

def _fit(model: FlowModel, cfg: TrainConfig, n_items: int, draw_pairs, label: str) -> FlowModel:
    """Shared minibatch loop. ``draw_pairs(idx, rng)`` returns (x0, x1)."""
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2)
    steps_per_epoch = -(-n_items // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    best_loss = np.inf
    best_params = [p.copy() for p in model.params]
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_items)
        epoch_losses = []
        for start in range(0, n_items, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x0, x1 = draw_pairs(idx, rng)
            t = rng.random(len(idx))
            loss, grads = flow_loss_and_grad(model, x0, x1, t)
            if not np.isfinite(loss):
                raise DivergenceError(f"{label}: divergence at epoch {epoch} (loss={loss})")
            opt.step(model.params, grads, cfg.lr_at(step, total))
            trace.append((step, loss))
            epoch_losses.append(loss)
            step += 1
        running = float(np.mean(epoch_losses))
        if running < best_loss:
            best_loss = running
            best_params = [p.copy() for p in model.params]
        if epoch % max(1, cfg.epochs // 10) == 0 or epoch == cfg.epochs - 1:
            log.info("%s epoch %d/%d loss %.6g", label, epoch + 1, cfg.epochs, running)
    model.params = best_params
    model.loss_trace = trace
    return model


def train_flow(latents: np.ndarray, cfg: TrainConfig = TrainConfig(),
               arch: Optional[Architecture] = None, init: Optional[FlowModel] = None) -> FlowModel:
    """Fit v on independent couplings: x0 ~ N(0, I) redrawn every batch."""
    data = np.atleast_2d(np.asarray(latents))
    if len(data) == 0:
        raise FlowError("empty training set")
    if init is not None:
        model = init.copy()
    else:
        model = FlowModel(arch or Architecture(dim=data.shape[1]), seed=cfg.seed)
    if model.dim != data.shape[1]:
        raise FlowError(f"latents have dimension {data.shape[1]}, model expects {model.dim}")
    data = data.astype(model.dtype)

    def draw(idx, rng):
        x1 = data[idx]
        return rng.standard_normal(x1.shape).astype(model.dtype), x1

    return _fit(model, cfg, len(data), draw, "train")


def train_on_pairs(model: FlowModel, x0: np.ndarray, x1: np.ndarray, cfg: TrainConfig,
                   label: str = "pairs") -> FlowModel:
    """Fit a copy of ``model`` on a fixed coupling ``(x0[i], x1[i])``."""
    x0 = np.atleast_2d(np.asarray(x0)).astype(model.dtype)
    x1 = np.atleast_2d(np.asarray(x1)).astype(model.dtype)
    if len(x0) == 0:
        raise FlowError("no training pairs")
    if x0.shape != x1.shape or x0.shape[1] != model.dim:
        raise FlowError("pair arrays do not match each other or the model dimension")
    new = model.copy()
    return _fit(new, cfg, len(x0), lambda idx, rng: (x0[idx], x1[idx]), label)


# --------------------------------------------------------------------------
# solvers

def _check_state(z: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(z)):
        raise SolverBlowUp(f"solver blow-up at step {step}")


def integrate(model: Field, z0: np.ndarray, n_steps: int = 100) -> np.ndarray:
    """Forward Euler from t=0 to t=1, returning only the endpoint."""
    if n_steps < 1:
        raise FlowError("n_steps must be >= 1")
    z = np.array(z0, copy=True)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        z = z + dt * _field(model, z, k / n_steps)
        _check_state(z, k)
    return z


def sample_forward(model: Field, z0: np.ndarray, n_steps: int = 100) -> np.ndarray:
    """Forward Euler trajectory, shape ``(n_steps + 1, *z0.shape)``; ``[-1]`` is z1."""
    if n_steps < 1:
        raise FlowError("n_steps must be >= 1")
    z = np.array(z0, copy=True)
    path = [z]
    dt = 1.0 / n_steps
    for k in range(n_steps):
        z = z + dt * _field(model, z, k / n_steps)
        _check_state(z, k)
        path.append(z)
    return np.stack(path)


def sample_reverse(model: Field, z1: np.ndarray, n_steps: int = 4) -> np.ndarray:
    """Backward Euler sweep t = 1 -> 0: z <- z - v(z, t) / n evaluated at the right end."""
    if n_steps < 1:
        raise FlowError("n_steps must be >= 1")
    z = np.array(z1, copy=True)
    dt = 1.0 / n_steps
    for k in range(n_steps, 0, -1):
        z = z - dt * _field(model, z, k / n_steps)
        _check_state(z, n_steps - k)
    return z


# --------------------------------------------------------------------------
# diagnostics

def straightness(model: Field, z0: np.ndarray, n_grid: int = 20) -> float:
    """Mean over trajectories and grid times of ||(z1 - z0) - v(z_t, t)||^2.

    Trajectories are simulated from ``z0`` with ``n_grid`` Euler steps; an
    exactly straight flow scores 0. A :class:`CouplingBatch` may be passed, in
    which case only its ``x0`` is used.
    """
    if isinstance(z0, CouplingBatch):
        z0 = z0.x0
    path = sample_forward(model, np.atleast_2d(z0), n_grid)
    disp = (path[-1] - path[0]).astype(np.float64)
    total = 0.0
    for k in range(n_grid):
        v = np.asarray(_field(model, path[k], k / n_grid), dtype=np.float64)
        total += float(np.mean(np.sum((disp - v) ** 2, axis=1)))
    return total / n_grid


def reflow(model: FlowModel, n_pairs: int, cfg: TrainConfig, n_steps: int = 100,
           warm_start: bool = True) -> FlowModel:
    """Retrain on the deterministic coupling (z0, integrate(model, z0))."""
    rng = np.random.default_rng([cfg.seed, 7919])
    z0 = rng.standard_normal((n_pairs, model.dim)).astype(model.dtype)
    z1 = integrate(model, z0, n_steps)
    base = model if warm_start else FlowModel(model.arch, seed=cfg.seed, dtype=model.dtype)
    return train_on_pairs(base, z0, z1, cfg, label="reflow")

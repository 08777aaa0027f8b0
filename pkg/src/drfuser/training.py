"""Behavioural-cloning training: Huber loss, AdamW, metrics and the train loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from drfuser.checkpoint import save_checkpoint
from drfuser.errors import ConfigError, ContractError, DimensionError, NumericHealthError
from drfuser.nn import Module
from drfuser.tensor import Tensor

# Reported full-scale scores, kept for reference only: (RMSE, MAE) in radians.
REFERENCE_SCORES = {
    "own_dataset": (0.1266, 0.0396),
    "eventscape": (0.0118, 0.00214),
    "ddd": (0.01519, 0.00631),
}
REFERENCE_DDD_COMPARISON_RMSE = (0.05192, 0.0720821)


@dataclass
class TrainConfig:
    """Optimiser and loop settings.

    ``epochs`` bounds the run; ``max_steps`` and ``target_train_mae`` end
    it earlier. With ``target_train_mae`` set, training-set MAE is measured
    in eval mode after every epoch and the run stops once it drops below.
    """

    learning_rate: float = 1e-4
    weight_decay: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    huber_delta: float = 1.0
    batch_size: int = 8
    epochs: int = 100
    max_steps: Optional[int] = None
    target_train_mae: Optional[float] = None
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", "must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(name, "must be in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps", "must be positive")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta", "must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps", "must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown training configuration key")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class Metrics:
    rmse: float
    mae: float
    k: int


@dataclass
class TrainHistory:
    losses: List[float] = field(default_factory=list)
    epochs: List[int] = field(default_factory=list)
    val: Dict[int, Metrics] = field(default_factory=dict)  # keyed by the step that closed the epoch
    train_mae: Dict[int, float] = field(default_factory=dict)
    wall_clock: List[float] = field(default_factory=list)
    stop_reason: str = ""

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "loss", "epoch", "val_rmse", "val_mae"])
            for step, (loss, epoch) in enumerate(zip(self.losses, self.epochs), start=1):
                m = self.val.get(step)
                writer.writerow([step, repr(loss), epoch,
                                 "" if m is None else repr(m.rmse), "" if m is None else repr(m.mae)])


def read_history_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- loss and metrics -----------------------------------------------------------

def huber_loss(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    """Mean Huber loss; quadratic inside ``delta``, linear outside."""
    if delta <= 0:
        raise ContractError(f"huber_loss: delta must be positive, got {delta}")
    if pred.shape != target.shape:
        raise DimensionError(f"huber_loss: pred shape {pred.shape} != target shape {target.shape}")
    x = pred.data - target.data
    ax = np.abs(x)
    inside = ax <= delta
    per = np.where(inside, 0.5 * x * x, delta * (ax - 0.5 * delta))
    n = x.size
    value = per.sum() / n

    def backward(g):
        d = np.where(inside, x, delta * np.sign(x)) * (g / n)
        return d.astype(pred.dtype, copy=False), (-d).astype(target.dtype, copy=False)

    return Tensor.from_op(np.asarray(value, dtype=pred.dtype), (pred, target), backward)


def metrics(predictions, targets) -> Metrics:
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1)
    true = np.asarray(targets, dtype=np.float64).reshape(-1)
    if pred.size == 0:
        raise ContractError("metrics need at least one sample")
    if pred.shape != true.shape:
        raise DimensionError(f"{pred.size} predictions for {true.size} targets")
    err = pred - true
    return Metrics(float(np.sqrt(np.mean(err * err))), float(np.mean(np.abs(err))), int(pred.size))


def predict(model: Module, dataset, batch_size: int = 8) -> np.ndarray:
    """Eval-mode predictions in dataset order."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    out = []
    try:
        for lo in range(0, len(dataset), batch_size):
            rgb, evt, _ = dataset.batch(range(lo, min(lo + batch_size, len(dataset))))
            out.append(model(rgb, evt).data.reshape(-1))
    finally:
        model.train(was_training)
    return np.concatenate(out).astype(np.float64)


def evaluate(model: Module, dataset, batch_size: int = 8) -> Metrics:
    return metrics(predict(model, dataset, batch_size), dataset.targets())


# --- optimiser ------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros(cls, params: Sequence[Tensor]) -> "AdamWState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamWState,
               config: TrainConfig, names: Optional[Sequence[str]] = None) -> AdamWState:
    """One decoupled-decay Adam update, in place on ``params`` and ``state``.

    A missing gradient counts as zero, so the parameter still decays.
    """
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ContractError("optimizer state does not match the parameter list")
    if state.step < 0:
        raise ContractError(f"optimizer step counter is negative ({state.step})")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise NumericHealthError(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    b1, b2, lr = config.beta1, config.beta2, config.learning_rate
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= p.data.dtype.type(1.0 - lr * config.weight_decay)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.data.dtype)
    return state


# --- loop -----------------------------------------------------------------------

def _snapshot(model: Module, step: int, loss: float, path: Optional[Path]) -> str:
    norms = {n: float(np.sqrt(np.sum(np.asarray(p.data, np.float64) ** 2))) for n, p in model.named_parameters()}
    bad = [n for n, p in model.named_parameters() if not np.all(np.isfinite(p.data))]
    info = {"step": step, "loss": repr(loss), "non_finite_parameters": bad, "parameter_norms": norms}
    if path is not None:
        path.write_text(json.dumps(info, indent=2) + "\n")
    return f"loss became {loss} at step {step}; non-finite parameters: {bad[:5] or 'none'}"


def train(model: Module, train_set, val_set, config: TrainConfig, out_dir=None,
          log=None) -> Tuple[Dict[str, np.ndarray], TrainHistory]:
    """Minimise mean Huber loss between predicted and recorded steering.

    Returns the best state (lowest validation RMSE, or the final state
    without a validation set) and the history. With ``out_dir`` the
    history CSV, the best checkpoint and a run manifest are written there.
    """
    config.validate()
    if len(train_set) == 0:
        raise ContractError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    names = [n for n, _ in model.named_parameters()]
    params = model.parameters()
    state = AdamWState.zeros(params)
    history = TrainHistory()
    best_rmse, best_state = math.inf, None
    start = time.perf_counter()
    step = 0
    n = len(train_set)
    model.train()
    history.stop_reason = "epochs"
    for epoch in range(config.epochs):
        order = np.random.default_rng((config.seed, epoch)).permutation(n)
        stop = False
        for lo in range(0, n, config.batch_size):
            rgb, evt, target = train_set.batch(order[lo:lo + config.batch_size].tolist())
            model.zero_grad()
            loss = huber_loss(model(rgb, evt, seed=config.seed * 1_000_003 + step), target, config.huber_delta)
            value = float(loss.item())
            if not math.isfinite(value):
                raise NumericHealthError(_snapshot(model, step + 1, value,
                                                  out / "nan_snapshot.json" if out else None))
            loss.backward()
            adamw_step(params, [p.grad for p in params], state, config, names)
            step += 1
            history.losses.append(value)
            history.epochs.append(epoch)
            history.wall_clock.append(time.perf_counter() - start)
            if config.max_steps is not None and step >= config.max_steps:
                history.stop_reason, stop = "max_steps", True
                break
        if val_set is not None and len(val_set):
            m = evaluate(model, val_set, config.batch_size)
            history.val[step] = m
            if m.rmse < best_rmse:
                best_rmse, best_state = m.rmse, {k: v.copy() for k, v in model.state_dict().items()}
        if config.target_train_mae is not None:
            mae = evaluate(model, train_set, config.batch_size).mae
            history.train_mae[step] = mae
            if mae < config.target_train_mae:
                history.stop_reason, stop = "target_train_mae", True
        if log is not None:
            log(f"epoch {epoch} step {step} loss {history.losses[-1]:.6f}"
                + (f" val_rmse {history.val[step].rmse:.5f}" if step in history.val else "")
                + (f" train_mae {history.train_mae[step]:.5f}" if step in history.train_mae else ""))
        if stop:
            break
    if best_state is None:
        best_state = {k: v.copy() for k, v in model.state_dict().items()}
    if out is not None:
        history.write_csv(out / "history.csv")
        save_checkpoint(out / "checkpoint.bin", best_state)
        manifest = {
            "train_config": config.to_dict(),
            "model_config": model.config.to_dict() if hasattr(model, "config") else None,
            "seed": config.seed,
            "steps": step,
            "stop_reason": history.stop_reason,
            "best_val_rmse": None if best_rmse == math.inf else best_rmse,
            "train_samples": len(train_set),
            "val_samples": 0 if val_set is None else len(val_set),
            "checkpoint_selection": "lowest validation RMSE" if val_set is not None else "final state",
            "wall_clock_s": history.wall_clock[-1] if history.wall_clock else 0.0,
        }
        (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return best_state, history

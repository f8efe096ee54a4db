"""Linear and MLP heads with hand-rolled gradients, AdamW, and training loops.

Everything here is plain numpy in float64. Gradients are exact reverse-mode
(verified against finite differences in the test suite), optimizer state is a
pair of moment dicts, and the two training entry points are deliberately
different: ``train`` runs minibatch epochs at constant learning rate with
early stopping, while ``fewshot_finetune`` runs a fixed number of full-batch
steps under a warmup-cosine schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

HEAD_KINDS = ("linear", "mlp")
LOSS_KINDS = ("mse", "mae", "bce")

FEWSHOT_TOTAL_STEPS = 1600
FEWSHOT_WARMUP_STEPS = 48
FEWSHOT_BASE_LR = 1e-6
FEWSHOT_REFERENCE_BATCH = 16


def fewshot_lr(batch_size: int) -> float:
    """Few-shot learning rate, scaled linearly in the shot batch size."""
    return FEWSHOT_BASE_LR * batch_size / FEWSHOT_REFERENCE_BATCH


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


@dataclass
class Head:
    """A linear or ReLU-MLP head. ``params`` maps layer names to arrays."""

    kind: str
    in_dim: int
    out_dim: int
    hidden: tuple[int, ...]
    params: dict[str, np.ndarray]

    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.in_dim, *self.hidden, self.out_dim] if self.kind == "mlp" else [
            self.in_dim,
            self.out_dim,
        ]
        return list(zip(sizes[:-1], sizes[1:]))

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def meta(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "hidden": list(self.hidden),
            "param_order": list(self.params.keys()),
        }


def init_head(
    kind: str,
    in_dim: int,
    out_dim: int,
    hidden: tuple[int, ...] = (256,),
    seed: int = 0,
) -> Head:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if kind not in HEAD_KINDS:
        raise ValueError(f"unknown head kind {kind!r}")
    if in_dim < 1 or out_dim < 1:
        raise ValueError("head dims must be positive")
    head = Head(kind=kind, in_dim=in_dim, out_dim=out_dim, hidden=tuple(hidden), params={})
    rng = np.random.default_rng(np.random.SeedSequence([seed, in_dim, out_dim]))
    for i, (fan_in, fan_out) in enumerate(head.layer_dims()):
        bound = 1.0 / math.sqrt(fan_in)
        head.params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        head.params[f"b{i}"] = rng.uniform(-bound, bound, size=(fan_out,))
    return head


def forward(head: Head, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return (outputs, activations). activations[i] is the input to layer i."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.in_dim:
        raise ValueError(f"expected inputs of shape (n, {head.in_dim}), got {x.shape}")
    n_layers = len(head.layer_dims())
    acts = [x]
    h = x
    for i in range(n_layers):
        z = h @ head.params[f"W{i}"] + head.params[f"b{i}"]
        if i < n_layers - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return h, acts


def predict(head: Head, x: np.ndarray) -> np.ndarray:
    return forward(head, x)[0]


# ---------------------------------------------------------------------------
# Losses (value + gradient w.r.t. the head output)
# ---------------------------------------------------------------------------


def mse_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean squared error over unmasked cells; mask=None means all cells."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mask is None:
        diff = pred - target
        n = pred.size
        return float(np.mean(diff * diff)), 2.0 * diff / n
    mask = np.asarray(mask, dtype=np.float64)
    total = float(mask.sum())
    if total == 0.0:
        return 0.0, np.zeros_like(pred)
    diff = (pred - target) * mask
    loss = float(np.sum(diff * diff) / total)
    return loss, 2.0 * diff / total


def mae_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = pred - target
    if mask is None:
        return float(np.mean(np.abs(diff))), np.sign(diff) / pred.size
    mask = np.asarray(mask, dtype=np.float64)
    total = float(mask.sum())
    if total == 0.0:
        return 0.0, np.zeros_like(pred)
    return float(np.sum(np.abs(diff) * mask) / total), np.sign(diff) * mask / total


def bce_logits_loss(logits: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Numerically stable binary cross-entropy on logits.

    loss = mean(max(z, 0) - z*y + log1p(exp(-|z|))), grad = (sigmoid(z) - y)/n.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    e = np.exp(-np.abs(z))
    per_cell = np.maximum(z, 0.0) - z * y + np.log1p(e)
    sig = np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    if mask is None:
        return float(np.mean(per_cell)), (sig - y) / z.size
    mask = np.asarray(mask, dtype=np.float64)
    total = float(mask.sum())
    if total == 0.0:
        return 0.0, np.zeros_like(z)
    return float(np.sum(per_cell * mask) / total), (sig - y) * mask / total


_LOSS_FNS: dict[str, Callable[..., tuple[float, np.ndarray]]] = {
    "mse": mse_loss,
    "mae": mae_loss,
    "bce": bce_logits_loss,
}


def loss_and_grad(
    head: Head,
    x: np.ndarray,
    y: np.ndarray,
    loss: str = "mse",
    mask: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Forward, loss, and exact gradients for every parameter of the head."""
    if loss not in _LOSS_FNS:
        raise ValueError(f"unknown loss {loss!r}")
    out, acts = forward(head, x)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    value, delta = _LOSS_FNS[loss](out, y, mask)

    grads: dict[str, np.ndarray] = {}
    n_layers = len(head.layer_dims())
    for i in range(n_layers - 1, -1, -1):
        h_in = acts[i]
        grads[f"W{i}"] = h_in.T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ head.params[f"W{i}"].T) * (acts[i] > 0.0)
    return value, grads


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    lam: float = 1.0,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    theta <- theta - lr*lam*wd*theta - lr*lam*m_hat/(sqrt(v_hat)+eps),
    with bias-corrected moments. Decay comes first and uses the pre-update
    parameter; the schedule factor ``lam`` scales both terms.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p *= 1.0 - lr * lam * weight_decay
        p -= lr * lam * m_hat / (np.sqrt(v_hat) + eps)


def warmup_steps_for(total_steps: int) -> int:
    return max(10, math.floor(0.03 * total_steps))


def lr_lambda(step: int, total_steps: int, warmup_steps: int | None = None) -> float:
    """Warmup-cosine schedule factor with a 0.10 floor.

    Linear warmup (step+1)/warmup for step < warmup, then
    0.10 + 0.90 * (1 + cos(pi * progress)) / 2 over the remaining steps.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    sw = warmup_steps_for(total_steps) if warmup_steps is None else warmup_steps
    if step < sw:
        return (step + 1) / sw
    progress = (step - sw) / (total_steps - sw)
    return 0.10 + 0.90 * (1.0 + math.cos(math.pi * progress)) / 2.0


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainCfg:
    loss: str = "mse"
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0


@dataclass
class TrainResult:
    head: Head
    history: list[dict[str, float]]
    best_val: float
    best_epoch: int


def _eval_loss(head: Head, x: np.ndarray, y: np.ndarray, loss: str, mask: np.ndarray | None) -> float:
    out, _ = forward(head, x)
    yy = np.asarray(y, dtype=np.float64)
    if yy.ndim == 1:
        yy = yy[:, None]
    value, _ = _LOSS_FNS[loss](out, yy, mask)
    return value


def train(
    head: Head,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    cfg: TrainCfg,
    mask_train: np.ndarray | None = None,
    mask_val: np.ndarray | None = None,
) -> TrainResult:
    """Minibatch AdamW at constant learning rate with early stopping.

    Stops after ``patience`` epochs without a validation improvement and
    restores the best parameters. Epoch order is a seeded permutation, so the
    whole run is deterministic.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    n = x_train.shape[0]
    if n == 0:
        raise ValueError("empty training set")

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, n]))
    state = AdamWState()
    history: list[dict[str, float]] = []
    best_val = math.inf
    best_epoch = -1
    best_params = head.copy_params()
    since_best = 0

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            mb_mask = mask_train[idx] if mask_train is not None else None
            value, grads = loss_and_grad(head, x_train[idx], y_train[idx], cfg.loss, mb_mask)
            adamw_step(head.params, grads, state, cfg.lr, 1.0, cfg.weight_decay)
            epoch_loss += value
            n_batches += 1

        val = _eval_loss(head, x_val, y_val, cfg.loss, mask_val)
        history.append(
            {"epoch": float(epoch), "train_loss": epoch_loss / n_batches, "val_loss": val}
        )
        if val < best_val - 1e-12:
            best_val = val
            best_epoch = epoch
            best_params = head.copy_params()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    head.params = best_params
    return TrainResult(head=head, history=history, best_val=best_val, best_epoch=best_epoch)


def fewshot_finetune(
    head: Head,
    x_shots: np.ndarray,
    y_shots: np.ndarray,
    loss: str = "bce",
    weight_decay: float = 0.01,
    total_steps: int = FEWSHOT_TOTAL_STEPS,
    warmup_steps: int = FEWSHOT_WARMUP_STEPS,
) -> tuple[Head, list[dict[str, float]]]:
    """Full-batch adaptation on a handful of labeled windows.

    Runs ``total_steps`` AdamW updates on the entire shot set with the
    warmup-cosine schedule and the batch-scaled few-shot learning rate. Every
    parameter of the head is updated.
    """
    x_shots = np.asarray(x_shots, dtype=np.float64)
    y_shots = np.asarray(y_shots, dtype=np.float64)
    if x_shots.shape[0] == 0:
        raise ValueError("empty shot set")
    lr = fewshot_lr(x_shots.shape[0])
    state = AdamWState()
    history: list[dict[str, float]] = []
    for step in range(total_steps):
        lam = lr_lambda(step, total_steps, warmup_steps)
        value, grads = loss_and_grad(head, x_shots, y_shots, loss)
        adamw_step(head.params, grads, state, lr, lam, weight_decay)
        if step % 100 == 0 or step == total_steps - 1:
            history.append({"step": float(step), "loss": value, "lam": lam})
    return head, history

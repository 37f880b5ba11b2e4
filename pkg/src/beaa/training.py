"""Teacher/student training: cross-entropy, knowledge distillation and Nesterov updates."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .model import Network, PolyAct, ReLU

METRIC_COLUMNS = ("epoch", "hard_loss", "distill_loss", "total_loss", "train_acc", "val_acc",
                  "epoch_seconds")
TIMING_COLUMNS = ("epoch_seconds",)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    reg_lambda: float = 5e-4
    reg_weights: bool = False
    temperature: float = 4.0
    distill_alpha: float = 0.5
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    bn_momentum: float = 0.1
    grad_clip: float | None = 5.0
    augment: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be nonnegative")
        if self.temperature < 1:
            raise ValueError("temperature must be >= 1")
        if not 0 <= self.distill_alpha <= 1:
            raise ValueError("distill_alpha must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    step: int = 0


@dataclass(frozen=True)
class LossReport:
    hard_loss: float
    distill_loss: float
    total_loss: float
    accuracy: float


def softmax_with_temperature(logits, T=1.0):
    z = np.asarray(logits, dtype=np.float64)
    if T <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = z / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    return float(-np.mean(_log_softmax(logits)[np.arange(len(labels)), labels]))


def kd_loss(student_logits, teacher_logits, labels, T=1.0, distill_alpha=0.0):
    """Loss report and d(total)/d(student_logits), averaged over the batch.

    The distillation term is the cross entropy of the student's temperature-T
    prediction against the teacher's temperature-T soft target.  With no
    teacher the total is the hard-label cross entropy.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    labels = np.asarray(labels)
    if s.ndim != 2 or labels.shape != (s.shape[0],):
        raise ValueError("student logits must be (M, classes) with M labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("logits must be finite")
    m = s.shape[0]
    rows = np.arange(m)
    p = softmax_with_temperature(s, 1.0)
    hard = float(-np.mean(_log_softmax(s)[rows, labels]))
    d_hard = p.copy()
    d_hard[rows, labels] -= 1.0
    d_hard /= m
    acc = float(np.mean(np.argmax(s, axis=1) == labels))
    if teacher_logits is None:
        return LossReport(hard, 0.0, hard, acc), d_hard
    t = np.asarray(teacher_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError("teacher and student logits differ in shape")
    q = softmax_with_temperature(t, T)
    distill = float(-np.mean(np.sum(q * _log_softmax(s / T), axis=1)))
    d_distill = (softmax_with_temperature(s, T) - q) / (T * m)
    a = float(distill_alpha)
    w = a * T * T
    total = w * distill + (1.0 - a) * hard
    return LossReport(hard, distill, total, acc), w * d_distill + (1.0 - a) * d_hard


def l2_penalty(param, reg_lambda) -> float:
    return 0.5 * reg_lambda * float(np.sum(np.square(param)))


def regularized_grad(raw_grad, param, reg_lambda):
    """Gradient of ``J + lambda/2 * ||c||^2`` given the gradient of ``J``."""
    raw_grad = np.asarray(raw_grad)
    if raw_grad.shape != np.shape(param):
        raise ValueError("gradient and parameter shapes differ")
    return raw_grad + reg_lambda * np.asarray(param)


def nesterov_step(state: OptimizerState, params: dict, grad_fn, lr: float, mu: float):
    """One Nesterov update with the gradient taken at the look-ahead point.

    ``V_t = mu*V_{t-1} - lr*grad(c + mu*V_{t-1})`` and ``c <- c + V_t``.
    Returns ``(new_params, new_state, aux)`` where ``aux`` is whatever
    ``grad_fn`` returned alongside the gradients.
    """
    vel = {k: state.velocity.get(k, np.zeros_like(v)) for k, v in params.items()}
    ahead = {k: params[k] + mu * vel[k] for k in params}
    out = grad_fn(ahead)
    grads, aux = out if isinstance(out, tuple) else (out, None)
    new_vel = {k: mu * vel[k] - lr * grads[k] for k in params}
    new_params = {k: params[k] + new_vel[k] for k in params}
    return new_params, OptimizerState(new_vel, state.step + 1), aux


def _is_coeff(name: str) -> bool:
    return name.endswith(".coeffs")


def _augment(x, rng):
    """Random horizontal flip and 4-pixel padded crop."""
    m, _, h, w = x.shape
    flip = rng.random(m) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    pad = 4
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, m)
    dx = rng.integers(0, 2 * pad + 1, m)
    return np.stack([xp[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(m)])


def predict(net: Network, x, batch_size=256) -> np.ndarray:
    out = [net.forward(x[i:i + batch_size], False)[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.num_classes))


def evaluate(net: Network, x, y, batch_size=256) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(np.argmax(predict(net, x, batch_size), axis=1) == np.asarray(y)))


def _has(net, cls):
    from .model import Fire

    def visit(children):
        for _, layer in children:
            if isinstance(layer, cls):
                return True
            if isinstance(layer, Fire) and visit(layer.children()):
                return True
        return False

    return visit(net.layers)


def train(net: Network, dataset, config: TrainConfig, teacher: Network | None = None,
          metrics_path=None, log=None):
    """Minibatch training; returns ``(trained_copy, metrics_rows)``."""
    net = net.copy()
    rows = []
    if config.epochs == 0:
        if metrics_path:
            write_metrics_csv(metrics_path, rows)
        return net, rows
    rng = np.random.default_rng(config.seed)
    state = OptimizerState()
    params = net.parameters()
    x_all, y_all = dataset.x_train, dataset.y_train
    n = len(x_all)
    if n == 0:
        raise ValueError("training split is empty")
    x_val, y_val = dataset.x_val, dataset.y_val
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if config.augment:
                xb = _augment(xb, rng)
            t_logits = teacher.forward(xb, False)[0] if teacher is not None else None

            def grad_fn(p):
                net.set_parameters(p)
                logits, caches = net.forward(xb, True)
                if not np.all(np.isfinite(logits)):
                    raise TrainingDiverged(f"non-finite logits in epoch {epoch}")
                report, dlogits = kd_loss(logits, t_logits, yb, config.temperature,
                                          config.distill_alpha)
                grads = net.backward(dlogits.astype(logits.dtype, copy=False), caches)
                for k in grads:
                    if _is_coeff(k) or config.reg_weights:
                        grads[k] = regularized_grad(grads[k], p[k], config.reg_lambda)
                if config.grad_clip:
                    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                    if norm > config.grad_clip:
                        grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}
                return grads, (report, caches)

            params, state, (report, caches) = nesterov_step(
                state, params, grad_fn, config.learning_rate, config.momentum)
            if not math.isfinite(report.total_loss) or not all(
                    np.all(np.isfinite(v)) for v in params.values()):
                raise TrainingDiverged(f"non-finite loss or parameters in epoch {epoch}")
            net.update_bn_stats(caches, config.bn_momentum)
            k = len(idx)
            sums += k * np.array([report.hard_loss, report.distill_loss, report.total_loss,
                                  report.accuracy])
        net.set_parameters(params)
        hard, distill, total, acc = (float(v) for v in sums / n)
        row = {"epoch": epoch, "hard_loss": hard, "distill_loss": distill, "total_loss": total,
               "train_acc": acc, "val_acc": evaluate(net, x_val, y_val),
               "epoch_seconds": time.perf_counter() - t0}
        rows.append(row)
        if log:
            log(row)
    if metrics_path:
        write_metrics_csv(metrics_path, rows)
    return net, rows


def train_teacher(net: Network, dataset, config: TrainConfig, metrics_path=None, log=None):
    """Train a ReLU network on hard labels."""
    if _has(net, PolyAct) or not _has(net, ReLU):
        raise ValueError("teacher network must use ReLU activations")
    return train(net, dataset, config, None, metrics_path, log)


def train_student(net: Network, dataset, config: TrainConfig, teacher: Network | None = None,
                  metrics_path=None, log=None):
    """Train a polynomial network; distills from ``teacher`` when one is given."""
    if _has(net, ReLU) or not _has(net, PolyAct):
        raise ValueError("student network must use polynomial activations")
    if teacher is not None and teacher.num_classes != net.num_classes:
        raise ValueError("teacher and student class counts differ")
    return train(net, dataset, config, teacher, metrics_path, log)


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]

"""Adam/AdamW over trainable parameters, plus learning-rate schedules."""

import math

import numpy as np

from .errors import ConfigError

COSINE_ANNEAL = "cosine_anneal"
WARMUP_COSINE = "warmup_cosine"
SCHEDULES = (COSINE_ANNEAL, WARMUP_COSINE)
WARMUP_FRACTION = 0.10


def lr_at(schedule, step, total_steps, base_lr):
    """Learning rate at a step in [0, total_steps].

    cosine_anneal: base * (1 + cos(pi * step/total)) / 2.
    warmup_cosine: linear 0 -> base over the first 10% of steps, then cosine
    to zero over the remainder.
    """
    if schedule not in SCHEDULES:
        raise ConfigError(f"unknown schedule {schedule!r}; known: {SCHEDULES}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if schedule == COSINE_ANNEAL:
        return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
    warm = WARMUP_FRACTION * total_steps
    if step <= warm and warm > 0:
        return base_lr * step / warm
    return base_lr * (1.0 + math.cos(math.pi * (step - warm) / (total_steps - warm))) / 2.0


class Adam:
    """Adam, or AdamW when decoupled=True.

    Moment accumulators are created lazily and only for trainable parameters;
    frozen parameters are never read or written. With decoupled=False a
    nonzero weight_decay is folded into the gradient (L2 style); with
    decoupled=True it directly shrinks the weights before the update.
    """

    def __init__(self, model, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8, decoupled=False):
        self.model = model
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.decoupled = bool(decoupled)
        self.step_count = 0
        self.exp_avg = {}
        self.exp_avg_sq = {}

    def set_lr(self, lr):
        self.lr = float(lr)

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for path, param in self.model.params.items():
            if not param.trainable:
                continue
            g = param.tensor.grad
            if g is None:
                continue
            data = param.tensor.data
            if self.weight_decay:
                if self.decoupled:
                    data *= 1.0 - self.lr * self.weight_decay
                else:
                    g = g + self.weight_decay * data
            if path not in self.exp_avg:
                self.exp_avg[path] = np.zeros_like(data)
                self.exp_avg_sq[path] = np.zeros_like(data)
            m = self.exp_avg[path]
            v = self.exp_avg_sq[path]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self):
        return {
            "step_count": self.step_count,
            "exp_avg": {k: v.copy() for k, v in self.exp_avg.items()},
            "exp_avg_sq": {k: v.copy() for k, v in self.exp_avg_sq.items()},
        }

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"])
        self.exp_avg = {k: np.array(v, dtype=np.float64) for k, v in state["exp_avg"].items()}
        self.exp_avg_sq = {k: np.array(v, dtype=np.float64) for k, v in state["exp_avg_sq"].items()}


def make_optimizer(model, name, lr, weight_decay=0.0):
    name = name.lower()
    if name == "adam":
        return Adam(model, lr, weight_decay, decoupled=False)
    if name == "adamw":
        return Adam(model, lr, weight_decay, decoupled=True)
    raise ConfigError(f"unknown optimizer {name!r}; known: adam, adamw")

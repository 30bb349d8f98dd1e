"""Training loops: reconstruction pre-training, PEFT fine-tuning, evaluation.

The objective throughout is MSE from the short scan to the long scan. Every
epoch evaluates the validation set; the run tracks the epoch with the best
validation PSNR (ties resolve to the earlier epoch) and by default restores
those weights at the end. Loops are deterministic functions of (model state,
data, hyperparameters, seed).
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import mixpeft
from . import tensor as T
from .errors import ConfigError, NumericError
from .metrics import MetricReport, nrmse, psnr, ssim3d
from .models import forward
from .optim import COSINE_ANNEAL, Adam, lr_at, make_optimizer
from .tensor import Tensor, find_first_nan

HISTORY_COLUMNS = ("epoch", "train_loss", "val_psnr", "val_ssim", "val_nrmse", "lr")


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    optimizer: str = "adam"
    schedule: str = COSINE_ANNEAL
    epochs: int = 15
    batch_size: int = 6
    seed: int = 0

    def __post_init__(self):
        # learning_rate 0 is allowed for no-op probes.
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"bad hyperparameters: {self}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_psnr: float
    val_ssim: float
    val_nrmse: float
    lr: float

    def row(self):
        return [repr(float(getattr(self, c))) if c != "epoch" else str(self.epoch) for c in HISTORY_COLUMNS]


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_psnr: float = -math.inf


def history_to_csv(records):
    lines = [",".join(HISTORY_COLUMNS)]
    lines += [",".join(r.row()) for r in records]
    return "\n".join(lines) + "\n"


def evaluate(model, dataset):
    """Mean PSNR/SSIM/NRMSE over a dataset; model may be a Model or a callable."""
    if not dataset:
        raise ConfigError("cannot evaluate an empty dataset")
    predictor = model if callable(model) else (lambda vol: forward(model, Tensor(vol[None])).data[0])
    scores = {"psnr": [], "ssim": [], "nrmse": []}
    for sample in dataset:
        pred = predictor(sample.short_scan)
        scores["psnr"].append(psnr(pred, sample.long_scan))
        scores["ssim"].append(ssim3d(pred, sample.long_scan))
        scores["nrmse"].append(nrmse(pred, sample.long_scan))
    mean = lambda xs: float(np.mean(xs))
    return MetricReport(mean(scores["psnr"]), mean(scores["ssim"]), mean(scores["nrmse"]), len(dataset))


def _batches(order, batch_size):
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _train_epochs(model, train_set, val_set, hp, opt, rng, start_epoch=0, on_epoch=None, result=None):
    """Run epochs start_epoch+1 .. hp.epochs; mutates model/opt/rng in place."""
    result = result if result is not None else TrainResult()
    best_params = None
    for epoch in range(start_epoch + 1, hp.epochs + 1):
        lr = lr_at(hp.schedule, epoch - 1, hp.epochs, hp.learning_rate)
        opt.set_lr(lr)
        order = [int(i) for i in rng.permutation(len(train_set))]
        loss_sum, n_seen = 0.0, 0
        for batch in _batches(order, hp.batch_size):
            model.zero_grads()
            total = None
            for idx in batch:
                sample = train_set[idx]
                pred = forward(model, Tensor(sample.short_scan[None]))
                loss = T.mse_loss(pred, Tensor(sample.long_scan[None]))
                total = loss if total is None else total + loss
            batch_loss = total * (1.0 / len(batch))
            if not np.isfinite(batch_loss.data):
                culprit = find_first_nan(batch_loss)
                where = f"op {culprit[0]} with output shape {culprit[1]}" if culprit else "an unknown op"
                raise NumericError(f"non-finite loss at epoch {epoch}; first produced by {where}")
            T.backward(batch_loss)
            opt.step()
            loss_sum += batch_loss.item() * len(batch)
            n_seen += len(batch)
        report = evaluate(model, val_set)
        result.history.append(
            EpochRecord(epoch, loss_sum / n_seen, report.psnr, report.ssim, report.nrmse, lr)
        )
        if report.psnr > result.best_psnr:
            result.best_psnr = report.psnr
            result.best_epoch = epoch
            best_params = model.state_arrays()
        if on_epoch is not None:
            on_epoch(epoch, model, opt, rng)
    return result, best_params


def _restore(model, arrays):
    for path, values in arrays.items():
        model.params[path].tensor.data[...] = values


def pretrain(model, train_set, val_set, hp, on_epoch=None, restore_best=True):
    """Train all parameters from scratch on short->long reconstruction."""
    frozen = [p.path for p in model.params.values() if not p.trainable]
    if frozen:
        raise ConfigError(f"pretrain expects a fully trainable model; frozen: {frozen[:3]}...")
    opt = make_optimizer(model, hp.optimizer, hp.learning_rate, hp.weight_decay)
    rng = np.random.default_rng(hp.seed)
    result, best = _train_epochs(model, train_set, val_set, hp, opt, rng, on_epoch=on_epoch)
    if restore_best and best is not None:
        _restore(model, best)
    return result


def peft_finetune(model, plan, train_set, val_set, hp, on_epoch=None, restore_best=True):
    """Compose a plan onto a pre-trained model, then train the unfrozen subset.

    A no-ft plan (or any plan with nothing trainable) skips training and
    records a single evaluation row at epoch 0.
    """
    model, report = mixpeft.compose(plan, model, seed=hp.seed)
    if model.trainable_count() == 0:
        metrics = evaluate(model, val_set)
        result = TrainResult(
            history=[EpochRecord(0, math.nan, metrics.psnr, metrics.ssim, metrics.nrmse, 0.0)],
            best_epoch=0,
            best_psnr=metrics.psnr,
        )
        return result, report
    opt = make_optimizer(model, hp.optimizer, hp.learning_rate, hp.weight_decay)
    rng = np.random.default_rng(hp.seed)
    result, best = _train_epochs(model, train_set, val_set, hp, opt, rng, on_epoch=on_epoch)
    if restore_best and best is not None:
        _restore(model, best)
    return result, report


def resume_training(model, opt, rng, train_set, val_set, hp, start_epoch, on_epoch=None, restore_best=False):
    """Continue an interrupted run; reproduces the uninterrupted trajectory."""
    result, best = _train_epochs(
        model, train_set, val_set, hp, opt, rng, start_epoch=start_epoch, on_epoch=on_epoch
    )
    if restore_best and best is not None:
        _restore(model, best)
    return result


def hyperparams_to_dict(hp):
    return asdict(hp)

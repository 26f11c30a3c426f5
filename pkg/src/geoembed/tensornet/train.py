"""Adam optimizer and the plateau-scheduled training loop.

The learning rate starts at 0.001 and divides by 10 whenever the watched
(validation) loss has not improved for plateau_patience consecutive epochs;
training stops on the fifth reduction. Best-validation parameters are
retained and restored at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteLoss(FloatingPointError):
    """Training aborted on a NaN or infinite loss."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    seed: int = 0
    lr0: float = 1e-3
    plateau_patience: int = 10
    lr_factor: float = 10.0
    max_reductions: int = 5
    weight_decay: float = 0.0
    max_epochs: int = 10_000

    def __post_init__(self):
        if min(self.batch_size, self.plateau_patience, self.max_reductions) < 1:
            raise ValueError("batch_size, patience and reductions must be positive")
        if self.lr0 <= 0 or self.lr_factor <= 1:
            raise ValueError("lr0 must be positive and lr_factor > 1")


class Adam:
    """Standard bias-corrected Adam over a list of (key, array) parameters."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {key: np.zeros_like(arr) for key, arr in self.params}
        self.v = {key: np.zeros_like(arr) for key, arr in self.params}

    def step(self, grads: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for key, arr in self.params:
            g = grads[key]
            if weight_decay:
                g = g + weight_decay * arr
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    reductions: int


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    reduction_epochs: list[int] = field(default_factory=list)
    best_val_loss: float = np.inf
    best_epoch: int = -1
    stopped_reason: str = ""

    def as_rows(self) -> list[tuple]:
        return [
            (r.epoch, r.train_loss, r.val_loss, r.lr, r.reductions)
            for r in self.epochs
        ]


def train_loop(model, train_data, val_data, config: TrainConfig) -> TrainLog:
    """Run the plateau-scheduled loop until five reductions or max_epochs.

    model must provide parameters(), loss_and_grads(x, t) -> (loss, grads
    dict) and eval_loss(x, t) -> loss. train_data and val_data are (inputs,
    targets) arrays indexed along axis 0. Improvement is a strict decrease
    of the validation loss; the parameters achieving the best validation
    loss are restored into the model when the loop exits.
    """
    x_train, t_train = train_data
    x_val, t_val = val_data
    n = x_train.shape[0]
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.parameters())
    lr = config.lr0
    log = TrainLog()
    best_state: dict[str, np.ndarray] | None = None
    since_improvement = 0
    reductions = 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            if len(batch) == 1:
                continue  # a singleton batch cannot be batch-normalized
            loss, grads = model.loss_and_grads(x_train[batch], t_train[batch])
            if not np.isfinite(loss):
                raise NonFiniteLoss(
                    f"epoch {epoch}: loss {loss!r}; suspect saturation, try a "
                    f"smaller weight_std or a different seed"
                )
            optimizer.step(grads, lr, config.weight_decay)
            batch_losses.append(loss)
        train_loss = float(np.mean(batch_losses))
        val_loss = float(model.eval_loss(x_val, t_val))
        if not np.isfinite(val_loss):
            raise NonFiniteLoss(f"epoch {epoch}: validation loss {val_loss!r}")
        log.epochs.append(EpochRecord(epoch, train_loss, val_loss, lr, reductions))

        if val_loss < log.best_val_loss:
            log.best_val_loss = val_loss
            log.best_epoch = epoch
            best_state = {k: arr.copy() for k, arr in model.state_arrays().items()}
            # The first epoch only sets the baseline; a decrease needs a
            # prior epoch, so the plateau counter starts at 1 here.
            since_improvement = 1 if epoch == 1 else 0
        else:
            since_improvement += 1

        if since_improvement >= config.plateau_patience:
            lr /= config.lr_factor
            reductions += 1
            log.reduction_epochs.append(epoch)
            since_improvement = 0
            if reductions >= config.max_reductions:
                log.stopped_reason = "max_reductions"
                break
    else:
        log.stopped_reason = "max_epochs"

    if best_state is not None:
        model.load_state_arrays(best_state)
    return log

"""Distillation onto the target network from a memory-bank teacher.

The teacher is a per-sample store of probability rows, initialized from
black-box source predictions and blended with the student's own full-set
predictions after every epoch (exponential moving average). Each training
step minimizes

    KL(teacher row || student) + beta * mixup consistency - mutual information

and the optimizer state, batch order, and mixup draws are all derived from
one seeded generator, so a run is reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .nets import make_sgd, minibatch_indices
from .tensor import GradTape, Tensor, as_tensor, log_clamped, softmax, stop_recording


def _check_rows(rows: np.ndarray, name: str, tol: float = 1e-6):
    if rows.ndim != 2:
        raise ContractError(f"{name} must be a 2-D array of probability rows, got shape {rows.shape}")
    if rows.min() < -1e-12:
        raise ContractError(f"{name} has negative entries (min={rows.min()})")
    sums = rows.sum(axis=1)
    worst = np.abs(sums - 1.0).max() if len(sums) else 0.0
    if worst > tol:
        raise ContractError(f"{name} rows must sum to 1 within {tol}, worst deviation {worst}")


class MemoryBank:
    """Per-sample teacher probability rows, one row per target sample.

    The row count is fixed at construction; `ema_update` blends in fresh
    full-set student predictions without ever changing the sample set.
    """

    def __init__(self, rows):
        rows = np.asarray(rows, dtype=np.float64)
        _check_rows(rows, "bank rows")
        self.rows = rows.copy()
        self.epoch = 0

    def __len__(self):
        return self.rows.shape[0]

    @property
    def num_classes(self) -> int:
        return self.rows.shape[1]

    def ema_update(self, fresh_probs, gamma: float):
        """rows <- gamma*rows + (1-gamma)*fresh, one fresh row per sample.

        gamma=1 keeps the bank bit-identical; gamma=0 replaces it outright.
        """
        if not 0.0 <= gamma <= 1.0:
            raise ContractError(f"gamma must lie in [0, 1], got {gamma}")
        fresh = np.asarray(fresh_probs, dtype=np.float64)
        if fresh.shape != self.rows.shape:
            raise ContractError(
                f"fresh predictions must cover every bank row: expected {self.rows.shape}, got {fresh.shape}"
            )
        _check_rows(fresh, "fresh predictions")
        self.rows = gamma * self.rows + (1.0 - gamma) * fresh
        _check_rows(self.rows, "bank rows")
        self.epoch += 1


@dataclass
class AdaptConfig:
    """Hyper-parameters for the distillation phase.

    `seed` may be anything numpy's default_rng accepts (int or a list of
    ints); `drop_mi` removes the mutual-information term from the step
    objective, and beta=0 removes the mixup term.
    """

    beta: float = 1.0
    gamma: float = 0.6
    mixup_alpha: float = 0.3
    r: int = 1
    epochs: int = 30
    batch_size: int = 64
    seed: object = 2020
    drop_mi: bool = False
    lr_backbone: float = 1e-3

    def validate(self, num_classes: int):
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.beta < 0.0:
            raise ContractError(f"beta must be nonnegative, got {self.beta}")
        if self.mixup_alpha <= 0.0:
            raise ContractError(f"mixup_alpha must be positive, got {self.mixup_alpha}")
        if not 1 <= self.r <= num_classes:
            raise ContractError(f"r must lie in [1, {num_classes}], got {self.r}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size < 2:
            raise ContractError(f"batch_size must be at least 2, got {self.batch_size}")


def soft_cross_entropy(targets, probs: Tensor) -> Tensor:
    """-mean_i sum_k t_ik log p_ik with constant soft targets."""
    t = as_tensor(targets)
    if t.shape != probs.shape:
        raise DimensionError(f"targets {t.shape} vs predictions {probs.shape}")
    return -((t * log_clamped(probs)).sum(axis=-1).mean())


def distill_loss(bank_rows, student_probs: Tensor) -> Tensor:
    """Mean over the batch of KL(bank row || student row).

    The bank rows are constants; the gradient reaches the student only.
    """
    t = as_tensor(bank_rows)
    if t.shape != student_probs.shape:
        raise DimensionError(f"bank rows {t.shape} vs student {student_probs.shape}")
    _check_rows(t.data, "bank rows")
    _check_rows(student_probs.data, "student rows")
    per_sample = (t * (log_clamped(t) - log_clamped(student_probs))).sum(axis=-1)
    return per_sample.mean()


def mixup_loss(net, batch, rng, alpha: float = 0.3, probs=None, mode: str = "train", lam=None) -> Tensor:
    """Interpolation-consistency term.

    One lambda ~ Beta(alpha, alpha) is drawn per batch, each sample is
    paired with a random permutation partner, and the prediction at the
    mixed input is pulled (soft cross entropy) toward the same mixture of
    the stop-gradient endpoint predictions. Pass `probs` to reuse an
    already-computed clean forward; pass `lam` to force the mixing weight
    (the permutation is still drawn from `rng`).
    """
    x = np.asarray(batch, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ContractError(f"mixup needs at least 2 samples, got {n}")
    lam = float(rng.beta(alpha, alpha)) if lam is None else float(lam)
    perm = rng.permutation(n)
    if probs is None:
        with stop_recording():
            endpoint = softmax(net.forward(x, mode=mode, update_stats=False)).data
    else:
        endpoint = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    targets = lam * endpoint + (1.0 - lam) * endpoint[perm]
    x_mix = lam * x + (1.0 - lam) * x[perm]
    mixed_pred = softmax(net.forward(x_mix, mode=mode, update_stats=False))
    return soft_cross_entropy(targets, mixed_pred)


def mi_loss(student_probs) -> Tensor:
    """Entropy of the mean prediction minus the mean per-sample entropy.

    Nonnegative, at most log K; larger values mean confident predictions
    spread across classes. This term is maximized, so it enters the step
    objective with a minus sign.
    """
    p = as_tensor(student_probs)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ContractError(f"expected a nonempty batch of probability rows, got shape {p.shape}")
    _check_rows(p.data, "student rows")
    mean_p = p.mean(axis=0)
    marginal = -((mean_p * log_clamped(mean_p)).sum())
    conditional = -((p * log_clamped(p)).sum(axis=-1).mean())
    return marginal - conditional


def total_loss(cfg: AdaptConfig, bank_rows, net, batch, rng):
    """One step objective: distill + beta*mixup - MI, on a single tape.

    Returns the scalar loss and a dict of the (float) term values. The
    clean forward runs in train mode and refreshes batch-norm running
    statistics; the two mixup forwards never touch them.
    """
    logits = net.forward(batch, mode="train")
    probs = softmax(logits)
    l_kd = distill_loss(bank_rows, probs)
    if cfg.beta != 0.0:
        l_mix = mixup_loss(net, batch, rng, alpha=cfg.mixup_alpha, probs=probs)
    else:
        l_mix = Tensor(0.0)
    l_im = Tensor(0.0) if cfg.drop_mi else mi_loss(probs)
    loss = l_kd + Tensor(cfg.beta) * l_mix - l_im
    return loss, {"kd": l_kd.item(), "mix": l_mix.item(), "mi": l_im.item()}


def _batches_per_epoch(n: int, batch_size: int) -> int:
    # trailing batches of a single sample are dropped (batch norm needs >= 2)
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 else 0)


def run_distillation(cfg: AdaptConfig, bank: MemoryBank, net, features, eval_fn=None) -> list[dict]:
    """Run the distillation phase in place; returns per-epoch metrics.

    Per epoch: shuffled mini-batches, each minimizing `total_loss` with one
    SGD step (scheduler progress = global step fraction); then an eval-mode
    forward over the whole set, in sample order, feeds the bank's EMA
    update. `eval_fn`, when given, is called with the net after the bank
    update and its value is recorded as that epoch's accuracy; training
    itself never sees labels.
    """
    x = np.asarray(features, dtype=np.float64)
    cfg.validate(net.num_classes)
    n = x.shape[0]
    if len(bank) != n or bank.num_classes != net.num_classes:
        raise ContractError(
            f"bank shape {bank.rows.shape} does not match {n} samples x {net.num_classes} classes"
        )
    rng = np.random.default_rng(cfg.seed)
    opt = make_sgd(net, lr_backbone=cfg.lr_backbone)
    total_steps = max(1, cfg.epochs * _batches_per_epoch(n, cfg.batch_size))
    step = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        sums = {"loss": 0.0, "kd": 0.0, "mix": 0.0, "mi": 0.0}
        nbatches = 0
        for idx in minibatch_indices(n, cfg.batch_size, rng, min_size=2):
            with GradTape() as tape:
                loss, parts = total_loss(cfg, bank.rows[idx], net, x[idx], rng)
            grads = tape.gradient(loss, opt.params)
            opt.step(grads, progress=step / total_steps)
            net.post_update()
            step += 1
            nbatches += 1
            sums["loss"] += loss.item()
            for key in ("kd", "mix", "mi"):
                sums[key] += parts[key]
        fresh = net.predict_proba(x)
        bank.ema_update(fresh, cfg.gamma)
        record = {"phase": "distill", "epoch": epoch}
        for key, total in sums.items():
            record[key] = total / max(1, nbatches)
        if eval_fn is not None:
            record["accuracy"] = float(eval_fn(net))
        history.append(record)
    return history

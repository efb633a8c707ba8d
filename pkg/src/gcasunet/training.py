"""Loss, AdamW with warm-up schedule, count metrics, training loop and ablation runner."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .autodiff import backward
from .model import GCASUNet, ModelConfig, TOGGLES, build_model

logger = logging.getLogger(__name__)

DECAY_MODES = ("lr", "weight_decay")


class TrainingError(RuntimeError):
    pass


class NonFiniteGradientError(TrainingError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite training loss {value} in epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    """Optimiser and schedule settings.

    ``decay_rate`` is a per-epoch multiplicative learning-rate decay after
    warm-up when ``decay_mode="lr"``; with ``decay_mode="weight_decay"`` it is
    used as the AdamW decoupled weight-decay coefficient instead and the
    learning rate stays flat after warm-up.
    """

    lr: float = 0.003
    decay_rate: float = 0.95
    decay_mode: str = "lr"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    warmup_epochs: int = 5
    total_epochs: int = 30
    seed: int = 0
    loss_scale: float = 1000.0
    grad_clip: float = 1.0
    sigma: float = 2.0
    flip_augment: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.total_epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.total_epochs > 0 and self.warmup_epochs >= self.total_epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} must be < total_epochs {self.total_epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_mode not in DECAY_MODES:
            raise ValueError(f"decay_mode must be one of {DECAY_MODES}")

    @property
    def effective_weight_decay(self) -> float:
        return self.decay_rate if self.decay_mode == "weight_decay" else self.weight_decay


# ---------------------------------------------------------------------------
# loss / schedule / optimiser


def density_loss(pred: torch.Tensor, target: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """``scale`` times the mean squared pixel error."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")
    return scale * ((pred - target) ** 2).mean()


def lr_schedule(t: int, tc: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Learning rate for optimiser step ``t`` (the first step is ``t = 1``).

    Linear warm-up to ``tc.lr`` over ``warmup_epochs * steps_per_epoch``
    steps (``t = 0`` gives 0, step 1 gives ``lr / warmup_steps``), then
    ``lr * decay_rate ** k`` in ``lr`` decay mode, where ``k`` counts the
    post-warm-up epochs completed before the current step's epoch.
    """
    if t < 0:
        raise ValueError("step must be >= 0")
    warm = tc.warmup_epochs * steps_per_epoch
    if t < warm:
        return tc.lr * t / warm
    if tc.decay_mode != "lr":
        return tc.lr
    return tc.lr * tc.decay_rate ** (max(t - 1 - warm, 0) // steps_per_epoch)


def init_adamw_state(params: Sequence[torch.Tensor]) -> Dict[str, object]:
    return {
        "step": 0,
        "m": [torch.zeros_like(p) for p in params],
        "v": [torch.zeros_like(p) for p in params],
    }


@torch.no_grad()
def adamw_step(params: Sequence[torch.Tensor], grads: Sequence[Optional[torch.Tensor]], state: Dict[str, object],
               t: int, tc: TrainConfig, lr: Optional[float] = None, steps_per_epoch: int = 1):
    """One decoupled-weight-decay Adam update, in place.

    ``t`` is the 1-based step used for bias correction and the schedule. The
    whole step is rejected if any gradient is non-finite.
    """
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise ValueError("params, grads and optimiser state have different lengths")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient {i} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for parameter {i} at step {t}")
    lr = lr_schedule(t, tc, steps_per_epoch) if lr is None else lr
    wd = tc.effective_weight_decay
    b1, b2 = tc.beta1, tc.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = torch.zeros_like(p)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        step = (m / c1) / (torch.sqrt(v / c2) + tc.eps)
        if wd:
            p.sub_(p, alpha=lr * wd)
        p.sub_(step, alpha=lr)
    state["step"] = t
    return params, state


def clip_grad_norm(grads: Sequence[Optional[torch.Tensor]], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads if g is not None))
    if max_norm and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g.mul_(factor)
    return total


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    mae: float
    rmse: float
    per_image: List[Tuple[float, float]] = field(default_factory=list)
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        assert self.rmse + 1e-9 >= self.mae >= 0.0, (self.mae, self.rmse)

    @classmethod
    def from_counts(cls, true, pred, ids: Optional[Sequence[str]] = None) -> "EvalReport":
        true = np.asarray(true, dtype=np.float64)
        pred = np.asarray(pred, dtype=np.float64)
        if true.size == 0:
            raise ValueError("cannot evaluate an empty dataset")
        if true.shape != pred.shape:
            raise ValueError("true and predicted counts differ in length")
        r = true - pred
        mae = float(np.mean(np.abs(r)))
        rmse = float(np.sqrt(np.mean(r * r)))
        ids = list(ids) if ids is not None else [str(i) for i in range(true.size)]
        return cls(mae, rmse, list(zip(true.tolist(), pred.tolist())), ids)

    def summary(self) -> str:
        return f"n={len(self.per_image)} mae={self.mae!r} rmse={self.rmse!r}"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "true", "pred"])
            for i, (t, p) in zip(self.ids, self.per_image):
                w.writerow([i, repr(t), repr(p)])
            fh.write(f"# {self.summary()}\n")


def predict_density(model: GCASUNet, images, batch_size: int = 32) -> np.ndarray:
    """Density maps ``(n, H, W)`` for ``(n, H, W, 3)`` images."""
    dtype = next(model.parameters()).dtype
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(np.asarray(images[i:i + batch_size]), dtype=dtype)
            out.append(model(x).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0,) + tuple(np.shape(images)[1:3]))


def predict_counts(model: GCASUNet, images, batch_size: int = 32) -> np.ndarray:
    # float64 accumulation of the float32 maps
    return predict_density(model, images, batch_size).astype(np.float64).sum(axis=(1, 2))


def evaluate(model: GCASUNet, images, counts, ids: Optional[Sequence[str]] = None,
             batch_size: int = 32) -> EvalReport:
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return EvalReport.from_counts(counts, predict_counts(model, images, batch_size), ids)


def constant_mean_report(train_counts, test_counts) -> EvalReport:
    """The baseline that predicts the training-set mean count everywhere."""
    mu = float(np.mean(train_counts))
    return EvalReport.from_counts(test_counts, np.full(len(test_counts), mu))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_mae: float = float("nan")
    val_rmse: float = float("nan")


LOG_FIELDS = ("epoch", "lr", "train_loss", "val_mae", "val_rmse")


def write_log_csv(path, history: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for h in history:
            w.writerow([h.epoch] + [repr(float(getattr(h, k))) for k in LOG_FIELDS[1:]])


def train(model: GCASUNet, images: np.ndarray, densities: np.ndarray, tc: TrainConfig,
          val: Optional[Tuple[np.ndarray, np.ndarray]] = None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> List[EpochLog]:
    """Train ``model`` in place on float32 ``images (n,H,W,3)`` / ``densities (n,H,W)``.

    Batch order and flips come from ``tc.seed`` alone, so variants trained
    with the same config see identical data.
    """
    n = len(images)
    if n == 0:
        raise ValueError("no training images")
    images = torch.as_tensor(np.ascontiguousarray(images), dtype=torch.float32)
    densities = torch.as_tensor(np.ascontiguousarray(densities), dtype=torch.float32)
    rng = np.random.default_rng(tc.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    state = init_adamw_state(params)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    history: List[EpochLog] = []
    t = 0
    for epoch in range(1, tc.total_epochs + 1):
        model.train()
        order = rng.permutation(n)
        total, seen = 0.0, 0
        lr = 0.0
        for start in range(0, n, tc.batch_size):
            idx = torch.as_tensor(order[start:start + tc.batch_size])
            x, y = images[idx], densities[idx]
            if tc.flip_augment:
                flips = rng.integers(0, 2, size=(len(idx), 2)).astype(bool)
                x, y = _flip_batch(x, y, flips)
            t += 1
            for p in params:
                p.grad = None
            loss = density_loss(model(x), y, tc.loss_scale)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, value)
            backward(loss)
            grads = [p.grad for p in params]
            clip_grad_norm(grads, tc.grad_clip)
            lr = lr_schedule(t, tc, steps_per_epoch)
            adamw_step(params, grads, state, t, tc, lr=lr)
            total += value * len(idx)
            seen += len(idx)
        log = EpochLog(epoch, lr, total / seen)
        if val is not None and len(val[0]):
            rep = evaluate(model, val[0], val[1])
            log.val_mae, log.val_rmse = rep.mae, rep.rmse
        history.append(log)
        logger.info("epoch %d lr %.3g loss %.5g val_mae %.4g", epoch, lr, log.train_loss, log.val_mae)
        if on_epoch is not None:
            on_epoch(log)
    model.eval()
    return history


def _flip_batch(x: torch.Tensor, y: torch.Tensor, flips: np.ndarray):
    x, y = x.clone(), y.clone()
    for i, (h, v) in enumerate(flips):
        dims = [d for d, on in ((1, h), (0, v)) if on]
        if dims:
            x[i] = torch.flip(x[i], dims)
            y[i] = torch.flip(y[i], dims)
    return x, y


def fit_model(cfg: ModelConfig, tc: TrainConfig, images, densities, val=None, on_epoch=None):
    """Build a model seeded by ``tc.seed`` and train it. Returns ``(model, history)``."""
    model = build_model(cfg, seed=tc.seed)
    history = train(model, images, densities, tc, val=val, on_epoch=on_epoch)
    return model, history


# ---------------------------------------------------------------------------
# ablation

# row order of the component ablation: baseline, singles, pairs, full
ABLATION_VARIANTS: List[Dict[str, bool]] = [
    {"gcam": False, "gefs": False, "gafu": False},
    {"gcam": True, "gefs": False, "gafu": False},
    {"gcam": False, "gefs": True, "gafu": False},
    {"gcam": False, "gefs": False, "gafu": True},
    {"gcam": True, "gefs": False, "gafu": True},
    {"gcam": False, "gefs": True, "gafu": True},
    {"gcam": True, "gefs": True, "gafu": False},
    {"gcam": True, "gefs": True, "gafu": True},
]


@dataclass
class AblationRow:
    toggles: Dict[str, bool]
    seeds: List[int]
    maes: List[float] = field(default_factory=list)
    rmses: List[float] = field(default_factory=list)
    error: str = ""

    @property
    def median_mae(self) -> float:
        return float(np.median(self.maes)) if self.maes else float("nan")

    @property
    def median_rmse(self) -> float:
        return float(np.median(self.rmses)) if self.rmses else float("nan")


def run_ablation(variants: Sequence[Dict[str, bool]], base_cfg: ModelConfig, tc: TrainConfig,
                 train_data: Tuple[np.ndarray, np.ndarray], test_data: Tuple[np.ndarray, np.ndarray],
                 seeds: Sequence[int]) -> List[AblationRow]:
    """Train every toggle variant for every seed and report test MAE/RMSE.

    ``train_data`` is ``(images, densities)``, ``test_data`` ``(images, counts)``.
    A failing row records its error and the rest of the table still runs.
    """
    if not variants:
        raise ValueError("no ablation variants given")
    rows = []
    for toggles in variants:
        unknown = set(toggles) - set(TOGGLES)
        row = AblationRow({t: bool(toggles.get(t, True)) for t in TOGGLES}, list(seeds))
        try:
            if unknown:
                raise ValueError(f"unknown toggles {sorted(unknown)}")
            cfg = replace(base_cfg, **row.toggles)
            for seed in seeds:
                model, _ = fit_model(cfg, replace(tc, seed=seed), *train_data)
                rep = evaluate(model, *test_data)
                row.maes.append(rep.mae)
                row.rmses.append(rep.rmse)
        except Exception as exc:  # noqa: BLE001 - report per row, keep going
            logger.exception("ablation row %s failed", row.toggles)
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def write_ablation_csv(path, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(TOGGLES) + ["median_mae", "median_rmse", "maes", "rmses", "error"])
        for r in rows:
            w.writerow(
                [("on" if r.toggles[t] else "off") for t in TOGGLES]
                + [repr(r.median_mae), repr(r.median_rmse),
                   " ".join(repr(v) for v in r.maes), " ".join(repr(v) for v in r.rmses), r.error]
            )


def config_dict(obj) -> dict:
    return asdict(obj)


__all__ = [
    "TrainConfig",
    "density_loss",
    "lr_schedule",
    "adamw_step",
    "init_adamw_state",
    "EvalReport",
    "evaluate",
    "train",
    "fit_model",
    "run_ablation",
    "ABLATION_VARIANTS",
]

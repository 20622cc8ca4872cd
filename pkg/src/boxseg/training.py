"""Iterative training with soft-label ensembling.

Each case starts from its pseudo mask as label Y^0. Every epoch the network
is fit against the current labels with a smoothed Dice loss; afterwards the
per-case labels are blended with the epoch's recorded predictions by an
exponential moving average, Y^{t+1} = (1 - alpha) Y^t + alpha y^t. The
first epochs use Adam, the rest plain SGD with an exponentially decayed
learning rate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .autodiff import Tensor
from .network import ArchConfig, BaUnet
from .volume import SoftLabelVolume, Volume, binarize, load_volume, save_volume


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the ensembling loop and optimizer schedule."""

    alpha: float = 0.1
    epsilon: float = 1e-7
    adam_epochs: int = 3
    sgd_epochs: int = 17
    adam_lr: float = 1e-4
    sgd_lr_initial: float = 1e-3
    lr_decay_rate: float = 0.94
    lr_decayed_step: int = 100
    batch_size: int = 1
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not (0.0 < self.lr_decay_rate <= 1.0):
            raise ValueError("lr_decay_rate must lie in (0, 1]")
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1")
        if self.adam_epochs < 0 or self.sgd_epochs < 0:
            raise ValueError("epoch counts must be >= 0")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))


def _as_soft_array(target) -> np.ndarray:
    if isinstance(target, SoftLabelVolume):
        return target.data
    if isinstance(target, Volume):
        return SoftLabelVolume.from_volume(target).data
    return np.asarray(target)


def dice_loss(pred: Tensor, target, epsilon: float = 1e-7) -> Tensor:
    """Smoothed soft Dice loss over all voxels.

    loss = 1 - 2 * (sum(Y * y) + eps) / (sum(Y) + sum(y) + eps), with Y the
    (possibly soft) labels and y the predictions. Differentiable in y.
    """
    t = _as_soft_array(target)
    if t.size != pred.data.size:
        raise ValueError(f"shape mismatch: target {t.shape} vs prediction {pred.data.shape}")
    t = t.reshape(pred.data.shape).astype(pred.data.dtype)
    labels = Tensor(t)
    inter = ad.tsum(ad.mul(pred, labels))
    denom = ad.tsum(pred) + float(t.sum()) + epsilon
    return 1.0 - (inter + epsilon) * 2.0 / denom


def ema_update(current, update, alpha: float = 0.1):
    """Blend labels with predictions: (1 - alpha) * current + alpha * update."""
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must lie in (0, 1]")
    cur = _as_soft_array(current)
    upd = _as_soft_array(update)
    if cur.shape != upd.shape:
        raise ValueError(f"shape mismatch: {cur.shape} vs {upd.shape}")
    blended = (1.0 - alpha) * cur + alpha * upd
    if isinstance(current, SoftLabelVolume):
        return SoftLabelVolume(blended)
    return blended


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Exponentially decayed SGD learning rate with a real-valued exponent."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.sgd_lr_initial * cfg.lr_decay_rate ** (step / cfg.lr_decayed_step)


class Sgd:
    """Plain gradient descent: p <- p - lr * g."""

    def step(self, params: dict[str, Tensor], lr: float):
        for t in params.values():
            if t.grad is not None:
                t.data = t.data - lr * t.grad.astype(t.data.dtype)


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, t in params.items():
            if t.grad is None:
                continue
            g = t.grad.astype(np.float64)
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name] = m
            self.v[name] = v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            t.data = t.data - (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(t.data.dtype)


@dataclass
class TrainResult:
    model: BaUnet
    history: list[dict]
    ensemble: dict[str, SoftLabelVolume]
    case_ids: list[str] = field(default_factory=list)


def _case_tensor(vol: Volume, dtype) -> np.ndarray:
    if vol.dtype != "float32-normalized":
        raise ValueError(f"training inputs must be float32-normalized, got {vol.dtype!r}")
    return vol.data.astype(dtype)[None, None]


def train(
    cases,
    cfg: TrainConfig | None = None,
    arch: ArchConfig | None = None,
    case_ids=None,
    dtype=np.float32,
    log=None,
) -> TrainResult:
    """Run the full ensembling loop over (volume, pseudo-mask) cases.

    Per epoch, cases are visited in a seeded shuffled order; the forward
    output recorded during the training pass doubles as y^t for the label
    update at epoch end. Epochs 1..adam_epochs use Adam at a fixed rate, the
    remaining epochs SGD with the decayed schedule on a global step counter
    that starts at 0 when SGD begins. Deterministic for a fixed seed.
    """
    cfg = cfg or TrainConfig()
    arch = arch or ArchConfig()
    cases = list(cases)
    if not cases:
        raise ValueError("no training cases given")
    if case_ids is None:
        case_ids = [f"case{i:03d}" for i in range(len(cases))]
    case_ids = [str(c) for c in case_ids]
    if len(case_ids) != len(cases):
        raise ValueError("case_ids must match cases")

    inputs = [_case_tensor(vol, dtype) for vol, _ in cases]
    labels = [_as_soft_array(mask).astype(dtype) for _, mask in cases]
    for x, y in zip(inputs, labels):
        if x.shape[2:] != y.shape:
            raise ValueError(f"case volume {x.shape[2:]} does not match its mask {y.shape}")

    model = BaUnet(arch, dtype=dtype, seed=cfg.seed)
    adam = Adam()
    sgd = Sgd()
    order_rng = np.random.default_rng((cfg.seed & 0xFFFFFFFFFFFFFFFF, 0x0FDE))
    history: list[dict] = []
    sgd_step = 0
    total_epochs = cfg.adam_epochs + cfg.sgd_epochs
    for epoch in range(total_epochs):
        adam_phase = epoch < cfg.adam_epochs
        order = order_rng.permutation(len(cases))
        preds: list[np.ndarray | None] = [None] * len(cases)
        losses = []
        epoch_lr = cfg.adam_lr if adam_phase else lr_schedule(sgd_step, cfg)
        for idx in order:
            x = Tensor(inputs[idx])
            y = model.forward(x)
            loss = dice_loss(y, labels[idx], cfg.epsilon)
            ad.zero_grads(model.params)
            loss.backward()
            if adam_phase:
                adam.step(model.params, cfg.adam_lr)
            else:
                sgd.step(model.params, lr_schedule(sgd_step, cfg))
                sgd_step += 1
            preds[idx] = y.data.reshape(labels[idx].shape).copy()
            losses.append(float(loss.data))
        for i in range(len(cases)):
            labels[i] = np.clip(ema_update(labels[i], preds[i], cfg.alpha), 0.0, 1.0).astype(dtype)
        record = {
            "epoch": epoch + 1,
            "phase": "adam" if adam_phase else "sgd",
            "mean_loss": float(np.mean(losses)),
            "lr": float(epoch_lr),
        }
        history.append(record)
        if log is not None:
            log(record)
    ensemble = {cid: SoftLabelVolume(y) for cid, y in zip(case_ids, labels)}
    return TrainResult(model, history, ensemble, case_ids)


def infer(model: BaUnet, vol: Volume) -> SoftLabelVolume:
    """Forward the normalized volume through the network; no labels involved."""
    x = _case_tensor(vol, model.dtype)
    y = model.forward_array(x)
    return SoftLabelVolume(y.reshape(vol.shape.as_tuple()))


def make_folds(case_ids, k: int, seed: int = 0) -> list[list[str]]:
    """Seeded shuffle into k disjoint validation sets whose sizes differ by <= 1."""
    ids = [str(c) for c in case_ids]
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} cases")
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    order = rng.permutation(len(ids))
    base, extra = divmod(len(ids), k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append([ids[j] for j in order[start : start + size]])
        start += size
    return folds


def write_history_csv(path, history) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "phase", "mean_loss", "lr"])
        writer.writeheader()
        for record in history:
            writer.writerow(record)
    return path


def save_checkpoint(directory, result: TrainResult) -> Path:
    """Persist model + per-case ensemble labels; layout supports resuming."""
    directory = Path(directory)
    result.model.save(directory)
    ensemble_dir = directory / "ensemble"
    ensemble_dir.mkdir(exist_ok=True)
    for cid, soft in result.ensemble.items():
        save_volume(soft.to_volume(), ensemble_dir / cid)
    return directory


def load_checkpoint(directory) -> tuple[BaUnet, dict[str, SoftLabelVolume]]:
    directory = Path(directory)
    model = BaUnet.load(directory)
    ensemble = {}
    ensemble_dir = directory / "ensemble"
    if ensemble_dir.exists():
        for header in sorted(ensemble_dir.glob("*.json")):
            ensemble[header.stem] = SoftLabelVolume.from_volume(load_volume(header))
    return model, ensemble


class BaUnetSegmenter(BaseEstimator):
    """fit/predict estimator over the ensembling trainer.

    ``fit(X, y)`` takes normalized volumes and their pseudo masks;
    ``predict_proba`` returns soft predictions, ``predict`` hard masks
    binarized at ``threshold``. Fitted state lives on ``model_``,
    ``history_``, and ``ensemble_``.
    """

    def __init__(
        self,
        base_channels: int = 8,
        attention_inter_channels_divisor: int = 2,
        alpha: float = 0.1,
        epsilon: float = 1e-7,
        adam_epochs: int = 3,
        sgd_epochs: int = 17,
        adam_lr: float = 1e-4,
        sgd_lr_initial: float = 1e-3,
        lr_decay_rate: float = 0.94,
        lr_decayed_step: int = 100,
        threshold: float = 0.5,
        seed: int = 0,
    ):
        self.base_channels = base_channels
        self.attention_inter_channels_divisor = attention_inter_channels_divisor
        self.alpha = alpha
        self.epsilon = epsilon
        self.adam_epochs = adam_epochs
        self.sgd_epochs = sgd_epochs
        self.adam_lr = adam_lr
        self.sgd_lr_initial = sgd_lr_initial
        self.lr_decay_rate = lr_decay_rate
        self.lr_decayed_step = lr_decayed_step
        self.threshold = threshold
        self.seed = seed

    def _configs(self) -> tuple[TrainConfig, ArchConfig]:
        cfg = TrainConfig(
            alpha=self.alpha,
            epsilon=self.epsilon,
            adam_epochs=self.adam_epochs,
            sgd_epochs=self.sgd_epochs,
            adam_lr=self.adam_lr,
            sgd_lr_initial=self.sgd_lr_initial,
            lr_decay_rate=self.lr_decay_rate,
            lr_decayed_step=self.lr_decayed_step,
            seed=self.seed,
        )
        arch = ArchConfig(
            base_channels=self.base_channels,
            attention_inter_channels_divisor=self.attention_inter_channels_divisor,
        )
        return cfg, arch

    def fit(self, X, y, case_ids=None):
        cfg, arch = self._configs()
        result = train(list(zip(X, y)), cfg, arch, case_ids=case_ids)
        self.model_ = result.model
        self.history_ = result.history
        self.ensemble_ = result.ensemble
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("BaUnetSegmenter must be fitted before predicting")

    def predict_proba(self, X):
        self._check_fitted()
        if isinstance(X, Volume):
            return infer(self.model_, X)
        return [infer(self.model_, v) for v in X]

    def predict(self, X):
        self._check_fitted()
        proba = self.predict_proba(X)
        if isinstance(proba, SoftLabelVolume):
            return binarize(proba, self.threshold)
        return [binarize(p, self.threshold) for p in proba]

    def score(self, X, y) -> float:
        """Mean Dice overlap (0..100) of hard predictions against hard masks."""
        from .metrics import score_case

        self._check_fitted()
        preds = self.predict(X if not isinstance(X, Volume) else [X])
        gts = [y] if isinstance(y, Volume) else list(y)
        scores = [score_case(p, g).dsc for p, g in zip(preds, gts)]
        return float(np.mean(scores))

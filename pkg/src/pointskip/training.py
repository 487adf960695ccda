"""Training loop, evaluation metrics, checkpoints and ablation harnesses."""
import csv
import math
import os
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .augment import AugmentConfig
from .autograd import Tensor, backward, softmax_cross_entropy
from .dataset import DatasetIndex, PointStore, load_batches
from .model import ModelConfig, Params, forward, is_trainable

AUGMENT_ROWS = ("none", "all", "anisotropic_scaling", "jitter", "rotation", "translation")
SKIP_ROWS = ("concatenation", "addition")


class StateError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 200
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    cosine: bool = True
    min_lr: float = 1e-5
    n_points: int = 1024
    augment: str = "none"
    random_fps_start: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.n_points < 1:
            raise ValueError("batch_size, epochs and n_points must be >= 1")
        if self.learning_rate < 0 or self.min_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")

    def lr_at(self, epoch: int) -> float:
        if not self.cosine:
            return self.learning_rate
        lo = min(self.min_lr, self.learning_rate)
        return lo + 0.5 * (self.learning_rate - lo) * (1 + math.cos(math.pi * epoch / self.epochs))

    @classmethod
    def from_dict(cls, kv: Dict[str, str], base: Optional["TrainConfig"] = None):
        base = base or cls()
        kw = {}
        for f in fields(cls):
            if f.name in kv:
                v = kv[f.name]
                if f.type in (bool, "bool"):
                    kw[f.name] = str(v).strip().lower() in ("1", "true", "yes", "on")
                elif f.type in (int, "int"):
                    kw[f.name] = int(v)
                elif f.type in (float, "float"):
                    kw[f.name] = float(v)
                else:
                    kw[f.name] = str(v).strip()
        return replace(base, **kw)


TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class EvalResult:
    overall_accuracy: float
    mean_class_accuracy: float
    confusion: np.ndarray   # K x K, rows = true class

    @classmethod
    def from_confusion(cls, confusion) -> "EvalResult":
        conf = np.asarray(confusion, dtype=np.int64)
        total = conf.sum()
        oa = float(np.trace(conf) / total) if total else 0.0
        rows = conf.sum(axis=1)
        present = rows > 0
        macc = float(np.mean(np.diag(conf)[present] / rows[present])) if present.any() else 0.0
        return cls(oa, macc, conf)


def confusion_matrix(labels, preds, n_classes: int) -> np.ndarray:
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return conf


def metrics_from_predictions(labels, preds, n_classes: int) -> EvalResult:
    return EvalResult.from_confusion(confusion_matrix(labels, preds, n_classes))


def write_confusion_csv(result: EvalResult, classes, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(classes))
        for c, row in zip(classes, result.confusion):
            w.writerow([c] + [int(x) for x in row])


# ---------------------------------------------------------------------------
# optimiser


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: dict, t: int,
              lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict:
    """Bias-corrected Adam, updating the arrays in ``params`` in place."""
    if t < 1:
        raise StateError(f"Adam step counter must start at 1, got {t}")
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise StateError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        mm = m.setdefault(name, np.zeros_like(p))
        vv = v.setdefault(name, np.zeros_like(p))
        if mm.shape != p.shape:
            raise StateError(f"{name}: optimiser state shape {mm.shape} != {p.shape}")
        mm *= beta1
        mm += (1.0 - beta1) * g
        vv *= beta2
        vv += (1.0 - beta2) * g * g
        p -= lr * (mm / c1) / (np.sqrt(vv / c2) + eps)
    state["t"] = t
    return state


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PSKN"
_VERSION = 1


def save_checkpoint(params: Params, cfg: ModelConfig, path):
    buf = bytearray(_MAGIC)
    text = cfg.to_text().encode("utf-8")
    buf += struct.pack("<II", _VERSION, len(text)) + text
    buf += struct.pack("<I", len(params))
    for name, t in params.items():
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        buf += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(params, cfg)``; raises CheckpointError on any defect."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(4) != _MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, tlen = struct.unpack("<II", take(8))
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig.from_text(take(tlen).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt config block: {e}") from e
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = Tensor(data, requires_grad=is_trainable(name))
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return params, cfg


def copy_params(params: Params) -> Params:
    return {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in params.items()}


# ---------------------------------------------------------------------------
# train / evaluate


def evaluate(index: DatasetIndex, split: str, params: Params, cfg: ModelConfig,
             n_points: int = 1024, batch_size: int = 32, seed: int = 0,
             store: Optional[PointStore] = None) -> EvalResult:
    labels, preds = [], []
    store = store or PointStore(n_points, seed)
    for pts, lab in load_batches(index, split, batch_size, n_points, seed, store=store,
                                 shuffle=False):
        logits = forward(pts, cfg, params, training=False)
        preds.append(np.argmax(logits.data, axis=1))
        labels.append(lab)
    return metrics_from_predictions(np.concatenate(labels), np.concatenate(preds), cfg.n_classes)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_oa: float
    eval_oa: float
    eval_macc: float


@dataclass
class TrainResult:
    params: Params
    best_params: Params
    best_epoch: int
    best_eval: Optional[EvalResult]
    log: List[EpochLog]


LOG_HEADER = ["epoch", "train_loss", "train_oa", "eval_oa", "eval_macc"]


def write_log_csv(log: List[EpochLog], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in log:
            w.writerow([r.epoch, f"{r.train_loss:.10f}", f"{r.train_oa:.6f}",
                        f"{r.eval_oa:.6f}", f"{r.eval_macc:.6f}"])


def train(index: DatasetIndex, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir=None, eval_split: str = "test", params: Optional[Params] = None,
          store: Optional[PointStore] = None, eval_every: int = 1,
          progress: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Adam training with per-epoch evaluation and best-checkpoint tracking.

    When ``eval_split`` has no entries, the training split is evaluated (in
    eval mode) instead.
    """
    from .model import init_params

    if not index.split("train"):
        raise ValueError("training split is empty")
    if model_cfg.n_classes < len(index.classes):
        raise ValueError(f"model has {model_cfg.n_classes} classes, index has {len(index.classes)}")
    if not index.split(eval_split):
        eval_split = "train"
    params = params if params is not None else init_params(model_cfg, train_cfg.seed)
    store = store or PointStore(train_cfg.n_points, train_cfg.seed)
    aug = AugmentConfig(mode=train_cfg.augment, seed=train_cfg.seed)
    trainable = {k: t for k, t in params.items() if is_trainable(k)}
    state: dict = {}
    step = 0
    log: List[EpochLog] = []
    best, best_epoch, best_params = None, -1, copy_params(params)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        tot_loss, correct, seen = 0.0, 0, 0
        batches = load_batches(index, "train", train_cfg.batch_size, train_cfg.n_points,
                               train_cfg.seed, aug, epoch, store)
        for b, (pts, labels) in enumerate(batches):
            rng = np.random.default_rng([train_cfg.seed, epoch, b])
            for t in trainable.values():
                t.grad = None
            logits = forward(pts, model_cfg, params, training=True, rng=rng,
                             random_start=train_cfg.random_fps_start)
            loss = softmax_cross_entropy(logits, labels)
            backward(loss)
            step += 1
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in trainable.items()}
            adam_step({k: t.data for k, t in trainable.items()}, grads, state, step, lr,
                      train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            tot_loss += loss.item() * len(labels)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
            seen += len(labels)
        if (epoch + 1) % eval_every == 0 or epoch + 1 == train_cfg.epochs:
            res = evaluate(index, eval_split, params, model_cfg, train_cfg.n_points,
                           train_cfg.batch_size, train_cfg.seed, store)
            if best is None or res.overall_accuracy > best.overall_accuracy:
                best, best_epoch, best_params = res, epoch, copy_params(params)
                if out_dir is not None:
                    save_checkpoint(best_params, model_cfg, out_dir / "best.pskn")
            eoa, emacc = res.overall_accuracy, res.mean_class_accuracy
        else:
            eoa = emacc = float("nan")
        row = EpochLog(epoch + 1, tot_loss / seen, correct / seen, eoa, emacc)
        log.append(row)
        if progress is not None:
            progress(row)
        if out_dir is not None:
            write_log_csv(log, out_dir / "log.csv")
    if out_dir is not None:
        save_checkpoint(params, model_cfg, out_dir / "last.pskn")
    return TrainResult(params, best_params, best_epoch, best, log)


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationRow:
    mode: str
    result: EvalResult


def _ablation_variants(kind: str, model_cfg: ModelConfig, train_cfg: TrainConfig):
    if kind == "augmentation":
        for mode in AUGMENT_ROWS:
            # the baseline row keeps a random FPS start as its only perturbation
            tc = replace(train_cfg, augment=mode, random_fps_start=(mode == "none"))
            yield mode, model_cfg, tc
    elif kind == "skip_mode":
        for mode in SKIP_ROWS:
            mc = replace(model_cfg, skip_mode=mode,
                         skip_projection=(mode == "addition") or model_cfg.skip_projection)
            yield mode, mc, train_cfg
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")


def run_ablation(kind: str, index: DatasetIndex, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, out_csv=None, store: Optional[PointStore] = None,
                 progress: Optional[Callable[[str, EpochLog], None]] = None
                 ) -> List[AblationRow]:
    """Train one model per variant on identical seeds and splits.

    Each row reports the final-epoch evaluation on the test split (train split
    when there is no test split).
    """
    store = store or PointStore(train_cfg.n_points, train_cfg.seed)
    rows = []
    for mode, mc, tc in _ablation_variants(kind, model_cfg, train_cfg):
        cb = (lambda r, m=mode: progress(m, r)) if progress else None
        res = train(index, mc, tc, store=store, eval_every=tc.epochs, progress=cb)
        split = "test" if index.split("test") else "train"
        final = evaluate(index, split, res.params, mc, tc.n_points, tc.batch_size, tc.seed, store)
        rows.append(AblationRow(mode, final))
    if out_csv is not None:
        write_ablation_csv(rows, out_csv)
    return rows


def write_ablation_csv(rows: List[AblationRow], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "oa", "macc"])
        for r in rows:
            w.writerow([r.mode, f"{r.result.overall_accuracy:.6f}",
                        f"{r.result.mean_class_accuracy:.6f}"])

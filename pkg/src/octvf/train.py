"""Training loop: Adam, reduce-on-plateau, per-epoch validation, model selection, ensembling."""

from __future__ import annotations

import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .augment import AugmentConfig, augment, resize_bilinear, stream_seed
from .evaluation.metrics import MetricError, mse, r2
from .nn.model import Model, ModelSpec, checkpoint_bytes, parse_checkpoint
from .nn.ops import mse_loss
from .oct_ingest import MODALITIES, ExamPair, exam_ids

log = logging.getLogger(__name__)

TARGETS = ("md", "thresholds")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    batch_size: int = 4
    steps_per_epoch: int = 300
    plateau_patience: int = 10
    plateau_factor: float = 0.75
    max_epochs: int = 200
    early_stop_patience: int = 30
    target: str = "thresholds"
    modality: str = "ring4.7"
    input_width: int | None = None
    input_height: int | None = None
    normalize_laterality: bool = True
    seed: int = 0

    def __post_init__(self):
        errors = []
        if not 0 < self.plateau_factor < 1:
            errors.append(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.max_epochs < 1:
            errors.append("batch_size, steps_per_epoch and max_epochs must be >= 1")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            errors.append("patience values must be >= 1")
        if self.lr0 <= 0:
            errors.append("lr0 must be positive")
        if self.target not in TARGETS:
            errors.append(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.modality not in MODALITIES:
            errors.append(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def out_channels(self) -> int:
        return 1 if self.target == "md" else 52

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return params, state


# -------------------------------------------------------------- scheduler


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 10, factor: float = 0.75):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.lr, self.patience, self.factor = lr, patience, factor
        self.best = np.inf
        self.wait = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
        return self.lr


def plateau_scheduler(history: Sequence[float], patience: int = 10, factor: float = 0.75,
                      lr: float = 1e-4) -> float:
    """Learning rate after replaying ``history`` of per-epoch validation losses from ``lr``."""
    sched = PlateauScheduler(lr, patience, factor)
    for loss in history:
        sched.step(loss)
    return sched.lr


# ------------------------------------------------------------ data plumbing


def default_input_size(modality: str, image_shape: tuple[int, int]) -> tuple[int, int]:
    """(width, height): rings keep their width and are padded up to a multiple of 32 rows; SLO stays square."""
    h, w = image_shape
    if modality == "slo":
        return w, h
    return w, int(np.ceil(h / 32) * 32)


def prepare_images(exams: Sequence[ExamPair], modality: str, size: tuple[int, int],
                   normalize_laterality: bool = True) -> np.ndarray:
    """Deterministic preprocessing: OD orientation, bilinear resize.  Returns (N, 1, H, W) f32."""
    w, h = size
    out = np.empty((len(exams), 1, h, w), dtype=np.float32)
    for i, e in enumerate(exams):
        img = e.image(modality).pixels
        if normalize_laterality and e.eye == "OS":
            img = img[:, ::-1]
        out[i, 0] = resize_bilinear(img, w, h)
    return out


def targets(exams: Sequence[ExamPair], target: str) -> np.ndarray:
    if target == "md":
        return np.array([[e.vf.md] for e in exams], dtype=np.float64)
    return np.array([e.vf.thresholds for e in exams], dtype=np.float64)


def _predict(model: Model, x: np.ndarray, chunk: int = 32) -> np.ndarray:
    return np.concatenate([model.forward(x[i:i + chunk], train=False) for i in range(0, len(x), chunk)])


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_r2: float
    lr: float


def log_csv(rows: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    buf.write("epoch,train_loss,val_loss,val_r2,lr\n")
    for r in rows:
        buf.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_r2!r},{r.lr!r}\n")
    return buf.getvalue()


def fit(train_exams: Sequence[ExamPair], val_exams: Sequence[ExamPair],
        model_spec: ModelSpec | None = None, config: TrainConfig | None = None,
        aug: AugmentConfig | None = None, progress=None, jobs: int = 1) -> tuple[bytes, list[EpochLog]]:
    """Train one model and return the best-validation-R2 checkpoint bytes and the epoch log.

    ``jobs > 1`` builds augmented batches on worker threads.  Every draw has
    its own seed, so the result does not depend on ``jobs``.
    """
    config = config or TrainConfig()
    aug = aug or AugmentConfig(global_seed=config.seed)
    if not train_exams or not val_exams:
        raise ValueError("training and validation partitions must be non-empty")
    spec = model_spec or ModelSpec(out_channels=config.out_channels)
    if spec.out_channels != config.out_channels:
        raise ValueError(f"model has {spec.out_channels} outputs but target {config.target!r} "
                         f"needs {config.out_channels}")
    first = train_exams[0].image(config.modality).pixels.shape
    size = (config.input_width or default_input_size(config.modality, first)[0],
            config.input_height or default_input_size(config.modality, first)[1])

    x_train = prepare_images(train_exams, config.modality, size, config.normalize_laterality)
    x_val = prepare_images(val_exams, config.modality, size, config.normalize_laterality)
    y_train = targets(train_exams, config.target)
    y_val = targets(val_exams, config.target)
    train_ids = exam_ids(train_exams)

    model = Model(spec, seed=config.seed)
    model.output_shift[...] = y_train.mean(axis=0)
    model.output_scale[...] = max(float(y_train.std()), 1e-3)
    state = AdamState()
    sched = PlateauScheduler(config.lr0, config.plateau_patience, config.plateau_factor)
    lr = config.lr0
    history: list[EpochLog] = []
    best_r2, best_state, best_epoch, best_lr = -np.inf, None, 0, lr
    best_val_loss, since_best_loss = np.inf, 0
    meta_base = {
        "target": config.target, "modality": config.modality, "input_size": list(size),
        "normalize_laterality": config.normalize_laterality, "seed": config.seed,
        "train_config": config.to_dict(), "augment_config": aug.to_dict(),
    }

    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    pool = ThreadPoolExecutor(jobs) if jobs > 1 else None
    for epoch in range(1, config.max_epochs + 1):
        draw = np.random.default_rng(stream_seed(config.seed, "batch-sampling", epoch))
        picks = draw.integers(0, len(train_exams), size=(config.steps_per_epoch, config.batch_size))
        losses = []
        for step, idx in enumerate(picks):
            xb = np.empty((len(idx), 1, size[1], size[0]), dtype=np.float32)

            def fill(slot, idx=idx, step=step, xb=xb):
                i = idx[slot]
                s = stream_seed(aug.global_seed, f"{train_ids[i]}/{step}/{slot}", epoch)
                (img,), _ = augment([x_train[i, 0]], None, aug, s)
                xb[slot, 0] = img

            if pool is None:
                for slot in range(len(idx)):
                    fill(slot)
            else:
                list(pool.map(fill, range(len(idx))))
            pred = model.forward(xb, train=True)
            loss, dpred = mse_loss(pred, y_train[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch} step {step}")
            model.backward(dpred)
            adam_step(model.params, model.grads, state, lr)
            losses.append(loss)
        p_val = _predict(model, x_val)
        val_loss = mse(y_val, p_val)
        try:
            val_r2 = r2(y_val, p_val)
        except MetricError:
            val_r2 = float("nan")
        row = EpochLog(epoch, float(np.mean(losses)), val_loss, val_r2, lr)
        history.append(row)
        log.info("epoch %d train %.4f val %.4f r2 %.4f lr %.3g", epoch, row.train_loss, val_loss, val_r2, lr)
        if progress:
            progress(row)
        if best_state is None or val_r2 > best_r2:
            best_r2, best_epoch, best_lr = val_r2, epoch, lr
            best_state = [(n, a.copy()) for n, a in model.state()]
            best_opt_t = state.t
        lr = sched.step(val_loss)
        if val_loss < best_val_loss:
            best_val_loss, since_best_loss = val_loss, 0
        else:
            since_best_loss += 1
            if since_best_loss >= config.early_stop_patience:
                break

    if pool is not None:
        pool.shutdown()
    model.set_state(dict(best_state))
    meta = dict(meta_base, epoch=best_epoch, val_r2=best_r2,
                optimizer={"name": "adam", "t": best_opt_t, "lr": best_lr,
                           "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps})
    return checkpoint_bytes(model, meta), history


def predict_batch(checkpoint: bytes | tuple[Model, dict], exams: Sequence[ExamPair],
                  modality: str | None = None) -> np.ndarray:
    """Infer-mode predictions, one row per exam (shape (n, 1) or (n, 52))."""
    model, meta = parse_checkpoint(checkpoint) if isinstance(checkpoint, (bytes, bytearray)) else checkpoint
    modality = modality or meta["modality"]
    if modality != meta["modality"]:
        raise ValueError(f"checkpoint was trained on {meta['modality']!r}, not {modality!r}")
    if not exams:
        return np.zeros((0, model.spec.out_channels))
    x = prepare_images(exams, modality, tuple(meta["input_size"]), meta.get("normalize_laterality", True))
    return _predict(model, x).astype(np.float64)


def ensemble_average(predictions: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of equally shaped prediction matrices."""
    if len(predictions) == 0:
        raise ValueError("ensemble of zero models")
    mats = [np.asarray(p, dtype=np.float64) for p in predictions]
    shapes = {m.shape for m in mats}
    if len(shapes) != 1:
        raise ValueError(f"prediction shapes differ: {sorted(shapes)}")
    # mean taken as an offset from the first member: equal members give that member back exactly
    first = mats[0]
    return first + np.sum(np.stack([m - first for m in mats]), axis=0) / len(mats)

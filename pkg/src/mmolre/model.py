"""Full model assembly, task heads, losses, AdamW and the training loop.

Five variants share the same building blocks:

``mmolre``          UniTSE per modality -> fusion per task -> two heads
``pre_fusion``      encoder features go straight into per-task fusion
``post_fusion``     one fusion stack shared by both tasks, two heads
``single_task_sa``  one fusion stack, sentiment head only
``single_task_er``  one fusion stack, emotion head only
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tt
from .fusion import FusionConfig, FusionParams, fuse, init_fusion
from .tensor import Tensor
from .unitse import MoLREConfig, UniTSEBlock, init_unitse, uniform_param, unitse_forward, zeros_param

VARIANTS = ("single_task_sa", "single_task_er", "pre_fusion", "post_fusion", "mmolre")
PROB_EPS = 1e-7


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step}: joint loss = {value}")
        self.step = step
        self.value = value


@dataclass
class Sample:
    x_t: np.ndarray
    x_a: np.ndarray
    y_r: float
    y_c: np.ndarray

    def __post_init__(self):
        self.x_t = np.asarray(self.x_t, dtype=np.float64)
        self.x_a = np.asarray(self.x_a, dtype=np.float64)
        self.y_r = float(self.y_r)
        self.y_c = np.asarray(self.y_c, dtype=np.uint8)
        if not math.isfinite(self.y_r):
            raise ValueError(f"y_r must be finite, got {self.y_r}")
        if np.any(self.y_c > 1):
            raise ValueError("y_c must be multi-hot (entries 0 or 1)")


@dataclass
class Prediction:
    y_r_hat: float | None
    y_c_hat: np.ndarray | None


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    max_steps: int = 500
    early_stop_patience: int = 8
    seed: int = 0
    loss: str = "bce"  # or "eq6_literal"
    record_wall_time: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.loss not in ("bce", "eq6_literal"):
            raise ValueError(f"loss must be 'bce' or 'eq6_literal', got {self.loss!r}")


# --------------------------------------------------------------------------
# heads
# --------------------------------------------------------------------------


@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self, prefix=""):
        return {f"{prefix}{n}": getattr(self, n) for n in ("w1", "b1", "w2", "b2")}


def init_head(rng, d_in: int, hidden: int, d_out: int) -> HeadParams:
    return HeadParams(
        w1=uniform_param(rng, (d_in, hidden), d_in), b1=zeros_param((hidden,)),
        w2=uniform_param(rng, (hidden, d_out), hidden), b2=zeros_param((d_out,)),
    )


def head_forward(z: Tensor, p: HeadParams) -> Tensor:
    return tt.linear(tt.relu(tt.linear(z, p.w1, p.b1)), p.w2, p.b2)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass
class Model:
    variant: str
    molre: MoLREConfig
    fusion_cfg: FusionConfig
    n_classes: int
    unitse: dict[str, list[UniTSEBlock]] | None
    fusion: dict[str, FusionParams]
    heads: dict[str, HeadParams]

    @property
    def tasks(self) -> tuple[str, ...]:
        return tuple(self.heads)

    def fusion_for(self, task: str) -> FusionParams:
        return self.fusion["shared"] if "shared" in self.fusion else self.fusion[task]

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.unitse is not None:
            for m, blocks in self.unitse.items():
                for i, block in enumerate(blocks):
                    out.update(block.named_parameters(f"unitse.{m}.block{i}."))
        for key, fp in self.fusion.items():
            out.update(fp.named_parameters(f"fusion.{key}."))
        for task, hp in self.heads.items():
            out.update(hp.named_parameters(f"head.{task}."))
        return out

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self.named_parameters().values()]))

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def forward(self, x_t: Tensor, x_a: Tensor) -> dict[str, Tensor]:
        """Raw task outputs: ``SA`` -> sentiment score(s), ``ER`` -> class probabilities."""
        if self.unitse is not None:
            text = unitse_forward(x_t, self.unitse["text"], self.molre)
            audio = unitse_forward(x_a, self.unitse["audio"], self.molre)
        else:
            text = {task: x_t for task in self.tasks}
            audio = {task: x_a for task in self.tasks}
        out = {}
        shared_z = None
        for task in self.tasks:
            if "shared" in self.fusion:
                if shared_z is None:
                    shared_z = fuse(text[task], audio[task], self.fusion["shared"])
                z = shared_z
            else:
                z = fuse(text[task], audio[task], self.fusion[task])
            y = head_forward(z, self.heads[task])
            if task == "SA":
                out[task] = y[..., 0]
            else:
                out[task] = tt.sigmoid(y)
        return out


def build_variant(
    variant: str,
    molre: MoLREConfig,
    fusion_cfg: FusionConfig | None = None,
    n_classes: int = 6,
    head_hidden: int | None = None,
    seed: int = 0,
) -> Model:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    fusion_cfg = fusion_cfg or FusionConfig(d=molre.d)
    if fusion_cfg.d != molre.d:
        raise ValueError(f"fusion width {fusion_cfg.d} != feature width {molre.d}")
    hidden = head_hidden or max(1, molre.d // 2)
    rng = np.random.default_rng(seed)
    if variant == "single_task_sa":
        tasks = ("SA",)
    elif variant == "single_task_er":
        tasks = ("ER",)
    else:
        tasks = molre.tasks

    unitse = None
    if variant == "mmolre":
        unitse = {m: init_unitse(rng, molre) for m in ("text", "audio")}
    if variant in ("post_fusion", "single_task_sa", "single_task_er"):
        fusion = {"shared": init_fusion(rng, fusion_cfg)}
    else:
        fusion = {t: init_fusion(rng, fusion_cfg) for t in tasks}
    heads = {}
    for t in tasks:
        heads[t] = init_head(rng, 2 * molre.d, hidden, 1 if t == "SA" else n_classes)
    return Model(variant, molre, fusion_cfg, n_classes, unitse, fusion, heads)


def stack_batch(samples: Sequence[Sample]):
    x_t = Tensor(np.stack([s.x_t for s in samples]))
    x_a = Tensor(np.stack([s.x_a for s in samples]))
    y_r = np.array([s.y_r for s in samples])
    y_c = np.stack([s.y_c for s in samples]).astype(np.float64)
    return x_t, x_a, y_r, y_c


def predict(sample: Sample, model: Model) -> Prediction:
    out = model.forward(Tensor(sample.x_t), Tensor(sample.x_a))
    y_r = out["SA"].item() if "SA" in out else None
    y_c = out["ER"].data.copy() if "ER" in out else None
    return Prediction(y_r_hat=y_r, y_c_hat=y_c)


def predict_batch(samples: Sequence[Sample], model: Model) -> dict[str, np.ndarray]:
    x_t, x_a, _, _ = stack_batch(samples)
    return {k: v.data for k, v in model.forward(x_t, x_a).items()}


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def mae_loss(y_r, y_r_hat) -> Tensor:
    y_r, y_r_hat = tt.as_tensor(y_r), tt.as_tensor(y_r_hat)
    if y_r.shape != y_r_hat.shape:
        raise tt.ShapeError(f"mae_loss: label shape {y_r.shape} != prediction shape {y_r_hat.shape}")
    if y_r.size == 0:
        raise ValueError("mae_loss: empty batch")
    return tt.scale(tt.sum(tt.abs(y_r - y_r_hat)), 1.0 / y_r.size)


def emotion_loss(y_c, p_hat, eps: float = PROB_EPS, literal: bool = False) -> Tensor:
    """Per-class binary cross-entropy averaged over the batch (summed over classes).

    With ``literal=True`` only the positive-class term ``-y log p`` is kept.
    """
    y_c, p_hat = tt.as_tensor(y_c), tt.as_tensor(p_hat)
    if y_c.shape != p_hat.shape:
        raise tt.ShapeError(f"emotion_loss: label shape {y_c.shape} != probability shape {p_hat.shape}")
    if y_c.size == 0:
        raise ValueError("emotion_loss: empty batch")
    batch = y_c.shape[0] if y_c.ndim > 1 else 1
    p = tt.clip(p_hat, eps, 1.0 - eps)
    ll = y_c * tt.log(p)
    if not literal:
        ll = ll + (1.0 - y_c.data) * tt.log(1.0 - p)
    return tt.scale(tt.sum(ll), -1.0 / batch)


def joint_loss(l_mae: Tensor, l_ce: Tensor) -> Tensor:
    l_mae, l_ce = tt.as_tensor(l_mae), tt.as_tensor(l_ce)
    if not (np.all(np.isfinite(l_mae.data)) and np.all(np.isfinite(l_ce.data))):
        raise ValueError(f"joint_loss: non-finite component (mae={l_mae.data}, ce={l_ce.data})")
    return l_mae + l_ce


def batch_losses(model: Model, samples: Sequence[Sample], literal: bool = False) -> dict[str, Tensor]:
    x_t, x_a, y_r, y_c = stack_batch(samples)
    out = model.forward(x_t, x_a)
    zero = Tensor(0.0)
    l_mae = mae_loss(y_r, out["SA"]) if "SA" in out else zero
    l_ce = emotion_loss(y_c, out["ER"], literal=literal) if "ER" in out else zero
    return {"l_mae": l_mae, "l_ce": l_ce, "l_joint": joint_loss(l_mae, l_ce)}


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamW:
    params: dict[str, Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, params: dict[str, Tensor], cfg: TrainConfig) -> "AdamW":
        return cls(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def train_step(model: Model, batch: Sequence[Sample], opt: AdamW, cfg: TrainConfig, step: int = 0) -> dict:
    """One forward/backward/AdamW update. Returns the step's loss record."""
    if not batch:
        raise ValueError("train_step: empty batch")
    model.zero_grad()
    try:
        # overflow is reported as DivergenceError below, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            losses = batch_losses(model, batch, literal=cfg.loss == "eq6_literal")
    except ValueError as exc:
        params = model.named_parameters().values()
        if "non-finite" in str(exc) or not all(np.all(np.isfinite(p.data)) for p in params):
            raise DivergenceError(step, float("nan")) from exc
        raise
    joint = losses["l_joint"]
    if not math.isfinite(joint.item()):
        raise DivergenceError(step, joint.item())
    joint.backward()
    opt.step()
    return {
        "step": step,
        "l_mae": losses["l_mae"].item(),
        "l_ce": losses["l_ce"].item(),
        "l_joint": joint.item(),
    }


class EarlyStopping:
    """Signals a stop once ``patience`` consecutive evaluations fail to beat the best loss."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = math.inf
        self.bad_evals = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.bad_evals = 0
        else:
            self.bad_evals += 1
        return self.bad_evals >= self.patience


def evaluate_loss(model: Model, samples: Sequence[Sample], batch_size: int = 64) -> dict[str, float]:
    totals = {"l_mae": 0.0, "l_ce": 0.0, "l_joint": 0.0}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        losses = batch_losses(model, chunk)
        for k in totals:
            totals[k] += losses[k].item() * len(chunk)
    return {k: v / len(samples) for k, v in totals.items()}


def _metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def fit(
    model: Model,
    train: Sequence[Sample],
    cfg: TrainConfig,
    val: Sequence[Sample] | None = None,
    metrics_path: str | Path | None = None,
    shuffle: bool = True,
) -> list[dict]:
    """Train until ``cfg.max_steps`` or early stopping on ``val`` (checked once per epoch).

    Each step's record is appended to ``metrics_path`` as one JSON line.
    """
    if not train:
        raise ValueError("fit: empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW.from_config(model.named_parameters(), cfg)
    stopper = EarlyStopping(cfg.early_stop_patience) if val else None
    records: list[dict] = []
    fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        step = 0
        while step < cfg.max_steps:
            order = rng.permutation(len(train)) if shuffle else np.arange(len(train))
            for start in range(0, len(train), cfg.batch_size):
                if step >= cfg.max_steps:
                    break
                batch = [train[i] for i in order[start : start + cfg.batch_size]]
                t0 = time.perf_counter()
                rec = train_step(model, batch, opt, cfg, step)
                rec["wall_ms"] = round((time.perf_counter() - t0) * 1e3, 3) if cfg.record_wall_time else None
                records.append(rec)
                if fh:
                    fh.write(_metrics_line(rec))
                step += 1
            if stopper is not None:
                val_loss = evaluate_loss(model, val)["l_joint"]
                if fh:
                    fh.write(_metrics_line({"step": step, "val_l_joint": val_loss}))
                if stopper.update(val_loss):
                    break
    finally:
        if fh:
            fh.close()
    return records


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def sentiment_metrics(y: np.ndarray, y_hat: np.ndarray) -> dict[str, float]:
    from sklearn.metrics import f1_score

    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    out = {"mae": float(np.mean(np.abs(y - y_hat)))}
    if y.size > 1 and np.std(y) > 0 and np.std(y_hat) > 0:
        out["corr"] = float(np.corrcoef(y, y_hat)[0, 1])
    else:
        out["corr"] = float("nan")
    out["acc7"] = float(np.mean(np.clip(np.round(y), -3, 3) == np.clip(np.round(y_hat), -3, 3)))
    out["acc5"] = float(np.mean(np.clip(np.round(y), -2, 2) == np.clip(np.round(y_hat), -2, 2)))
    has0_true, has0_pred = y >= 0, y_hat >= 0
    out["acc2_has0"] = float(np.mean(has0_true == has0_pred))
    out["f1_has0"] = float(f1_score(has0_true, has0_pred, average="weighted", zero_division=0))
    nz = y != 0
    if nz.any():
        out["acc2_non0"] = float(np.mean((y[nz] > 0) == (y_hat[nz] > 0)))
        out["f1_non0"] = float(f1_score(y[nz] > 0, y_hat[nz] > 0, average="weighted", zero_division=0))
    return out


def emotion_metrics(y_c: np.ndarray, p_hat: np.ndarray, names: Sequence[str] | None = None) -> dict[str, float]:
    from sklearn.metrics import f1_score

    y_c = np.asarray(y_c).astype(int)
    pred = (np.asarray(p_hat) >= 0.5).astype(int)
    names = names or [f"class{j}" for j in range(y_c.shape[1])]
    out = {}
    accs, f1s = [], []
    for j, name in enumerate(names):
        acc = float(np.mean(y_c[:, j] == pred[:, j]))
        wf1 = float(f1_score(y_c[:, j], pred[:, j], average="weighted", zero_division=0))
        out[f"{name}_acc"], out[f"{name}_wf1"] = acc, wf1
        accs.append(acc)
        f1s.append(wf1)
    out["avg_acc"] = float(np.mean(accs))
    out["avg_wf1"] = float(np.mean(f1s))
    return out


EMOTION_NAMES = ("happiness", "sadness", "anger", "surprise", "disgust", "fear")


def evaluate(model: Model, samples: Sequence[Sample], batch_size: int = 64) -> dict[str, dict]:
    preds: dict[str, list] = {}
    for start in range(0, len(samples), batch_size):
        for k, v in predict_batch(samples[start : start + batch_size], model).items():
            preds.setdefault(k, []).append(v)
    out = {}
    if "SA" in preds:
        y = np.array([s.y_r for s in samples])
        out["SA"] = sentiment_metrics(y, np.concatenate(preds["SA"]))
    if "ER" in preds:
        y_c = np.stack([s.y_c for s in samples])
        names = EMOTION_NAMES if y_c.shape[1] == len(EMOTION_NAMES) else None
        out["ER"] = emotion_metrics(y_c, np.concatenate(preds["ER"]), names)
    return out


# --------------------------------------------------------------------------
# weights file: "MOLW", u16 version, u32 count, then per tensor
# u16 name length, utf-8 name, u8 ndim, u32 dims, float64 LE data
# --------------------------------------------------------------------------

WEIGHTS_MAGIC = b"MOLW"
WEIGHTS_VERSION = 1


def save_weights(model: Model, path: str | Path) -> None:
    params = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + struct.pack("<HI", WEIGHTS_VERSION, len(params)))
        for name, p in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(p.data.astype("<f8").tobytes())


def load_weights(model: Model, path: str | Path) -> None:
    from .data import FeatureFormatError

    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != WEIGHTS_VERSION:
        raise FeatureFormatError(f"{path}: unsupported weights version {version}")
    params = model.named_parameters()
    off = 10
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2 : off + 2 + n].decode("utf-8")
            off += 2 + n
            (ndim,) = struct.unpack_from("<B", buf, off)
            shape = struct.unpack_from(f"<{ndim}I", buf, off + 1)
            off += 1 + 4 * ndim
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            if name not in params or params[name].shape != tuple(shape):
                raise FeatureFormatError(f"{path}: tensor {name!r} {shape} does not fit this model")
            params[name].data[...] = data
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FeatureFormatError):
            raise
        raise FeatureFormatError(f"{path}: truncated weights file ({exc})") from None

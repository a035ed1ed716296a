"""Classification heads over motion descriptors and backbone embeddings.

The fusion head concatenates a backbone embedding with the gated,
layer-normalized motion descriptor and applies one linear softmax layer:

    fused  = [e, alpha * LayerNorm(d)]
    probs  = softmax(W @ fused + b)

``alpha`` is a learnable scalar initialized at 1.0 that gates the motion
branch. The descriptor-only head is the same code path with an empty
backbone block (embedding dimension 0). Training is plain mini-batch
AdamW with a cosine-annealed learning rate and early stopping on
validation macro F1; gradients are fully analytic and verified against
central finite differences in the test suite.

The backbone itself is pluggable: anything exposing ``embed(seq)`` with a
fixed output dimension works. ``StubEmbeddingProvider`` supplies a cheap
deterministic stand-in built from intensity statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dgme.errors import DataError, NumericError
from dgme.videoio import FrameSequence

LAYER_NORM_EPS = 1e-5
PROB_FLOOR = 1e-12


@dataclass
class FusionHeadParams:
    alpha: float
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    W: np.ndarray  # (num_classes, C + D), backbone block first
    b: np.ndarray
    class_names: list[str]
    backbone_dim: int
    descriptor_dim: int

    def __post_init__(self):
        self.ln_gain = np.asarray(self.ln_gain, dtype=np.float64)
        self.ln_bias = np.asarray(self.ln_bias, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        k = len(self.class_names)
        c, d = self.backbone_dim, self.descriptor_dim
        if self.ln_gain.shape != (d,) or self.ln_bias.shape != (d,):
            raise ValueError("layer-norm parameter shapes must match descriptor_dim")
        if self.W.shape != (k, c + d) or self.b.shape != (k,):
            raise ValueError(f"W must be ({k}, {c + d}) and b ({k},), got {self.W.shape}, {self.b.shape}")

    def copy(self) -> "FusionHeadParams":
        return FusionHeadParams(
            alpha=float(self.alpha),
            ln_gain=self.ln_gain.copy(),
            ln_bias=self.ln_bias.copy(),
            W=self.W.copy(),
            b=self.b.copy(),
            class_names=list(self.class_names),
            backbone_dim=self.backbone_dim,
            descriptor_dim=self.descriptor_dim,
        )


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr_max: float = 1e-3
    weight_decay: float = 0.01
    adamw_betas: tuple[float, float] = (0.9, 0.999)
    adamw_eps: float = 1e-8
    cosine_floor: float = 1e-5
    early_stop_patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_max <= 0 or self.cosine_floor <= 0:
            raise ValueError("learning rates must be positive")
        b1, b2 = self.adamw_betas
        if not (0.0 < b1 < 1.0 and 0.0 < b2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")


@dataclass
class LabeledFeatures:
    """Aligned feature arrays for one dataset split."""

    clip_ids: list[str]
    dgme: np.ndarray               # (N, D)
    labels: np.ndarray             # (N,) int class indices
    class_names: list[str]
    backbone: np.ndarray | None = None  # (N, C) or None for descriptor-only

    def __post_init__(self):
        self.dgme = np.asarray(self.dgme, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.clip_ids)
        if self.dgme.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError("clip_ids, dgme, labels must align")
        if self.backbone is not None:
            self.backbone = np.asarray(self.backbone, dtype=np.float64)
            if self.backbone.shape[0] != n:
                raise ValueError("backbone rows must align with clip_ids")

    @property
    def backbone_dim(self) -> int:
        return 0 if self.backbone is None else self.backbone.shape[1]

    def backbone_or_empty(self) -> np.ndarray:
        if self.backbone is None:
            return np.zeros((len(self.clip_ids), 0), dtype=np.float64)
        return self.backbone


def _standardize(x: np.ndarray, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """y = gain * (x - mean) / sqrt(var + eps) + bias, variance divisor D.

    Works on a vector or a batch of row vectors.
    """
    return gain * _standardize(x, eps) + bias


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_batch(backbone: np.ndarray, dgme: np.ndarray,
                   params: FusionHeadParams):
    xhat = _standardize(dgme)
    normed = params.ln_gain * xhat + params.ln_bias
    fused = np.concatenate([backbone, params.alpha * normed], axis=-1)
    logits = fused @ params.W.T + params.b
    return softmax(logits), xhat, normed, fused


def fusion_forward(f_backbone: np.ndarray, f_dgme: np.ndarray,
                   params: FusionHeadParams) -> np.ndarray:
    """Class probabilities for one clip."""
    f_backbone = np.asarray(f_backbone, dtype=np.float64).reshape(1, -1)
    f_dgme = np.asarray(f_dgme, dtype=np.float64).reshape(1, -1)
    if f_backbone.shape[1] != params.backbone_dim:
        raise DataError(
            f"embedding dim {f_backbone.shape[1]} does not match head ({params.backbone_dim})"
        )
    if f_dgme.shape[1] != params.descriptor_dim:
        raise DataError(
            f"descriptor dim {f_dgme.shape[1]} does not match head ({params.descriptor_dim})"
        )
    probs, _, _, _ = _forward_batch(f_backbone, f_dgme, params)
    return probs[0]


def cross_entropy(probs: np.ndarray, true_class: int) -> float:
    """-log p[true_class], with the probability floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if not (0 <= true_class < probs.shape[-1]):
        raise ValueError(f"class index {true_class} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(float(probs[true_class]), PROB_FLOOR)))


def backward(backbone: np.ndarray, dgme: np.ndarray, labels: np.ndarray,
             params: FusionHeadParams) -> tuple[float, dict]:
    """Mean cross-entropy over the batch and its analytic gradients.

    Returns (loss, grads) with grads keyed alpha, ln_gain, ln_bias, W, b.
    Features are constants, so the chain rule stops at the parameters:
    d_logits = (p - onehot)/B, dW = d_logits' @ fused, db = sum d_logits,
    and the descriptor block of W' @ d_logits drives alpha and the
    layer-norm affine parameters.
    """
    backbone = np.asarray(backbone, dtype=np.float64)
    dgme = np.asarray(dgme, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        raise ValueError("batch must be nonempty")

    probs, xhat, normed, fused = _forward_batch(backbone, dgme, params)
    picked = np.maximum(probs[np.arange(n), labels], PROB_FLOOR)
    loss = float(-np.log(picked).mean())

    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n

    grad_w = d_logits.T @ fused
    grad_b = d_logits.sum(axis=0)
    d_fused = d_logits @ params.W
    d_gated = d_fused[:, params.backbone_dim :]  # gradient w.r.t. alpha * LN(d)

    grad_alpha = float((d_gated * normed).sum())
    d_z = params.alpha * d_gated  # gradient w.r.t. LN(d) = gain * xhat + bias
    grad_gain = (d_z * xhat).sum(axis=0)
    grad_bias = d_z.sum(axis=0)
    grads = {
        "alpha": grad_alpha,
        "ln_gain": grad_gain,
        "ln_bias": grad_bias,
        "W": grad_w,
        "b": grad_b,
    }
    return loss, grads


def cosine_lr(step: int, total_steps: int, lr_max: float, floor: float) -> float:
    """Cosine annealing from lr_max (step 0) to floor (step total_steps)."""
    if total_steps <= 0:
        return lr_max
    t = min(max(step, 0), total_steps)
    return floor + (lr_max - floor) * 0.5 * (1.0 + np.cos(np.pi * t / total_steps))


def init_params(class_names, backbone_dim: int, descriptor_dim: int,
                seed: int = 0) -> FusionHeadParams:
    """alpha = 1, LN affine at identity, W seeded uniform, b zero."""
    rng = np.random.default_rng(seed)
    k = len(class_names)
    width = backbone_dim + descriptor_dim
    bound = 1.0 / np.sqrt(max(width, 1))
    return FusionHeadParams(
        alpha=1.0,
        ln_gain=np.ones(descriptor_dim),
        ln_bias=np.zeros(descriptor_dim),
        W=rng.uniform(-bound, bound, size=(k, width)),
        b=np.zeros(k),
        class_names=list(class_names),
        backbone_dim=backbone_dim,
        descriptor_dim=descriptor_dim,
    )


def predict(features: LabeledFeatures, params: FusionHeadParams) -> np.ndarray:
    probs, _, _, _ = _forward_batch(features.backbone_or_empty(), features.dgme, params)
    return probs.argmax(axis=1)


def _macro_f1(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> float:
    from dgme.evaluation import confusion_from_indices, metrics_from_confusion

    cm = confusion_from_indices(y_true, y_pred, num_classes)
    return metrics_from_confusion(cm).macro_f1


def train(head_kind: str, train_set: LabeledFeatures, val_set: LabeledFeatures,
          cfg: TrainConfig) -> tuple[FusionHeadParams, list[dict]]:
    """Train a head with AdamW + cosine annealing; early stop on val macro F1.

    head_kind "dgme_only" ignores backbone features (empty block);
    "fusion" requires them on both splits. Returns the best-epoch
    parameters and one log row per epoch. Deterministic given cfg.seed.
    """
    if head_kind not in ("dgme_only", "fusion"):
        raise ValueError(f"unknown head kind {head_kind!r}")
    if len(train_set.clip_ids) == 0 or len(val_set.clip_ids) == 0:
        raise DataError("training and validation sets must be nonempty")
    if train_set.class_names != val_set.class_names:
        raise DataError("train/val class name lists differ")

    if head_kind == "fusion":
        if train_set.backbone is None or val_set.backbone is None:
            raise DataError("fusion head requires backbone embeddings on both splits")
        xb_train = train_set.backbone
        xb_val = val_set.backbone
    else:
        xb_train = np.zeros((len(train_set.clip_ids), 0))
        xb_val = np.zeros((len(val_set.clip_ids), 0))
    if xb_train.shape[1] != xb_val.shape[1]:
        raise DataError("train/val embedding dimensions differ")
    if train_set.dgme.shape[1] != val_set.dgme.shape[1]:
        raise DataError("train/val descriptor dimensions differ")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(
        train_set.class_names, xb_train.shape[1], train_set.dgme.shape[1], seed=cfg.seed
    )
    num_classes = len(train_set.class_names)
    n = len(train_set.clip_ids)
    beta1, beta2 = cfg.adamw_betas
    moments = {
        k: (np.zeros_like(v), np.zeros_like(v))
        for k, v in (("alpha", np.zeros(())), ("ln_gain", params.ln_gain),
                     ("ln_bias", params.ln_bias), ("W", params.W), ("b", params.b))
    }
    alpha_arr = np.array(params.alpha)

    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch

    log: list[dict] = []
    best_f1 = -1.0
    best_params = params.copy()
    stall = 0
    adam_t = 0
    global_step = 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        lr = cfg.lr_max
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            lr = cosine_lr(global_step, total_steps, cfg.lr_max, cfg.cosine_floor)
            loss, grads = backward(
                xb_train[idx], train_set.dgme[idx], train_set.labels[idx], params
            )
            losses.append(loss)
            adam_t += 1
            bc1 = 1.0 - beta1 ** adam_t
            bc2 = 1.0 - beta2 ** adam_t
            tensors = {
                "alpha": alpha_arr, "ln_gain": params.ln_gain,
                "ln_bias": params.ln_bias, "W": params.W, "b": params.b,
            }
            for key, p in tensors.items():
                g = np.asarray(grads[key], dtype=np.float64)
                m, v = moments[key]
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * g * g
                update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adamw_eps)
                p -= lr * update
                if key == "W" and cfg.weight_decay > 0:
                    # decoupled decay on the linear weights only; decaying the
                    # gate or the affine norm parameters would bias the fusion
                    p -= lr * cfg.weight_decay * p
            params.alpha = float(alpha_arr)
            global_step += 1

        val_pred = predict(
            LabeledFeatures(val_set.clip_ids, val_set.dgme, val_set.labels,
                            val_set.class_names,
                            backbone=None if head_kind == "dgme_only" else val_set.backbone),
            params,
        )
        val_f1 = _macro_f1(val_set.labels, val_pred, num_classes)
        log.append(
            {
                "epoch": epoch,
                "step": global_step,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "val_macro_f1": val_f1,
                "alpha": params.alpha,
            }
        )
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_params = params.copy()
            stall = 0
        else:
            stall += 1
            if stall >= cfg.early_stop_patience:
                break

    if not np.isfinite(best_params.W).all() or not np.isfinite(best_params.b).all():
        raise NumericError("training produced non-finite parameters")
    return best_params, log


# ---------------------------------------------------------------------------
# backbone embedding stub
# ---------------------------------------------------------------------------

def stub_embedding(seq: FrameSequence, seed: int = 0, dim: int = 64) -> np.ndarray:
    """Deterministic clip embedding standing in for a video backbone.

    Concatenates a clip-averaged 32-bin intensity histogram with per-cell
    mean absolute frame-difference energies over a 3x3 grid, then applies
    a fixed seeded random projection to ``dim`` dimensions.
    """
    frames = seq.frames.astype(np.float64)
    hist = np.zeros(32, dtype=np.float64)
    for f in seq.frames:
        counts, _ = np.histogram(f, bins=32, range=(0, 256))
        hist += counts / f.size
    hist /= seq.frame_count

    diffs = np.abs(np.diff(frames, axis=0)).mean(axis=0)  # (H, W)
    h, w = diffs.shape
    ch, cw = h // 3, w // 3
    energies = np.zeros(9, dtype=np.float64)
    for i in range(3):
        y1 = (i + 1) * ch if i < 2 else h
        for j in range(3):
            x1 = (j + 1) * cw if j < 2 else w
            energies[i * 3 + j] = diffs[i * ch : y1, j * cw : x1].mean() / 255.0

    raw = np.concatenate([hist, energies])
    proj = np.random.default_rng(seed).normal(0.0, 1.0, size=(dim, raw.size))
    proj /= np.sqrt(raw.size)
    return proj @ raw


class StubEmbeddingProvider:
    """Embedding provider backed by ``stub_embedding``; pure per clip."""

    def __init__(self, seed: int = 0, dim: int = 64):
        self.seed = seed
        self.dimension = dim
        self.descriptor = f"stub-intensity-motion-v1(seed={seed},dim={dim})"

    def embed(self, seq: FrameSequence) -> np.ndarray:
        return stub_embedding(seq, seed=self.seed, dim=self.dimension)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_model_json(path, params: FusionHeadParams, meta: dict) -> None:
    """JSON with explicit dims and row-major weights; floats round-trip
    exactly through repr."""
    if not (np.isfinite(params.W).all() and np.isfinite(params.b).all()
            and np.isfinite(params.ln_gain).all() and np.isfinite(params.ln_bias).all()
            and np.isfinite(params.alpha)):
        raise NumericError("refusing to serialize non-finite model parameters")
    payload = dict(meta)
    payload.update(
        {
            "class_names": params.class_names,
            "backbone_dim": params.backbone_dim,
            "descriptor_dim": params.descriptor_dim,
            "alpha": params.alpha,
            "ln_gain": params.ln_gain.tolist(),
            "ln_bias": params.ln_bias.tolist(),
            "W": params.W.tolist(),
            "b": params.b.tolist(),
        }
    )
    with open(Path(path), "w", newline="\n") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_model_json(path) -> tuple[FusionHeadParams, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"model file not found: {path}")
    try:
        payload = json.loads(path.read_text())
        params = FusionHeadParams(
            alpha=float(payload["alpha"]),
            ln_gain=np.array(payload["ln_gain"], dtype=np.float64),
            ln_bias=np.array(payload["ln_bias"], dtype=np.float64),
            W=np.array(payload["W"], dtype=np.float64),
            b=np.array(payload["b"], dtype=np.float64),
            class_names=list(payload["class_names"]),
            backbone_dim=int(payload["backbone_dim"]),
            descriptor_dim=int(payload["descriptor_dim"]),
        )
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed model file {path}: {exc}") from exc
    keys = ("class_names", "backbone_dim", "descriptor_dim", "alpha",
            "ln_gain", "ln_bias", "W", "b")
    meta = {k: v for k, v in payload.items() if k not in keys}
    return params, meta


def write_training_log(path, log: list[dict], meta: dict) -> None:
    parts = " ".join(f"{k}={v}" for k, v in meta.items())
    with open(Path(path), "w", newline="\n") as fh:
        fh.write(f"# dgme-trainlog {parts}\n")
        fh.write("epoch,step,lr,train_loss,val_macro_f1,alpha\n")
        for row in log:
            fh.write(
                f"{row['epoch']},{row['step']},{row['lr']:.9g},"
                f"{row['train_loss']:.9g},{row['val_macro_f1']:.9g},{row['alpha']:.9g}\n"
            )

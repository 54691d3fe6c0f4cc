"""Pose head: rotation-bin classification plus quaternion refinement.

Rotation space is quantized into K medoid bins; the head classifies the
bin with cross entropy and regresses a residual quaternion and a 2D
box-relative translation, both under a Huber loss. The final rotation
is offset (x) medoid, in that fixed order. The head itself is linear
over pooled whole-object render features, trained with the same plain
SGD as the embedding towers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .errors import FormatError, TrainingError
from .views import canonical_quat, nearest_medoid, quat_conj, quat_mul

POSE_SECTION = b"POSE"
NORM_EPS = 1e-8


@dataclass
class PoseHeadParams:
    Wc: np.ndarray  # (d_in, K) bin logits
    bc: np.ndarray
    Wq: np.ndarray  # (d_in, 4) offset quaternion (pre-normalization)
    bq: np.ndarray
    Wt: np.ndarray  # (d_in, 2) translation ratios
    bt: np.ndarray

    def copy(self) -> "PoseHeadParams":
        return PoseHeadParams(*(a.copy() for a in self.arrays()))

    def arrays(self):
        return (self.Wc, self.bc, self.Wq, self.bq, self.Wt, self.bt)


@dataclass
class PosePrediction:
    bin_logits: np.ndarray  # (K,)
    offset: np.ndarray      # unit quaternion (4,)
    translation: np.ndarray  # (2,)

    @property
    def bin_index(self) -> int:
        return int(np.argmax(self.bin_logits))


def init_pose_head(d_in: int, k: int, seed: int) -> PoseHeadParams:
    rng = np.random.default_rng(seed)
    s = np.sqrt(1.0 / d_in)
    return PoseHeadParams(
        Wc=rng.normal(0.0, s, size=(d_in, k)),
        bc=np.zeros(k),
        Wq=rng.normal(0.0, s, size=(d_in, 4)),
        bq=np.zeros(4),
        Wt=rng.normal(0.0, s, size=(d_in, 2)),
        bt=np.zeros(2),
    )


def huber(x: np.ndarray, delta: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    return np.where(a <= delta, 0.5 * x * x, delta * (a - 0.5 * delta))


def huber_grad(x: np.ndarray, delta: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) <= delta, x, delta * np.sign(x))


def assign_rotation_bin(
    medoids: np.ndarray, rotation: np.ndarray
) -> tuple[int, np.ndarray]:
    """Nearest-medoid bin and the residual with residual (x) medoid = rotation."""
    idx = nearest_medoid(rotation, medoids)
    residual = canonical_quat(quat_mul(rotation, quat_conj(medoids[idx])))
    return idx, residual


def compose_rotation(medoids: np.ndarray, pred: PosePrediction) -> np.ndarray:
    return canonical_quat(quat_mul(pred.offset, medoids[pred.bin_index]))


def _normalize_quat_rows(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = raw.copy()
    norms = np.linalg.norm(raw, axis=1)
    tiny = norms < NORM_EPS
    if tiny.any():
        raw[tiny, 0] += NORM_EPS
        norms = np.linalg.norm(raw, axis=1)
    return raw / norms[:, None], raw


def pose_forward(params: PoseHeadParams, X: np.ndarray):
    """Raw head outputs for a feature batch: logits, unit offsets, translations."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    logits = X @ params.Wc + params.bc
    raw_q = X @ params.Wq + params.bq
    offsets, raw_q = _normalize_quat_rows(raw_q)
    trans = X @ params.Wt + params.bt
    return logits, offsets, raw_q, trans


def predict_pose(
    params: PoseHeadParams, medoids: np.ndarray, features: np.ndarray
) -> PosePrediction:
    logits, offsets, _, trans = pose_forward(params, features)
    return PosePrediction(
        bin_logits=logits[0],
        offset=canonical_quat(offsets[0]),
        translation=trans[0],
    )


def pose_losses(
    pred: PosePrediction,
    gt_bin: int,
    gt_offset: np.ndarray,
    gt_translation: np.ndarray,
    delta: float = 1.0,
) -> tuple[float, float, float]:
    """(cross-entropy, offset Huber, translation Huber) for one sample."""
    z = pred.bin_logits - pred.bin_logits.max()
    ce = float(np.log(np.exp(z).sum()) - z[gt_bin])
    q = pred.offset
    if float(np.dot(q, gt_offset)) < 0:
        q = -q
    off = float(huber(q - gt_offset, delta).sum())
    tr = float(huber(pred.translation - np.asarray(gt_translation), delta).sum())
    return ce, off, tr


@dataclass
class PoseDataset:
    features: np.ndarray      # (N, d_in)
    gt_bins: np.ndarray       # (N,) int
    gt_offsets: np.ndarray    # (N, 4) canonical unit quaternions
    gt_translations: np.ndarray  # (N, 2)


@dataclass
class PoseTrainResult:
    params: PoseHeadParams
    history: list[tuple[int, float]] = field(default_factory=list)


def pose_loss_and_grad(
    params: PoseHeadParams, data: PoseDataset, delta: float
) -> tuple[float, PoseHeadParams]:
    """Mean total loss over the batch and its analytic gradient."""
    N = len(data.features)
    if N == 0:
        raise TrainingError("empty pose batch")
    X = data.features
    logits, offsets, raw_q, trans = pose_forward(params, X)

    # cross entropy
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    ce = -np.log(p[np.arange(N), data.gt_bins])
    dlogits = p.copy()
    dlogits[np.arange(N), data.gt_bins] -= 1.0

    # offset huber on sign-aligned unit quaternions
    dots = np.sum(offsets * data.gt_offsets, axis=1)
    signs = np.where(dots < 0, -1.0, 1.0)
    aligned = offsets * signs[:, None]
    qres = aligned - data.gt_offsets
    off_loss = huber(qres, delta).sum(axis=1)
    daligned = huber_grad(qres, delta)
    dY = daligned * signs[:, None]
    norms = np.linalg.norm(raw_q, axis=1, keepdims=True)
    draw = (dY - np.sum(dY * offsets, axis=1, keepdims=True) * offsets) / norms

    # translation huber
    tres = trans - data.gt_translations
    tr_loss = huber(tres, delta).sum(axis=1)
    dtrans = huber_grad(tres, delta)

    total = float((ce + off_loss + tr_loss).mean())
    scale = 1.0 / N
    grad = PoseHeadParams(
        Wc=X.T @ dlogits * scale,
        bc=dlogits.sum(axis=0) * scale,
        Wq=X.T @ draw * scale,
        bq=draw.sum(axis=0) * scale,
        Wt=X.T @ dtrans * scale,
        bt=dtrans.sum(axis=0) * scale,
    )
    return total, grad


def train_pose_head(
    data: PoseDataset,
    cfg: Config,
    d_in: int | None = None,
    epochs: int | None = None,
    learning_rate: float | None = None,
) -> PoseTrainResult:
    """Mini-batch SGD on the combined pose loss; seed-deterministic."""
    N = len(data.features)
    if N == 0:
        raise TrainingError("empty pose dataset")
    d_in = d_in or data.features.shape[1]
    k = int(data.gt_bins.max()) + 1 if len(data.gt_bins) else cfg.pose_bins
    k = max(k, cfg.pose_bins)
    params = init_pose_head(d_in, k, seed=cfg.seed)
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    rng = np.random.default_rng(cfg.seed + 2)
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(N)
        total = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = PoseDataset(
                features=data.features[idx],
                gt_bins=data.gt_bins[idx],
                gt_offsets=data.gt_offsets[idx],
                gt_translations=data.gt_translations[idx],
            )
            loss, grad = pose_loss_and_grad(params, batch, cfg.huber_delta)
            total += loss * len(idx)
            for arr, g in zip(params.arrays(), grad.arrays()):
                arr -= lr * g
        history.append((epoch, total / N))
    return PoseTrainResult(params=params, history=history)


def pack_pose_section(params: PoseHeadParams, medoids: np.ndarray) -> bytes:
    """Serialize head + bins: u32 K, u32 d_in, f64 medoids, f32 weights."""
    d_in, k = params.Wc.shape
    parts = [struct.pack("<II", k, d_in)]
    parts.append(np.ascontiguousarray(medoids, dtype="<f8").tobytes())
    for arr in params.arrays():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def unpack_pose_section(blob: bytes) -> tuple[PoseHeadParams, np.ndarray]:
    if len(blob) < 8:
        raise FormatError("truncated pose section")
    k, d_in = struct.unpack_from("<II", blob, 0)
    offset = 8
    medoids = np.frombuffer(blob, dtype="<f8", count=k * 4, offset=offset)
    medoids = medoids.reshape(k, 4).copy()
    offset += k * 32
    shapes = [(d_in, k), (k,), (d_in, 4), (4,), (d_in, 2), (2,)]
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        if offset + 4 * n > len(blob):
            raise FormatError("truncated pose section weights")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        arrays.append(arr.astype(np.float64).reshape(shape))
        offset += 4 * n
    return PoseHeadParams(*arrays), medoids

"""Per-frame learner and temporal teacher regressors, with exact gradients.

Both networks are small tanh MLPs over flat weight vectors: the learner maps
a 32-dim frame feature to body/camera parameters, the teacher first
aggregates a 5-frame window into (mean, center - mean) and then applies the
same kind of head. Reverse-mode gradients are written out by hand so every
backward path can be checked against central finite differences. Weight
updates go through a plain Adam with bias correction.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .body_model import BETA_DIM, BodyParams, CamParams, THETA_DIM
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    FormatError,
    NumericError,
)

FEATURE_DIM = 32
OUTPUT_DIM = THETA_DIM + BETA_DIM + 3  # 51 + 10 + 3 = 64
LEARNER_DIMS = (32, 64, 64, 64)
TEACHER_DIMS = (64, 64, 64, 64)
HALF_WINDOW = 2
WINDOW_LEN = 2 * HALF_WINDOW + 1
CAM_SCALE_FLOOR = 1e-3

LEARNER_ROLES = ("f0", "fs", "fa")
ROLE_TAGS = LEARNER_ROLES + ("teacher",)
WEIGHTS_SCHEMA = "weights.v1"


def value_count(layer_dims) -> int:
    dims = list(layer_dims)
    return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


@dataclass
class ModelWeights:
    """Flat parameter vector for one network, tagged with its role."""

    layer_dims: tuple
    values: np.ndarray
    role_tag: str
    seed: int = 0
    version: str = WEIGHTS_SCHEMA

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise ConfigurationError(f"bad layer_dims {self.layer_dims}")
        if self.role_tag not in ROLE_TAGS:
            raise ConfigurationError(f"unknown role_tag {self.role_tag!r}")
        if self.layer_dims[-1] != OUTPUT_DIM:
            raise ConfigurationError(
                f"{self.role_tag} network must end in {OUTPUT_DIM} outputs, "
                f"got {self.layer_dims[-1]}"
            )
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        expected = value_count(self.layer_dims)
        if self.values.size != expected:
            raise DimensionError(
                f"values length {self.values.size} != expected {expected}"
            )
        self.seed = int(self.seed)


@dataclass
class AdamState:
    """First/second moment buffers plus hyperparameters for one weight set."""

    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TemporalWindow:
    """2j+1 feature vectors centered on the current frame (j = 2)."""

    frames: np.ndarray
    edge_replication: bool = True

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.shape != (WINDOW_LEN, FEATURE_DIM):
            raise DimensionError(
                f"window: expected ({WINDOW_LEN}, {FEATURE_DIM}), got {self.frames.shape}"
            )


def init_weights(layer_dims, seed: int, role_tag: str = "f0") -> ModelWeights:
    """Glorot-uniform weights, zero biases; bit-reproducible per seed."""
    dims = tuple(int(d) for d in layer_dims)
    rng = np.random.default_rng(int(seed))
    chunks = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-a, a, fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ModelWeights(dims, np.concatenate(chunks), role_tag, seed=int(seed))


def deepcopy_weights(w: ModelWeights, role_tag: str | None = None) -> ModelWeights:
    """Independent copy, optionally retagged (e.g. f0 -> fs)."""
    return ModelWeights(
        w.layer_dims, w.values.copy(), role_tag or w.role_tag, seed=w.seed,
        version=w.version,
    )


def _unpack(dims, values):
    layers, pos = [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = values[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = values[pos : pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def _mlp_forward(dims, values, x):
    """x: (B, dims[0]). Returns (y (B, dims[-1]), activation cache)."""
    layers = _unpack(dims, values)
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def _mlp_backward(dims, values, acts, dy):
    """Exact reverse pass; returns (dvalues flat, dx)."""
    layers = _unpack(dims, values)
    grads = [None] * len(layers)
    g_pre = dy
    for i in reversed(range(len(layers))):
        w, _ = layers[i]
        a_prev = acts[i]
        grads[i] = (a_prev.T @ g_pre, g_pre.sum(axis=0))
        g_out_prev = g_pre @ w.T
        if i > 0:
            g_pre = g_out_prev * (1.0 - acts[i] ** 2)
        else:
            dx = g_out_prev
    flat = np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])
    return flat, dx


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def split_head(y):
    """64-dim raw output -> (BodyParams, CamParams); scale via softplus."""
    theta = y[:THETA_DIM]
    beta = y[THETA_DIM : THETA_DIM + BETA_DIM]
    raw = y[THETA_DIM + BETA_DIM :]
    cam = CamParams(float(softplus(raw[0]) + CAM_SCALE_FLOOR), raw[1:3].copy())
    return BodyParams(theta.copy(), beta.copy()), cam


def _head_upstream(y_raw_cam0, dtheta, dbeta, dcam):
    """Assemble dL/dy from gradients on (theta, beta, cam=(scale, tx, ty))."""
    dtheta = np.asarray(dtheta, dtype=np.float64)
    dbeta = np.asarray(dbeta, dtype=np.float64)
    dcam = np.asarray(dcam, dtype=np.float64)
    if dtheta.shape != (THETA_DIM,) or dbeta.shape != (BETA_DIM,) or dcam.shape != (3,):
        raise DimensionError("upstream gradient shapes do not match theta|beta|cam")
    dy = np.empty(OUTPUT_DIM)
    dy[:THETA_DIM] = dtheta
    dy[THETA_DIM : THETA_DIM + BETA_DIM] = dbeta
    dy[THETA_DIM + BETA_DIM] = dcam[0] * sigmoid(np.array([y_raw_cam0]))[0]
    dy[THETA_DIM + BETA_DIM + 1 :] = dcam[1:]
    return dy


def _require_learner(w):
    if w.role_tag not in LEARNER_ROLES:
        raise ConfigurationError(f"expected a learner role, got {w.role_tag!r}")


def _require_teacher(w):
    if w.role_tag != "teacher":
        raise ConfigurationError(f"expected teacher role, got {w.role_tag!r}")


def learner_forward(w: ModelWeights, feature) -> tuple[BodyParams, CamParams]:
    """Per-frame regressor: 32-dim feature -> body and camera parameters."""
    _require_learner(w)
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (w.layer_dims[0],):
        raise DimensionError(
            f"feature: expected ({w.layer_dims[0]},), got {feature.shape}"
        )
    y, _ = _mlp_forward(w.layer_dims, w.values, feature[None, :])
    return split_head(y[0])


def learner_backward(w: ModelWeights, feature, dtheta, dbeta, dcam) -> np.ndarray:
    """Gradient of the forward map w.r.t. w.values for given upstream
    gradients on (theta, beta, cam), cam in (scale, tx, ty) space."""
    _require_learner(w)
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (w.layer_dims[0],):
        raise DimensionError(
            f"feature: expected ({w.layer_dims[0]},), got {feature.shape}"
        )
    y, acts = _mlp_forward(w.layer_dims, w.values, feature[None, :])
    dy = _head_upstream(y[0, THETA_DIM + BETA_DIM], dtheta, dbeta, dcam)
    grads, _ = _mlp_backward(w.layer_dims, w.values, acts, dy[None, :])
    return grads


def window_input(window: TemporalWindow) -> np.ndarray:
    """Aggregate a window to (mean, center - mean), a 64-dim head input."""
    mean = window.frames.mean(axis=0)
    return np.concatenate([mean, window.frames[HALF_WINDOW] - mean])


def make_window(features, center: int) -> TemporalWindow:
    """Window of 2j+1 frames around `center` with edge replication."""
    features = np.asarray(features, dtype=np.float64)
    idx = np.clip(
        np.arange(center - HALF_WINDOW, center + HALF_WINDOW + 1),
        0,
        len(features) - 1,
    )
    return TemporalWindow(features[idx])


def window_inputs_all(features) -> np.ndarray:
    """(T, 32) sequence features -> (T, 64) teacher inputs, edge-replicated."""
    features = np.asarray(features, dtype=np.float64)
    t_len = len(features)
    offsets = np.arange(-HALF_WINDOW, HALF_WINDOW + 1)
    idx = np.clip(np.arange(t_len)[:, None] + offsets[None, :], 0, t_len - 1)
    mean = features[idx].mean(axis=1)
    return np.concatenate([mean, features - mean], axis=1)


def teacher_forward(w: ModelWeights, window: TemporalWindow):
    """Temporal teacher: window aggregation followed by the parameter head."""
    _require_teacher(w)
    x = window_input(window)
    y, _ = _mlp_forward(w.layer_dims, w.values, x[None, :])
    return split_head(y[0])


def teacher_backward(w: ModelWeights, window: TemporalWindow, dtheta, dbeta, dcam):
    _require_teacher(w)
    x = window_input(window)
    y, acts = _mlp_forward(w.layer_dims, w.values, x[None, :])
    dy = _head_upstream(y[0, THETA_DIM + BETA_DIM], dtheta, dbeta, dcam)
    grads, _ = _mlp_backward(w.layer_dims, w.values, acts, dy[None, :])
    return grads


def adam_init(n_params: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(np.zeros(n_params), np.zeros(n_params), 0, float(lr), beta1, beta2, eps)


def adam_step(state: AdamState, w: ModelWeights, grad) -> tuple[AdamState, ModelWeights]:
    """One bias-corrected Adam update; inputs are left untouched."""
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.size != w.values.size:
        raise DimensionError(f"grad length {grad.size} != weights {w.values.size}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to adam_step")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    values = w.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_state, replace(w, values=values)


def weights_to_json(w: ModelWeights) -> str:
    doc = {
        "schema": WEIGHTS_SCHEMA,
        "version": w.version,
        "role_tag": w.role_tag,
        "seed": w.seed,
        "layer_dims": list(w.layer_dims),
        "values": base64.b64encode(w.values.astype("<f8").tobytes()).decode("ascii"),
    }
    return json.dumps(doc, separators=(",", ":"), sort_keys=True)


def weights_from_json(text: str) -> ModelWeights:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"weights file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != WEIGHTS_SCHEMA:
        raise FormatError(f"expected schema {WEIGHTS_SCHEMA!r}")
    try:
        values = np.frombuffer(
            base64.b64decode(doc["values"], validate=True), dtype="<f8"
        ).astype(np.float64)
        return ModelWeights(
            tuple(doc["layer_dims"]),
            values,
            doc["role_tag"],
            seed=int(doc["seed"]),
            version=doc["version"],
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"malformed weights field: {exc}") from exc


def save_weights(w: ModelWeights, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(weights_to_json(w) + "\n")


def load_weights(path) -> ModelWeights:
    with open(path, "r", encoding="utf-8") as fh:
        return weights_from_json(fh.read())


def weights_hash(w: ModelWeights) -> str:
    return hashlib.sha256(weights_to_json(w).encode()).hexdigest()[:16]


@dataclass
class PretrainConfig:
    """Supervised pretraining schedule for manufacturing f0 and the teacher.

    The learner sees mildly noised single-frame features while the teacher
    sees clean temporal windows, so the teacher comes out strictly better on
    the source stream. The reprojection term is evaluated on a fixed-size
    subsample of each batch to keep steps cheap.
    """

    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    input_noise_std: float = 0.05
    teacher_noise_std: float = 0.08  # applied frame-wise before aggregation
    w_theta: float = 10.0
    w_beta: float = 0.1
    w_cam: float = 1.0
    reproj_weight: float = 1.0
    reproj_subset: int = 8
    reproj_warmup_frac: float = 0.5  # 2D term joins once the camera has settled
    seed: int = 0


def _supervised_batch_grads(dims, values, x, gt_theta, gt_beta, gt_cam, cfg,
                            guides, templates, reproj_on=True):
    """Forward a batch, return (mean loss, flat grads) for the MSE-to-GT plus
    subsampled reprojection objective."""
    from .adaptation import guide_reprojection_term  # deferred: avoids cycle

    y, acts = _mlp_forward(dims, values, x)
    b = x.shape[0]
    pred_theta = y[:, :THETA_DIM]
    pred_beta = y[:, THETA_DIM : THETA_DIM + BETA_DIM]
    raw = y[:, THETA_DIM + BETA_DIM :]
    scale = softplus(raw[:, 0]) + CAM_SCALE_FLOOR
    cam_vec = np.column_stack([scale, raw[:, 1:3]])

    d_theta = pred_theta - gt_theta
    d_beta = pred_beta - gt_beta
    d_cam = cam_vec - gt_cam
    loss = (
        cfg.w_theta * np.sum(d_theta**2, axis=1)
        + cfg.w_beta * np.sum(d_beta**2, axis=1)
        + cfg.w_cam * np.sum(d_cam**2, axis=1)
    )
    dy = np.zeros_like(y)
    dy[:, :THETA_DIM] = 2.0 * cfg.w_theta * d_theta
    dy[:, THETA_DIM : THETA_DIM + BETA_DIM] = 2.0 * cfg.w_beta * d_beta
    dcam_full = 2.0 * cfg.w_cam * d_cam

    n_sub = min(cfg.reproj_subset, b) if (reproj_on and cfg.reproj_weight > 0.0) else 0
    for i in range(n_sub):
        params = BodyParams(pred_theta[i], pred_beta[i])
        cam = CamParams(cam_vec[i, 0], cam_vec[i, 1:])
        val, gt_, gb_, gc_ = guide_reprojection_term(params, cam, guides[i], templates)
        # subset term rescaled so its expected weight matches the full batch
        f = cfg.reproj_weight * b / n_sub
        loss[i] += f * val
        dy[i, :THETA_DIM] += f * gt_
        dy[i, THETA_DIM : THETA_DIM + BETA_DIM] += f * gb_
        dcam_full[i] += f * gc_
    dy[:, THETA_DIM + BETA_DIM] = dcam_full[:, 0] * sigmoid(raw[:, 0])
    dy[:, THETA_DIM + BETA_DIM + 1 :] = dcam_full[:, 1:]
    dy /= b
    grads, _ = _mlp_backward(dims, values, acts, dy)
    return float(loss.mean()), grads


def pretrain_backbones(source, cfg: PretrainConfig, template):
    """Manufacture the pretrained learner (f0) and frozen temporal teacher
    from a ground-truth-carrying source stream."""
    frames = source.frames
    if not frames:
        raise DataError("source stream is empty")
    if any(fr.gt is None for fr in frames):
        raise DataError("pretraining requires ground truth on every frame")

    features = np.stack([fr.feature for fr in frames])
    # per-frame window index map so teacher inputs can be noised frame-wise
    win_idx = np.empty((len(frames), WINDOW_LEN), dtype=np.int64)
    pos = 0
    for seq in source.sequences().values():
        t_len = len(seq)
        offs = np.arange(-HALF_WINDOW, HALF_WINDOW + 1)
        local = np.clip(np.arange(t_len)[:, None] + offs[None, :], 0, t_len - 1)
        win_idx[pos : pos + t_len] = local + pos
        pos += t_len
    gt_theta = np.stack([fr.gt.params.theta for fr in frames])
    gt_beta = np.stack([fr.gt.params.beta for fr in frames])
    gt_cam = np.stack([fr.gt.cam.as_vector() for fr in frames])
    guides = [fr.guide for fr in frames]

    f0 = init_weights(LEARNER_DIMS, cfg.seed, "f0")
    teacher = init_weights(TEACHER_DIMS, cfg.seed + 1, "teacher")
    adam_l = adam_init(f0.values.size, cfg.lr)
    adam_t = adam_init(teacher.values.size, cfg.lr)
    rng = np.random.default_rng([int(cfg.seed), 11])
    n = len(frames)

    for step in range(cfg.steps):
        reproj_on = step >= cfg.reproj_warmup_frac * cfg.steps
        idx = rng.integers(0, n, cfg.batch_size)
        noise = rng.normal(0.0, 1.0, (cfg.batch_size, FEATURE_DIM))
        x_l = features[idx] + cfg.input_noise_std * noise
        batch_guides = [guides[i] for i in idx]
        _, g_l = _supervised_batch_grads(
            f0.layer_dims, f0.values, x_l,
            gt_theta[idx], gt_beta[idx], gt_cam[idx], cfg, batch_guides, template,
            reproj_on,
        )
        adam_l, f0 = adam_step(adam_l, f0, g_l)
        # teacher windows are noised frame-wise, then aggregated, so it
        # learns how far to trust the noisy difference channel
        win_noise = rng.normal(0.0, 1.0, (cfg.batch_size, WINDOW_LEN, FEATURE_DIM))
        win_frames = features[win_idx[idx]] + cfg.teacher_noise_std * win_noise
        mean = win_frames.mean(axis=1)
        x_t = np.concatenate([mean, win_frames[:, HALF_WINDOW] - mean], axis=1)
        _, g_t = _supervised_batch_grads(
            teacher.layer_dims, teacher.values, x_t,
            gt_theta[idx], gt_beta[idx], gt_cam[idx], cfg, batch_guides, template,
            reproj_on,
        )
        adam_t, teacher = adam_step(adam_t, teacher, g_t)
    return f0, teacher

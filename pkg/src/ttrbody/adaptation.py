"""Collaborative test-time refinement: pre-adaptation plus bilevel stage.

Stage one distills frozen temporal-teacher outputs into a learner that sees
Gaussian-corrupted features, under a four-term loss (pose, shape, camera
consistency, and a confidence-weighted 2D guide term). Stage two walks the
stream in order, taking one first-order two-loop update per frame (an inner
probe on the 2D-guide loss, an outer step on the teacher-consistency loss
evaluated at the probe) and re-initializing the adapting weights from the
pre-adapted snapshot at every sequence boundary.

Runs are strictly sequential and bitwise deterministic per (seed, data,
config); the incoming weight sets are never mutated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .body_model import (
    BodyParams,
    BodyTemplate,
    CamParams,
    Keypoints2D,
    body_jacobians,
    forward_kinematics,
    project_weak_perspective,
)
from .data_io import OutputRecord, SequenceStream, sample_epoch
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    NumericError,
)
from .metrics import FrameMetrics, _ltr_mean, mpjpe, pa_mpjpe
from .nnet import (
    LEARNER_ROLES,
    ModelWeights,
    TemporalWindow,
    adam_init,
    adam_step,
    deepcopy_weights,
    learner_backward,
    learner_forward,
    make_window,
    teacher_forward,
)


@dataclass
class NoiseLevel:
    """Corruption strength on the 0-255 pixel scale; features are unit-scale,
    so the applied standard deviation is sigma_pixel / 255."""

    sigma_pixel: float = 35.0

    def __post_init__(self):
        self.sigma_pixel = float(self.sigma_pixel)
        if not self.sigma_pixel >= 0.0:
            raise ConfigurationError("sigma_pixel must be >= 0")

    @property
    def sigma_feature(self) -> float:
        return self.sigma_pixel / 255.0


@dataclass
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    lambda4: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            v = float(getattr(self, name))
            if not v >= 0.0:
                raise ConfigurationError(f"{name} must be >= 0")
            setattr(self, name, v)


@dataclass
class PreAdaptConfig:
    epochs: int = 600
    sequences_per_epoch: int = 3
    frames_per_sequence: int = 8
    noise: NoiseLevel = field(default_factory=NoiseLevel)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-5
    seed: int = 0
    eval_every: int = 0  # 0 = skip in-run MPJPE evaluation

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.sequences_per_epoch < 1 or self.frames_per_sequence < 1:
            raise ConfigurationError("sampling counts must be >= 1")
        self.seed = int(self.seed)


@dataclass
class BilevelConfig:
    lr_inner: float = 1e-5
    lr_outer: float = 1e-5
    steps_per_frame: int = 1
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr_inner < 0.0 or self.lr_outer < 0.0:
            raise ConfigurationError("bilevel learning rates must be >= 0")
        if self.steps_per_frame < 0:
            raise ConfigurationError("steps_per_frame must be >= 0")


@dataclass
class SequenceBuffer:
    """Latest-sequence marker driving weight regeneration."""

    last_sequence_name: str | None = None


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    mpjpe_mm: float | None = None
    pa_mpjpe_mm: float | None = None


@dataclass
class FrameLog:
    frame_id: str
    sequence: str
    loss: float
    mpjpe_mm: float | None
    pa_mpjpe_mm: float | None
    regenerated: bool


def corrupt(feature, noise: NoiseLevel, rng) -> np.ndarray:
    """Additive iid Gaussian corruption drawn from the given stream.

    sigma 0 is the bitwise identity and consumes no draws.
    """
    feature = np.asarray(feature, dtype=np.float64)
    if not np.all(np.isfinite(feature)):
        raise NumericError("cannot corrupt a non-finite feature")
    if noise.sigma_feature == 0.0:
        return feature.copy()
    return feature + rng.normal(0.0, noise.sigma_feature, feature.shape)


def _chain_2d_to_params(dl_dpred, params, cam, template):
    """Backpropagate a gradient on projected keypoints to (theta, beta, cam)."""
    jac = body_jacobians(params, cam, template)
    dl_dx = np.zeros((dl_dpred.shape[0], 3))
    dl_dx[:, :2] = cam.scale * dl_dpred
    dtheta = np.einsum("ic,ick->k", dl_dx, jac.djoints_dtheta)
    dbeta = np.einsum("ic,ick->k", dl_dx, jac.djoints_dbeta)
    dcam = np.einsum("ic,ick->k", dl_dpred, jac.dkeypoints_dcam)
    return dtheta, dbeta, dcam


def guide_reprojection_term(params: BodyParams, cam: CamParams,
                            guide: Keypoints2D, template: BodyTemplate):
    """Confidence-weighted squared 2D residual between the guide and the
    projected joints, plus its gradients on (theta, beta, cam)."""
    joints = forward_kinematics(params, template)
    proj = project_weak_perspective(joints, cam)
    resid = guide.points - proj.points
    conf = guide.confidence
    value = float(np.sum(conf * np.sum(resid**2, axis=1)))
    dl_dpred = -2.0 * conf[:, None] * resid
    dtheta, dbeta, dcam = _chain_2d_to_params(dl_dpred, params, cam, template)
    return value, dtheta, dbeta, dcam


def preadapt_loss(labels, perturbed, guide: Keypoints2D, weights: LossWeights,
                  template: BodyTemplate):
    """Four-term pre-adaptation loss between teacher labels and the learner's
    perturbed outputs; returns the scalar and gradients on the perturbed
    (theta, beta, cam) for backprop through the learner."""
    (p_l, c_l), (p_r, c_r) = labels, perturbed
    d_theta = p_l.theta - p_r.theta
    d_beta = p_l.beta - p_r.beta
    d_cam = c_l.as_vector() - c_r.as_vector()
    l4, g4t, g4b, g4c = guide_reprojection_term(p_r, c_r, guide, template)
    value = (
        weights.lambda1 * float(d_theta @ d_theta)
        + weights.lambda2 * float(d_beta @ d_beta)
        + weights.lambda3 * float(d_cam @ d_cam)
        + weights.lambda4 * l4
    )
    if not np.isfinite(value):
        raise NumericError("pre-adaptation loss is non-finite")
    grad_theta = -2.0 * weights.lambda1 * d_theta + weights.lambda4 * g4t
    grad_beta = -2.0 * weights.lambda2 * d_beta + weights.lambda4 * g4b
    grad_cam = -2.0 * weights.lambda3 * d_cam + weights.lambda4 * g4c
    return value, (grad_theta, grad_beta, grad_cam)


def keypoint2d_loss(pred: Keypoints2D, guide: Keypoints2D):
    """Confidence-weighted mean squared 2D error and its gradient on pred."""
    if pred.points.shape != guide.points.shape:
        raise DimensionError("keypoint sets differ in joint count")
    n = pred.points.shape[0]
    resid = pred.points - guide.points
    conf = guide.confidence
    value = float(np.sum(conf * np.sum(resid**2, axis=1)) / n)
    dpred = 2.0 * conf[:, None] * resid / n
    return value, dpred


def evaluate_stream(weights: ModelWeights, stream: SequenceStream,
                    template: BodyTemplate):
    """Forward every GT-carrying frame; returns (mean MPJPE, mean PA-MPJPE,
    per-frame metrics)."""
    if weights.role_tag not in LEARNER_ROLES:
        raise ConfigurationError("evaluate_stream expects learner weights")
    per_frame = []
    for fr in stream.frames:
        if fr.gt is None:
            continue
        params, _ = learner_forward(weights, fr.feature)
        joints = forward_kinematics(params, template)
        per_frame.append(
            FrameMetrics(
                fr.frame_id,
                fr.sequence_name,
                mpjpe(joints, fr.gt.joints),
                pa_mpjpe(joints, fr.gt.joints),
            )
        )
    if not per_frame:
        raise DataError("stream carries no ground truth to evaluate against")
    mean_mp = _ltr_mean(m.mpjpe_mm for m in per_frame)
    mean_pa = _ltr_mean(m.pa_mpjpe_mm for m in per_frame)
    return mean_mp, mean_pa, per_frame


def _teacher_labels_for(teacher, features):
    """Teacher outputs for every frame of one sequence's feature block."""
    labels = []
    for t in range(len(features)):
        labels.append(teacher_forward(teacher, make_window(features, t)))
    return labels


def preadapt_run(f0: ModelWeights, teacher: ModelWeights, target: SequenceStream,
                 cfg: PreAdaptConfig, template: BodyTemplate):
    """Teacher-to-learner pre-adaptation over the sampled epoch schedule.

    f0 is deep-copied up front and never mutated; one Adam step is taken per
    sampled single-sequence batch. Returns the pre-adapted weights and the
    per-epoch log.
    """
    if f0.role_tag not in LEARNER_ROLES:
        raise ConfigurationError(f"f0 must be a learner, got {f0.role_tag!r}")
    if teacher.role_tag != "teacher":
        raise ConfigurationError(f"teacher role expected, got {teacher.role_tag!r}")
    if not target.frames:
        raise DataError("target stream is empty")

    f_s = deepcopy_weights(f0, "fs")
    adam = adam_init(f_s.values.size, cfg.lr)
    rng_corrupt = np.random.default_rng([cfg.seed, 202])

    # frozen teacher: labels per frame are run constants
    label_cache = {}
    for name, seq in target.sequences().items():
        feats = np.stack([fr.feature for fr in seq])
        label_cache[name] = _teacher_labels_for(teacher, feats)

    has_gt = all(fr.gt is not None for fr in target.frames)
    log = []
    for epoch in range(cfg.epochs):
        batches = sample_epoch(
            target, cfg.seed, epoch, cfg.sequences_per_epoch, cfg.frames_per_sequence
        )
        batch_losses = []
        for batch in batches:
            grad_sum = np.zeros(f_s.values.size)
            loss_sum = 0.0
            for fr in batch:
                feat_r = corrupt(fr.feature, cfg.noise, rng_corrupt)
                pred = learner_forward(f_s, feat_r)
                labels = label_cache[fr.sequence_name][fr.frame_index]
                loss, (gt_, gb_, gc_) = preadapt_loss(
                    labels, pred, fr.guide, cfg.loss_weights, template
                )
                grad_sum += learner_backward(f_s, feat_r, gt_, gb_, gc_)
                loss_sum += loss
            adam, f_s = adam_step(adam, f_s, grad_sum / len(batch))
            batch_losses.append(loss_sum / len(batch))
        entry = EpochLog(epoch + 1, _ltr_mean(batch_losses))
        if has_gt and cfg.eval_every > 0 and (
            (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs
        ):
            entry.mpjpe_mm, entry.pa_mpjpe_mm, _ = evaluate_stream(
                f_s, target, template
            )
        log.append(entry)
    return f_s, log


def first_order_bilevel_update(phi, inner_grad_fn, outer_grad_fn,
                               lr_inner: float, lr_outer: float, steps: int = 1):
    """The two-loop update rule used per frame: probe with the inner
    gradient, then step the base point with the outer gradient evaluated at
    the probe (probe dependence on the base treated as identity).

    Returns (updated phi, last outer loss or None when steps == 0).
    """
    phi = np.asarray(phi, dtype=np.float64).copy()
    loss = None
    for _ in range(steps):
        _, g_inner = inner_grad_fn(phi)
        probe = phi - lr_inner * np.asarray(g_inner)
        loss, g_outer = outer_grad_fn(probe)
        phi = phi - lr_outer * np.asarray(g_outer)
    return phi, loss


def bilevel_step(f_a: ModelWeights, feature, window: TemporalWindow,
                 guide: Keypoints2D, teacher: ModelWeights, cfg: BilevelConfig,
                 template: BodyTemplate):
    """One per-frame refinement update; returns ((theta, beta, cam) as
    (BodyParams, CamParams), the updated weights, and the outer loss)."""
    if f_a.role_tag not in LEARNER_ROLES:
        raise ConfigurationError(f"f_a must be a learner, got {f_a.role_tag!r}")
    labels = teacher_forward(teacher, window)
    feature = np.asarray(feature, dtype=np.float64)

    def at(phi):
        return ModelWeights(f_a.layer_dims, phi, f_a.role_tag, seed=f_a.seed)

    def inner_grad(phi):
        w = at(phi)
        params, cam = learner_forward(w, feature)
        proj = project_weak_perspective(forward_kinematics(params, template), cam)
        loss, dpred = keypoint2d_loss(proj, guide)
        dtheta, dbeta, dcam = _chain_2d_to_params(dpred, params, cam, template)
        return loss, learner_backward(w, feature, dtheta, dbeta, dcam)

    def outer_grad(phi):
        w = at(phi)
        pred = learner_forward(w, feature)
        loss, (gt_, gb_, gc_) = preadapt_loss(
            labels, pred, guide, cfg.loss_weights, template
        )
        return loss, learner_backward(w, feature, gt_, gb_, gc_)

    phi, loss = first_order_bilevel_update(
        f_a.values, inner_grad, outer_grad, cfg.lr_inner, cfg.lr_outer,
        cfg.steps_per_frame,
    )
    if loss is None:
        loss, _ = outer_grad(phi)
    new_w = at(phi)
    outputs = learner_forward(new_w, feature)
    return outputs, new_w, loss


def refine_stream(f_s: ModelWeights, stream: SequenceStream,
                  teacher: ModelWeights, cfg: BilevelConfig,
                  template: BodyTemplate, regenerate: bool = True):
    """Full-scope refinement over an ordered stream.

    The adapting weights are regenerated from the pre-adapted snapshot
    whenever the incoming frame's sequence differs from the buffer; with
    regenerate=False they are created once and carried across boundaries
    (the ablation variant). Returns (per-frame outputs, final weights, log).
    """
    if f_s.role_tag not in LEARNER_ROLES:
        raise ConfigurationError(f"f_s must be a learner, got {f_s.role_tag!r}")
    if not stream.frames:
        raise DataError("stream is empty")
    buffer = SequenceBuffer()
    f_a = None
    outputs, log = [], []
    for name, seq in stream.sequences().items():
        feats = np.stack([fr.feature for fr in seq])
        for fr in seq:
            regenerated = False
            if buffer.last_sequence_name != fr.sequence_name:
                if regenerate or f_a is None:
                    f_a = deepcopy_weights(f_s, "fa")
                    regenerated = True
            window = make_window(feats, fr.frame_index)
            (params, cam), f_a, loss = bilevel_step(
                f_a, fr.feature, window, fr.guide, teacher, cfg, template
            )
            buffer.last_sequence_name = fr.sequence_name
            outputs.append(OutputRecord(fr.sequence_name, fr.frame_index, params, cam))
            mp = pa = None
            if fr.gt is not None:
                joints = forward_kinematics(params, template)
                mp = mpjpe(joints, fr.gt.joints)
                pa = pa_mpjpe(joints, fr.gt.joints)
            log.append(FrameLog(fr.frame_id, name, loss, mp, pa, regenerated))
    return outputs, f_a, log


def write_log_csv(entries, path) -> None:
    """Unified run log: step, sequence, loss, mpjpe_mm, pa_mpjpe_mm,
    regenerated. Epoch entries leave sequence/regenerated blank."""

    def fmt(x):
        return "" if x is None else repr(float(x))

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "sequence", "loss", "mpjpe_mm", "pa_mpjpe_mm",
                         "regenerated"])
        for e in entries:
            if isinstance(e, EpochLog):
                writer.writerow([e.epoch, "", fmt(e.mean_loss), fmt(e.mpjpe_mm),
                                 fmt(e.pa_mpjpe_mm), ""])
            else:
                writer.writerow([e.frame_id, e.sequence, fmt(e.loss),
                                 fmt(e.mpjpe_mm), fmt(e.pa_mpjpe_mm),
                                 int(e.regenerated)])

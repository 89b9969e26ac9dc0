"""Synthetic benchmark streams and every on-disk format.

Frames carry a 32-dim feature standing in for an image crop: a fixed seeded
linear embedding of the normalized ground-truth parameters plus Gaussian
nuisance. The target split gets a slightly rotated embedding, a constant
feature bias and larger nuisance, which is the measurable domain shift the
adaptation stages work against. Guides are projections of the true joints
with detector noise, exponential confidences, and occasional dropout.

Formats: frames.v1 (dataset JSONL with a header line), outputs.v1 (refined
parameter JSONL). Numbers round-trip bit-exactly via shortest-repr floats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .body_model import (
    BETA_DIM,
    BodyParams,
    BodyTemplate,
    CamParams,
    JOINT_COUNT,
    Joints3D,
    Keypoints2D,
    THETA_DIM,
    forward_kinematics,
    project_weak_perspective,
    template_hash,
)
from .errors import ConfigurationError, DataError, DimensionError, FormatError
from .nnet import FEATURE_DIM

FRAMES_SCHEMA = "frames.v1"
OUTPUTS_SCHEMA = "outputs.v1"

_SPLIT_CODES = {"source": 0, "target": 1}

# target-domain shift knobs (relative to the source embedding); the large
# nuisance factor is what gives the window-averaging teacher its edge there
_TARGET_ROT_ANGLE = 0.15
_TARGET_BIAS_NORM = 0.15
_TARGET_NUISANCE_FACTOR = 10.0
# per-sequence constant feature bias (target only): the "per-video character"
# that sequence-local adaptation absorbs and regeneration protects against
_TARGET_SEQ_BIAS_NORM = 0.12

_CAM_SCALE_MID = 0.05
_CAM_SCALE_HALF = 0.005
_CAM_TRANS_HALF = 3.0

# joint-angle trajectories live in a low-dim latent so the 32-dim feature
# embedding stays (noise aside) invertible on the parameter manifold
_MOTION_LATENT_DIM = 12


@dataclass
class GroundTruth:
    params: BodyParams
    cam: CamParams
    joints: Joints3D


@dataclass
class FrameRecord:
    sequence_name: str
    frame_index: int
    feature: np.ndarray
    guide: Keypoints2D
    gt: GroundTruth | None = None

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if self.feature.shape != (FEATURE_DIM,):
            raise DimensionError(
                f"feature: expected ({FEATURE_DIM},), got {self.feature.shape}"
            )
        self.frame_index = int(self.frame_index)
        if self.frame_index < 0:
            raise DataError("frame_index must be >= 0")

    @property
    def frame_id(self) -> str:
        return f"{self.sequence_name}:{self.frame_index}"


@dataclass
class SequenceStream:
    """Frames ordered by (sequence name, frame index), one contiguous run
    of indices starting at 0 per sequence."""

    frames: list
    split_tag: str
    gen_seed: int
    template_hash: str = ""
    _by_sequence: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.split_tag not in _SPLIT_CODES:
            raise ConfigurationError(f"split_tag must be source|target, got {self.split_tag!r}")
        self.gen_seed = int(self.gen_seed)
        by_seq: dict = {}
        for fr in self.frames:
            by_seq.setdefault(fr.sequence_name, []).append(fr)
        prev_name = None
        for name, seq in by_seq.items():
            if prev_name is not None and name < prev_name:
                raise DataError("stream not ordered by sequence name")
            prev_name = name
            for i, fr in enumerate(seq):
                if fr.frame_index != i:
                    raise DataError(
                        f"sequence {name!r}: expected contiguous indices from 0, "
                        f"found {fr.frame_index} at position {i}"
                    )
        self._by_sequence = by_seq

    def sequences(self) -> dict:
        return self._by_sequence

    def __len__(self):
        return len(self.frames)


@dataclass
class GenConfig:
    """Knobs for one synthetic split; defaults match the desk benchmark's
    target split (the source split conventionally uses 80 sequences)."""

    n_sequences: int = 40
    frames_per_sequence: int = 120
    motion_smoothness: float = 0.85
    detector_noise_std: float = 0.2
    detector_dropout: float = 0.05
    feature_nuisance_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_sequences < 1 or self.frames_per_sequence < 1:
            raise ConfigurationError("sequence/frame counts must be >= 1")
        if not 0.0 < self.motion_smoothness <= 1.0:
            raise ConfigurationError("motion_smoothness must be in (0, 1]")
        if self.detector_noise_std < 0.0 or self.feature_nuisance_std < 0.0:
            raise ConfigurationError("noise stds must be nonnegative")
        if not 0.0 <= self.detector_dropout < 1.0:
            raise ConfigurationError("detector_dropout must be in [0, 1)")
        self.seed = int(self.seed)


def _embedding(seed: int, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Fixed per-seed feature embedding (32, 64) and per-split bias (32,)."""
    rng = np.random.default_rng([int(seed), 21])
    emb = rng.normal(0.0, 1.0 / np.sqrt(THETA_DIM + BETA_DIM + 3), (FEATURE_DIM, 64))
    bias = np.zeros(FEATURE_DIM)
    if split == "target":
        c, s = np.cos(_TARGET_ROT_ANGLE), np.sin(_TARGET_ROT_ANGLE)
        rot = np.eye(FEATURE_DIM)
        for k in range(0, FEATURE_DIM - 1, 2):
            rot[k, k] = c
            rot[k, k + 1] = -s
            rot[k + 1, k] = s
            rot[k + 1, k + 1] = c
        emb = rot @ emb
        raw = np.random.default_rng([int(seed), 22]).normal(size=FEATURE_DIM)
        bias = _TARGET_BIAS_NORM * raw / np.linalg.norm(raw)
    return emb, bias


def _motion_basis(seed: int) -> np.ndarray:
    """Fixed (51, latent) map from motion latents to joint angles, row-scaled
    so |z| <= 1 entrywise keeps every angle within +-pi/2 of rest. Shared by
    both splits so the decode transfers across the domain shift."""
    rng = np.random.default_rng([int(seed), 23])
    basis = rng.normal(size=(THETA_DIM, _MOTION_LATENT_DIM))
    basis *= (np.pi / 2.0) / np.abs(basis).sum(axis=1, keepdims=True)
    return basis


def _smoothed_walk(rng, t_len, lo, hi, smooth):
    """First-order low-pass over uniform targets; stays inside [lo, hi]."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    targets = rng.uniform(lo, hi, size=(t_len,) + lo.shape)
    out = np.empty_like(targets)
    prev = (lo + hi) / 2.0
    for t in range(t_len):
        prev = smooth * prev + (1.0 - smooth) * targets[t]
        out[t] = prev
    return out


def _normalize_params(theta, beta, cam_vec):
    return np.concatenate(
        [
            theta / (np.pi / 2.0),
            beta,
            [
                (cam_vec[0] - _CAM_SCALE_MID) / (_CAM_SCALE_HALF * 2.0),
                cam_vec[1] / _CAM_TRANS_HALF,
                cam_vec[2] / _CAM_TRANS_HALF,
            ],
        ]
    )


def gen_synthetic_dataset(cfg: GenConfig, split: str, template: BodyTemplate
                          ) -> SequenceStream:
    """Deterministic synthetic stream for one split.

    Ground-truth trajectories are smoothed seeded walks (joint angles bounded
    to +-pi/2 from rest), so every frame satisfies the body-model invariants
    by construction. Shape coefficients wobble slightly around a per-sequence
    base identity.
    """
    if split not in _SPLIT_CODES:
        raise ConfigurationError(f"split must be source|target, got {split!r}")
    emb, bias = _embedding(cfg.seed, split)
    motion_basis = _motion_basis(cfg.seed)
    nuisance_std = cfg.feature_nuisance_std * (
        _TARGET_NUISANCE_FACTOR if split == "target" else 1.0
    )
    frames = []
    t_len = cfg.frames_per_sequence
    for s in range(cfg.n_sequences):
        rng = np.random.default_rng([cfg.seed, _SPLIT_CODES[split], 31, s])
        name = f"{split}{s:04d}"
        latent_walk = _smoothed_walk(
            rng, t_len, -np.ones(_MOTION_LATENT_DIM), np.ones(_MOTION_LATENT_DIM),
            cfg.motion_smoothness,
        )
        theta_walk = latent_walk @ motion_basis.T
        beta_base = rng.uniform(-0.45, 0.45, BETA_DIM)
        beta_walk = _smoothed_walk(
            rng, t_len, beta_base - 0.05, beta_base + 0.05, cfg.motion_smoothness
        )
        cam_lo = np.array([_CAM_SCALE_MID - _CAM_SCALE_HALF, -_CAM_TRANS_HALF, -_CAM_TRANS_HALF])
        cam_hi = np.array([_CAM_SCALE_MID + _CAM_SCALE_HALF, _CAM_TRANS_HALF, _CAM_TRANS_HALF])
        cam_walk = _smoothed_walk(rng, t_len, cam_lo, cam_hi,
                                  (1.0 + cfg.motion_smoothness) / 2.0)
        nuisance = rng.normal(0.0, 1.0, (t_len, FEATURE_DIM)) * nuisance_std
        guide_noise = rng.normal(0.0, 1.0, (t_len, JOINT_COUNT, 2)) * cfg.detector_noise_std
        dropped = rng.random((t_len, JOINT_COUNT)) < cfg.detector_dropout
        seq_bias = np.zeros(FEATURE_DIM)
        if split == "target":
            raw = rng.normal(size=FEATURE_DIM)
            seq_bias = _TARGET_SEQ_BIAS_NORM * raw / np.linalg.norm(raw)

        for t in range(t_len):
            params = BodyParams(theta_walk[t], beta_walk[t])
            cam = CamParams(cam_walk[t, 0], cam_walk[t, 1:])
            joints = forward_kinematics(params, template)
            proj = project_weak_perspective(joints, cam)
            if cfg.detector_noise_std > 0.0:
                conf = np.exp(
                    -np.linalg.norm(guide_noise[t], axis=1) / cfg.detector_noise_std
                )
            else:
                conf = np.ones(JOINT_COUNT)
            conf = np.where(dropped[t], 0.1, conf)
            guide = Keypoints2D(proj.points + guide_noise[t], conf)
            feat = emb @ _normalize_params(theta_walk[t], beta_walk[t], cam_walk[t])
            feat = feat + bias + seq_bias + nuisance[t]
            frames.append(
                FrameRecord(name, t, feat, guide, GroundTruth(params, cam, joints))
            )
    return SequenceStream(frames, split, cfg.seed, template_hash(template))


def _guide_to_doc(guide: Keypoints2D) -> dict:
    return {
        "points": [[float(x), float(y)] for x, y in guide.points],
        "conf": [float(c) for c in guide.confidence],
    }


def _frame_to_line(fr: FrameRecord) -> str:
    doc = {
        "sequence": fr.sequence_name,
        "index": fr.frame_index,
        "feature": [float(v) for v in fr.feature],
        "guide": _guide_to_doc(fr.guide),
    }
    if fr.gt is not None:
        doc["gt"] = {
            "theta": [float(v) for v in fr.gt.params.theta],
            "beta": [float(v) for v in fr.gt.params.beta],
            "cam": [float(v) for v in fr.gt.cam.as_vector()],
            "joints": [[float(a) for a in p] for p in fr.gt.joints.points],
        }
    return json.dumps(doc, separators=(",", ":"), sort_keys=True)


def save_stream(stream: SequenceStream, path) -> None:
    header = {
        "schema": FRAMES_SCHEMA,
        "gen_seed": stream.gen_seed,
        "split": stream.split_tag,
        "template_hash": stream.template_hash,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":"), sort_keys=True) + "\n")
        for fr in stream.frames:
            fh.write(_frame_to_line(fr) + "\n")


def _parse_frame_line(doc: dict, lineno: int) -> FrameRecord:
    for key in ("sequence", "index", "feature", "guide"):
        if key not in doc:
            raise FormatError(f"line {lineno}: missing {key!r}")
    guide_doc = doc["guide"]
    if "points" not in guide_doc or "conf" not in guide_doc:
        raise FormatError(f"line {lineno}: guide must carry points and conf")
    guide = Keypoints2D(np.array(guide_doc["points"]), np.array(guide_doc["conf"]))
    gt = None
    if "gt" in doc and doc["gt"] is not None:
        g = doc["gt"]
        for key in ("theta", "beta", "cam", "joints"):
            if key not in g:
                raise FormatError(f"line {lineno}: gt missing {key!r}")
        cam_vec = g["cam"]
        gt = GroundTruth(
            BodyParams(np.array(g["theta"]), np.array(g["beta"])),
            CamParams(cam_vec[0], np.array(cam_vec[1:])),
            Joints3D(np.array(g["joints"])),
        )
    return FrameRecord(doc["sequence"], doc["index"], np.array(doc["feature"]), guide, gt)


def load_stream(path) -> SequenceStream:
    """Parse, validate and canonically order a frames.v1 file."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"line 1: invalid JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("schema") != FRAMES_SCHEMA:
        raise FormatError(f"line 1: expected schema {FRAMES_SCHEMA!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {lineno}: invalid JSON: {exc}") from exc
        try:
            records.append(_parse_frame_line(doc, lineno))
        except (DimensionError, ValueError, TypeError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    seen = set()
    for fr in records:
        key = (fr.sequence_name, fr.frame_index)
        if key in seen:
            raise DataError(f"duplicate frame {fr.frame_id}")
        seen.add(key)
    records.sort(key=lambda fr: (fr.sequence_name, fr.frame_index))
    return SequenceStream(
        records,
        header.get("split", "target"),
        int(header.get("gen_seed", 0)),
        header.get("template_hash", ""),
    )


@dataclass
class OutputRecord:
    """One refined prediction: body parameters plus camera for one frame."""

    sequence_name: str
    frame_index: int
    params: BodyParams
    cam: CamParams

    @property
    def frame_id(self) -> str:
        return f"{self.sequence_name}:{self.frame_index}"


def save_outputs(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": OUTPUTS_SCHEMA}, separators=(",", ":")) + "\n")
        for rec in records:
            doc = {
                "sequence": rec.sequence_name,
                "index": rec.frame_index,
                "theta": [float(v) for v in rec.params.theta],
                "beta": [float(v) for v in rec.params.beta],
                "cam": [float(v) for v in rec.cam.as_vector()],
            }
            fh.write(json.dumps(doc, separators=(",", ":"), sort_keys=True) + "\n")


def load_outputs(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty outputs file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"line 1: invalid JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("schema") != OUTPUTS_SCHEMA:
        raise FormatError(f"line 1: expected schema {OUTPUTS_SCHEMA!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            cam_vec = doc["cam"]
            records.append(
                OutputRecord(
                    doc["sequence"],
                    int(doc["index"]),
                    BodyParams(np.array(doc["theta"]), np.array(doc["beta"])),
                    CamParams(cam_vec[0], np.array(cam_vec[1:])),
                )
            )
        except (json.JSONDecodeError, KeyError, ValueError, TypeError,
                DimensionError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    records.sort(key=lambda r: (r.sequence_name, r.frame_index))
    return records


@dataclass(frozen=True)
class SampledMode:
    """Per-epoch random schedule: seq_count sequences, frame_count window
    centers each, resampled deterministically per (seed, epoch index)."""

    seed: int
    seq_count: int = 3
    frame_count: int = 8
    epochs: int = 1


def sample_epoch(stream: SequenceStream, seed: int, epoch_index: int,
                 seq_count: int, frame_count: int) -> list:
    """One epoch of the sampled schedule: a list of single-sequence batches."""
    if not stream.frames:
        raise DataError("cannot sample from an empty stream")
    rng = np.random.default_rng([int(seed), 101, int(epoch_index)])
    seqs = list(stream.sequences().values())
    k = min(seq_count, len(seqs))
    chosen = rng.choice(len(seqs), size=k, replace=False)
    batches = []
    for si in chosen:
        seq = seqs[int(si)]
        if len(seq) >= frame_count:
            centers = rng.choice(len(seq), size=frame_count, replace=False)
        else:
            centers = rng.integers(0, len(seq), size=frame_count)
        batches.append([seq[int(c)] for c in centers])
    return batches


def iter_batches(stream: SequenceStream, batch_size: int = 8, mode="sequential"):
    """Sequential mode chunks each sequence in order without crossing
    boundaries; SampledMode yields the per-epoch random schedule."""
    if not stream.frames:
        raise DataError("cannot batch an empty stream")
    if isinstance(mode, SampledMode):
        for epoch in range(mode.epochs):
            yield from sample_epoch(stream, mode.seed, epoch, mode.seq_count,
                                    mode.frame_count)
        return
    if mode != "sequential":
        raise ConfigurationError(f"unknown batching mode {mode!r}")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    for seq in stream.sequences().values():
        for start in range(0, len(seq), batch_size):
            yield seq[start : start + batch_size]

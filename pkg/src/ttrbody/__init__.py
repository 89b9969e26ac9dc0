"""Collaborative test-time refinement of a parametric body regressor.

A frozen temporal teacher distills into a per-frame learner fed corrupted
inputs (pre-adaptation), after which a regeneration-based bilevel stage
refines the learner frame by frame along streaming sequences, resetting to
the pre-adapted snapshot at every sequence boundary.
"""

from .adaptation import (
    BilevelConfig,
    LossWeights,
    NoiseLevel,
    PreAdaptConfig,
    SequenceBuffer,
    bilevel_step,
    corrupt,
    evaluate_stream,
    keypoint2d_loss,
    preadapt_loss,
    preadapt_run,
    refine_stream,
)
from .body_model import (
    BodyParams,
    BodyTemplate,
    CamParams,
    Joints3D,
    Keypoints2D,
    Mesh,
    body_jacobians,
    forward_kinematics,
    load_template,
    make_template,
    project_weak_perspective,
    save_template,
    skin_mesh,
    template_hash,
)
from .data_io import (
    FrameRecord,
    GenConfig,
    SequenceStream,
    gen_synthetic_dataset,
    iter_batches,
    load_outputs,
    load_stream,
    save_outputs,
    save_stream,
)
from .metrics import (
    MetricsReport,
    SimilarityTransform,
    build_report,
    gap,
    mpjpe,
    pa_mpjpe,
    procrustes_align,
)
from .nnet import (
    AdamState,
    ModelWeights,
    PretrainConfig,
    TemporalWindow,
    adam_init,
    adam_step,
    deepcopy_weights,
    init_weights,
    learner_backward,
    learner_forward,
    load_weights,
    make_window,
    pretrain_backbones,
    save_weights,
    teacher_forward,
)

__version__ = "0.1.0"

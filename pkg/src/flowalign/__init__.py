"""Rectified-flow alignment of conditioning latents to a structured
embedding space (patch grid + CLS + registers), with a synthetic teacher
world, evaluation metrics, and mesh view-selection geometry."""

from .alignerdit import DitConfig, DitModel, init_dit_params
from .embedspace import (
    ConditioningSequence,
    SpaceConfig,
    TargetEmbedding,
    read_embedding_file,
    validate,
    write_embedding_file,
)
from .evalmetrics import (
    AlignmentReport,
    RetrievalReport,
    alignment_report,
    cosine_metric,
    frechet_distance,
    kernel_distance,
    mse_metric,
    norm_ratio,
    retrieval,
)
from .rectflow import FlowSample, LossWeights, flow_loss, make_flow_sample, sample, sample_t, velocity_target
from .synthworld import (
    FrozenPromptEncoder,
    FrozenTargetEncoder,
    PromptTokens,
    Scene,
    encode_prompt,
    encode_target,
    gen_dataset,
    gen_scene,
    rasterize,
    read_dataset,
    scene_to_prompt,
)
from .trainstage import (
    CheckpointArchive,
    TrainConfig,
    cosine_lr,
    grad_check,
    load_model,
    optimizer_step,
    train,
)
from .viewsel3d import (
    CameraPose,
    TriMesh,
    camera_position,
    count_visible,
    fps,
    load_obj,
    ray_triangle,
    sample_surface,
    select_view,
)

__version__ = "0.1.0"

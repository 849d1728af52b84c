"""Model components: slot implementations and the detector assembly."""

from detkit.models.attention import (
    ConditionalCrossAttention,
    MultiheadAttention,
    MultiScaleDeformableAttention,
    deformable_sample,
)
from detkit.models.backbones import (
    ChannelProjector,
    FeaturePyramid,
    PatchifyBackbone,
    ResidualBackbone,
    TooManyStagesError,
)
from detkit.models.common import MLP, inverse_sigmoid, iterative_box_refine
from detkit.models.decoder import DenseTransformerDecoder, DeformableTransformerDecoder
from detkit.models.denoising import DnMeta, DnQueries, build_denoising_groups, denoising_attention_mask
from detkit.models.detector import (
    DenoisingConfig,
    DetectionOutput,
    Detector,
    DnOutputs,
    SlotExecutionError,
    parameter_components,
)
from detkit.models.encoder import (
    DeformableTransformerEncoder,
    DenseTransformerEncoder,
    FlatTokens,
    flatten_pyramid,
    grid_reference_points,
)
from detkit.models.position import (
    AnchorQueryEmbedding,
    BadDimError,
    coordinate_sinusoid,
    sinusoidal_position_embedding,
)
from detkit.models.postprocess import BadTopKError, Detections, postprocess
from detkit.models.queries import (
    EncoderContext,
    EncoderProposals,
    KTooLargeError,
    LearnedQueryInit,
    QuerySet,
    TwoStageQueryInit,
    make_token_proposals,
    two_stage_select,
)

__all__ = [
    "MLP",
    "inverse_sigmoid",
    "iterative_box_refine",
    "BadDimError",
    "sinusoidal_position_embedding",
    "coordinate_sinusoid",
    "AnchorQueryEmbedding",
    "MultiheadAttention",
    "ConditionalCrossAttention",
    "MultiScaleDeformableAttention",
    "deformable_sample",
    "FeaturePyramid",
    "ResidualBackbone",
    "PatchifyBackbone",
    "ChannelProjector",
    "TooManyStagesError",
    "FlatTokens",
    "flatten_pyramid",
    "grid_reference_points",
    "DenseTransformerEncoder",
    "DeformableTransformerEncoder",
    "QuerySet",
    "EncoderContext",
    "EncoderProposals",
    "LearnedQueryInit",
    "TwoStageQueryInit",
    "make_token_proposals",
    "two_stage_select",
    "KTooLargeError",
    "DnMeta",
    "DnQueries",
    "build_denoising_groups",
    "denoising_attention_mask",
    "DenseTransformerDecoder",
    "DeformableTransformerDecoder",
    "Detector",
    "DetectionOutput",
    "DnOutputs",
    "DenoisingConfig",
    "SlotExecutionError",
    "parameter_components",
    "Detections",
    "postprocess",
    "BadTopKError",
]

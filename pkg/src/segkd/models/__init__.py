from .common import count_parameters, seeded_init, spatial_resize, weights_fingerprint
from .decoder import DecoderSpec, ExternalDecoderAdapter, ToyPromptDecoder, build_decoder
from .encoders import (
    EncoderSpec,
    ExternalEncoderAdapter,
    ResNet50Backbone,
    StudentEncoder,
    ToyConvEncoder,
    build_student,
    build_teacher,
    paper_student_spec,
)
from .perceptual import (
    PerceptualExtractor,
    PerceptualExtractorSpec,
    build_perceptual_extractor,
)
from .prompts import (
    BOX_POLICY,
    POINT_POLICY,
    BoxPrompt,
    PointPrompt,
    bounding_box,
    centroid_point,
    prompts_for_mask,
)

__all__ = [
    "BOX_POLICY",
    "POINT_POLICY",
    "BoxPrompt",
    "DecoderSpec",
    "EncoderSpec",
    "ExternalDecoderAdapter",
    "ExternalEncoderAdapter",
    "PerceptualExtractor",
    "PerceptualExtractorSpec",
    "PointPrompt",
    "ResNet50Backbone",
    "StudentEncoder",
    "ToyConvEncoder",
    "ToyPromptDecoder",
    "bounding_box",
    "build_decoder",
    "build_perceptual_extractor",
    "build_student",
    "build_teacher",
    "centroid_point",
    "count_parameters",
    "paper_student_spec",
    "prompts_for_mask",
    "seeded_init",
    "spatial_resize",
    "weights_fingerprint",
]

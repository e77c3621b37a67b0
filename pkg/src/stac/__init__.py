"""Gradient-driven spatiotemporally adaptive compression for edge-assisted
video segmentation: per-region quantization from sensitivity gradients,
flow propagation of labels and strategies, PSNR-triggered keyframing."""

from .codec import decode_frame, encode_frame, encoded_size
from .flow import (
    FlowField,
    FlowParams,
    SegmentationMap,
    compose_flow,
    compute_flow,
    psnr,
    warp_frame,
    warp_labels,
    warp_strategy,
)
from .frame import Frame
from .sensitivity import (
    CoeffGradientMap,
    FrequencyGradients,
    PixelGradientMap,
    SensitivityOracle,
    average_frequency_gradients,
    fake_gradient,
    pixel_to_coeff_gradients,
)
from .strategy import (
    StrategyMap,
    UpperboundLadder,
    expectation_ratio,
    generate_table_levels,
    optimal_steps,
    region_worst_case_loss,
    select_levels,
)
from .tables import QuantTable, QuantTableSet, RegionGrid
from .toyseg import FileOracle, ToySegmenter

__version__ = "0.1.0"

__all__ = [
    "CoeffGradientMap",
    "FileOracle",
    "FlowField",
    "FlowParams",
    "Frame",
    "FrequencyGradients",
    "PixelGradientMap",
    "QuantTable",
    "QuantTableSet",
    "RegionGrid",
    "SegmentationMap",
    "SensitivityOracle",
    "StrategyMap",
    "ToySegmenter",
    "UpperboundLadder",
    "average_frequency_gradients",
    "compose_flow",
    "compute_flow",
    "decode_frame",
    "encode_frame",
    "encoded_size",
    "expectation_ratio",
    "fake_gradient",
    "generate_table_levels",
    "optimal_steps",
    "pixel_to_coeff_gradients",
    "psnr",
    "region_worst_case_loss",
    "select_levels",
    "warp_frame",
    "warp_labels",
    "warp_strategy",
]

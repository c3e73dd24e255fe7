from srw.nn.model import (
    Adam,
    ModelState,
    ShapeError,
    StaleTraceError,
    backward,
    backward_and_step,
    build_model,
    forward,
    image_descriptor,
    predict,
    radar_descriptor,
    validate_descriptor,
)
from srw.nn.ops import softmax, softmax_backward

__all__ = [
    "Adam",
    "ModelState",
    "ShapeError",
    "StaleTraceError",
    "backward",
    "backward_and_step",
    "build_model",
    "forward",
    "image_descriptor",
    "predict",
    "radar_descriptor",
    "softmax",
    "softmax_backward",
    "validate_descriptor",
]

"""Text-style detection and similar-font recommendation."""

from .color_engine import detect_text_color
from .errors import DetectionError, GlyphError, InputError
from .imageio import ImageBuffer, read_image, write_image
from .predict_engine import FontRecord, extend_dataset, predict_similar
from .size_engine import detect_text_height
from .style_net import StyleNet, classify, load_weights, preprocess, save_weights, train

__version__ = "0.1.0"

__all__ = [
    "DetectionError", "FontRecord", "GlyphError", "ImageBuffer", "InputError", "StyleNet",
    "classify", "detect_text_color", "detect_text_height", "extend_dataset", "load_weights",
    "predict_similar", "preprocess", "read_image", "save_weights", "train", "write_image",
]

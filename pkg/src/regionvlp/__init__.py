"""Region-feature video-language pre-training with region-word alignment."""
from .datamodel import CaptionSample, ModelConfig, RegionRecord, VideoSample, validate_sample

__version__ = "0.1.0"

__all__ = ["CaptionSample", "ModelConfig", "RegionRecord", "VideoSample", "validate_sample"]

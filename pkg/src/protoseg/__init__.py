"""protoseg: semi-supervised segmentation with boundary-prototype
contrastive consistency training."""

__version__ = "0.1.0"

from protoseg.estimator import ProtoConsistencySegmenter  # noqa: F401

"""Open-set recognition of histology tiles from a transform-prediction head.

A classifier is trained jointly on its class labels and on recognising which
appearance transform was applied to each training tile. At test time an
untransformed tile whose transform head is unsure is treated as unknown.
"""

from .xforms import Family, Kind, TransformSpace, TransformSpec, apply, sample_transform, transform_label

__all__ = [
    "Family",
    "Kind",
    "TransformSpace",
    "TransformSpec",
    "apply",
    "sample_transform",
    "transform_label",
]
__version__ = "0.1.0"

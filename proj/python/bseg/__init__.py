"""Boundary-aware point cloud segmentation."""

from ._bseg import (
    Error,
    FormatError,
    IoError,
    Model,
    NumericError,
    PreconditionError,
    SchemaError,
    VersionError,
    detect_boundary,
    estimate_normals,
    gen_shape,
    knn,
    miou,
    overall_accuracy,
    read_xyz,
    train,
    write_xyz,
)

__all__ = [
    "Error",
    "FormatError",
    "IoError",
    "Model",
    "NumericError",
    "PreconditionError",
    "SchemaError",
    "VersionError",
    "detect_boundary",
    "estimate_normals",
    "gen_shape",
    "knn",
    "miou",
    "overall_accuracy",
    "read_xyz",
    "train",
    "write_xyz",
]

"""Semi-supervised video object segmentation toolkit."""

from ._core import (
    DataError,
    Network,
    admit_sequence,
    blur_kernel,
    boundary_f,
    evaluate,
    flip_horizontal,
    format_score,
    fuse_tta,
    j_and_f,
    jaccard,
    lr_at,
    motion_blur,
    run_cli,
    soft_aggregate,
)

__all__ = [
    "DataError",
    "Network",
    "admit_sequence",
    "blur_kernel",
    "boundary_f",
    "evaluate",
    "flip_horizontal",
    "format_score",
    "fuse_tta",
    "j_and_f",
    "jaccard",
    "lr_at",
    "motion_blur",
    "run_cli",
    "soft_aggregate",
]

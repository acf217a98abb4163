"""Run harness: tensor file format, metrics, preprocessing, CLI."""

from padm.harness.io import (
    read_tensor,
    write_tensor,
    read_archive,
    write_archive,
    export_pgm,
)
from padm.harness.metrics import rmse, psnr, ssim, MetricsReport
from padm.harness.preprocess import center_crop, resize_bilinear, normalize, preprocess

__all__ = [
    "read_tensor",
    "write_tensor",
    "read_archive",
    "write_archive",
    "export_pgm",
    "rmse",
    "psnr",
    "ssim",
    "MetricsReport",
    "center_crop",
    "resize_bilinear",
    "normalize",
    "preprocess",
]

"""Representation-score diagnosis and debiasing of object-detection layouts."""

from .blueprint import Palette, build_palette, decode_blueprint, instance_color, render_blueprint
from .dataset import (
    BBox,
    BinningConfig,
    Dataset,
    GroupKey,
    ImageRecord,
    Instance,
    assign_group,
    load_annotations,
    partition_frequency,
    partition_position,
)
from .dynamics import DynamicsConfig, ErrorRecord, apply_error_record, restore, run_update_stream, snapshot
from .png import read_png, write_png
from .recalibration import (
    Layout,
    LayoutEntry,
    LayoutPriors,
    RecalibConfig,
    jitter_vertical,
    materialize_bbox,
    recalibrate_layout,
    sample_new_class,
    sample_size_position,
)
from .scoring import (
    EmbeddingStore,
    GroupStats,
    RsTable,
    compute_ctx,
    compute_freq,
    compute_rs_table,
    compute_vis,
    fallback_descriptor,
)

__all__ = [
    "apply_error_record",
    "assign_group",
    "BBox",
    "BinningConfig",
    "build_palette",
    "compute_ctx",
    "compute_freq",
    "compute_rs_table",
    "compute_vis",
    "Dataset",
    "decode_blueprint",
    "DynamicsConfig",
    "EmbeddingStore",
    "ErrorRecord",
    "fallback_descriptor",
    "GroupKey",
    "GroupStats",
    "ImageRecord",
    "Instance",
    "instance_color",
    "jitter_vertical",
    "Layout",
    "LayoutEntry",
    "LayoutPriors",
    "load_annotations",
    "materialize_bbox",
    "Palette",
    "partition_frequency",
    "partition_position",
    "read_png",
    "RecalibConfig",
    "recalibrate_layout",
    "render_blueprint",
    "restore",
    "RsTable",
    "run_update_stream",
    "sample_new_class",
    "sample_size_position",
    "snapshot",
    "write_png",
]

__version__ = "0.1.0"

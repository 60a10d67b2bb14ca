"""Pixel-based machine-learning lithography correction.

The flow: generate reference photomasks for training layouts with a toy
inverse-lithography optimizer, convert each reference mask into an inverse
intensity profile (IIP), train a per-pixel CNN classifier on compressed
layout windows, then predict IIP maps for unseen layouts and threshold them
into corrected masks.  Prediction is embarrassingly parallel and bitwise
deterministic regardless of worker count.
"""

from .classifier import (
    ArchDescriptor,
    ConvBlock,
    ModelParams,
    TrainConfig,
    default_arch,
    forward,
    init_model,
    knn_predict,
    load_model,
    predict,
    save_model,
    train,
)
from .errors import (
    ArchError,
    ChecksumError,
    ConfigError,
    CoordError,
    DimMismatch,
    DivergenceError,
    EmptyDataset,
    FormatError,
    GeometryError,
    ParamError,
    ParseError,
    PixelretError,
    RangeError,
    RegionError,
    ResolutionMismatch,
    ShapeError,
)
from .grid import RasterGrid, grids_equal, read_graymap, same_geometry, write_graymap
from .iip import (
    IipConfig,
    IipMap,
    bin_class,
    class_value,
    compute_iip,
    export_iip,
    import_iip,
    make_iik,
    threshold_iip,
)
from .ilt import IltConfig, IltResult, ilt_loss, optimize_mask, save_loss_history
from .layout import (
    LayoutPattern,
    generate_test_pattern,
    parse_layout,
    raster_region,
    rasterize,
    snap_pattern,
    vectorize,
    write_layout,
)
from .litho import (
    Kernel,
    LithoConfig,
    aerial_image,
    convolve,
    convolve_direct,
    convolve_fft,
    export_kernel,
    import_kernel,
    make_gaussian_kernel,
    print_image,
    simulate_print,
)
from .pipeline import (
    CleanupRules,
    ConfusionMatrix,
    CorrectionConfig,
    ScalingReport,
    WorkChunk,
    bench_scaling,
    cleanup,
    confusion_matrix,
    correct,
    deployment_raster,
    iou,
    plan_chunks,
    predict_map,
    recorrect,
)
from .tiling import (
    PixelDataset,
    PixelSample,
    TilingConfig,
    build_dataset,
    compress_window,
    extract_window,
    load_dataset,
    merge_datasets,
    save_dataset,
    split_dataset,
)

__version__ = "1.0.0"

__all__ = [
    "ArchDescriptor",
    "ArchError",
    "CleanupRules",
    "ChecksumError",
    "ConfigError",
    "ConfusionMatrix",
    "ConvBlock",
    "CoordError",
    "CorrectionConfig",
    "DimMismatch",
    "DivergenceError",
    "EmptyDataset",
    "FormatError",
    "GeometryError",
    "IipConfig",
    "IipMap",
    "IltConfig",
    "IltResult",
    "Kernel",
    "LayoutPattern",
    "LithoConfig",
    "ModelParams",
    "ParamError",
    "ParseError",
    "PixelDataset",
    "PixelSample",
    "PixelretError",
    "RangeError",
    "RasterGrid",
    "RegionError",
    "ResolutionMismatch",
    "ScalingReport",
    "ShapeError",
    "TilingConfig",
    "TrainConfig",
    "WorkChunk",
    "aerial_image",
    "bench_scaling",
    "bin_class",
    "build_dataset",
    "class_value",
    "cleanup",
    "compress_window",
    "compute_iip",
    "confusion_matrix",
    "convolve",
    "convolve_direct",
    "convolve_fft",
    "correct",
    "default_arch",
    "deployment_raster",
    "export_iip",
    "export_kernel",
    "extract_window",
    "forward",
    "generate_test_pattern",
    "grids_equal",
    "ilt_loss",
    "import_iip",
    "import_kernel",
    "init_model",
    "iou",
    "knn_predict",
    "load_dataset",
    "load_model",
    "make_gaussian_kernel",
    "make_iik",
    "merge_datasets",
    "optimize_mask",
    "parse_layout",
    "plan_chunks",
    "predict",
    "predict_map",
    "print_image",
    "raster_region",
    "rasterize",
    "read_graymap",
    "recorrect",
    "same_geometry",
    "save_dataset",
    "save_loss_history",
    "save_model",
    "simulate_print",
    "snap_pattern",
    "split_dataset",
    "threshold_iip",
    "train",
    "vectorize",
    "write_graymap",
    "write_layout",
]

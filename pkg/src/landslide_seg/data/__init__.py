from .interpolation import DEMInterpolator, KrigingError, OrdinaryKriging, interpolate_dem
from .preprocess import HistogramEqualizer, augment, equalize_histogram, prepare_sample
from .scene import SceneSample, load_dataset, load_scene, write_scene
from .split import DatasetSplit, split_dataset
from .synthetic import generate_synthetic_dataset, generate_synthetic_scene

__all__ = [
    "DEMInterpolator", "DatasetSplit", "HistogramEqualizer", "KrigingError", "OrdinaryKriging",
    "SceneSample", "augment", "equalize_histogram", "generate_synthetic_dataset",
    "generate_synthetic_scene", "interpolate_dem", "load_dataset", "load_scene", "prepare_sample",
    "split_dataset", "write_scene",
]

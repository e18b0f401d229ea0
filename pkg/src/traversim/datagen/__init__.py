"""Self-supervised labels, footprint samples and datasets."""

from .dataset import CollectConfig, Dataset, augment, build_dataset, collect, collect_episode, split_by_episode
from .labels import (
    DEFAULT_WINDOW, ImuFeature, actual_distance, imu_feature, nominal_distance, traversability_label,
)
from .samples import Sample, extract_samples, make_sample_id, read_sample, write_sample

__all__ = [
    "CollectConfig", "Dataset", "augment", "build_dataset", "collect", "collect_episode", "split_by_episode",
    "DEFAULT_WINDOW", "ImuFeature", "actual_distance", "imu_feature", "nominal_distance",
    "traversability_label", "Sample", "extract_samples", "make_sample_id", "read_sample", "write_sample",
]

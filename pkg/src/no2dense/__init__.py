"""Dense ground-level NO2 estimation from multi-band satellite raster stacks."""

from .datamodel import AnnotatedScene, DatasetManifest, NormStats, generate_synthetic, load_scene, split_dataset
from .sampler import SamplerConfig, admissible_offsets, center_crop, sample_window

__version__ = "0.1.0"

from .augment import SpatialAugmentConfig, apply_affine, mirror_augment, sample_patch, spatial_augment
from .manifest import DEFAULT_COUNTS, Manifest, build_manifest, load_case
from .nifti import NiftiError, read_mask, read_nifti, write_nifti
from .phantom import PhantomSpec, generate_phantom
from .preprocess import pad_to_multiple, resample_to_spacing, zscore_normalize
from .volume import MODALITIES, Sample, SegMask, Volume

__all__ = [
    "DEFAULT_COUNTS", "MODALITIES", "Manifest", "NiftiError", "PhantomSpec", "Sample", "SegMask",
    "SpatialAugmentConfig", "Volume", "apply_affine", "build_manifest", "generate_phantom",
    "load_case", "mirror_augment", "pad_to_multiple", "read_mask", "read_nifti",
    "resample_to_spacing", "sample_patch", "spatial_augment", "write_nifti", "zscore_normalize",
]

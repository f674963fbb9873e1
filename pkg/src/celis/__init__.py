"""Greedy supervoxel agglomeration driven by learned binary shape-descriptor energies."""

from .descriptor import (CENTER_BASED, PAIRWISE, Descriptor, DescriptorType,
                         default_descriptor_types, hamming, sample_descriptor_type)
from .energy import EnergyModel, FeatureProvider, HandcraftedFeatures, init_model
from .engine import EnergyEngine, MergeLog
from .metrics import contingency, delta_vi_merge, rand_f1, variation_of_information
from .synthetic import SceneSpec, generate_synthetic_scene
from .volume import RegionGraph, build_region_graph
from .watershed import WatershedParams, oversegment

__all__ = [
    "CENTER_BASED", "PAIRWISE", "Descriptor", "DescriptorType", "EnergyEngine",
    "EnergyModel", "FeatureProvider", "HandcraftedFeatures", "MergeLog", "RegionGraph",
    "SceneSpec", "WatershedParams", "build_region_graph", "contingency",
    "default_descriptor_types", "delta_vi_merge", "generate_synthetic_scene", "hamming",
    "init_model", "oversegment", "rand_f1", "sample_descriptor_type",
    "variation_of_information",
]

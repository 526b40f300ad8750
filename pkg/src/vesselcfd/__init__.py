"""Evaluate whether vascular segmentation masks are usable for CFD analysis."""

from vesselcfd.volume import VoxelVolume, VolumeHeader, load_volume, save_volume, resample

__version__ = "0.1.0"

__all__ = ["VoxelVolume", "VolumeHeader", "load_volume", "save_volume", "resample"]

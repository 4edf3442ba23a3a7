"""Joint Bayesian segmentation of structural and diffusion MRI with a deformable atlas."""

from .atlas import DeformationField, ProbAtlas
from .gem import ClassParams, DiffusionFeatures, GEMOptions, Hyperparams, SharingGroups, run_gem
from .volume import GridSpec, TensorVolume, Volume

__version__ = "0.1.0"

__all__ = ["ClassParams", "DeformationField", "DiffusionFeatures", "GEMOptions", "GridSpec",
           "Hyperparams", "ProbAtlas", "SharingGroups", "TensorVolume", "Volume", "run_gem"]

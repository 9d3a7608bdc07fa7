"""Point-cloud view synthesis: learned multi-view fusion, splatting and restoration."""

from . import autodiff, cloud, depthnet, fusion, geometry, io, losses, model, render, restore, scenes
from .geometry import Camera
from .model import ModelConfig, ViewSynthesisModel, synthesize

__version__ = "0.1.0"

__all__ = ["autodiff", "cloud", "depthnet", "fusion", "geometry", "io", "losses", "model", "render", "restore",
           "scenes", "Camera", "ModelConfig", "ViewSynthesisModel", "synthesize"]

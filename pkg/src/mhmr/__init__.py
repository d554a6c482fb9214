"""Single-shot multi-person whole-body mesh recovery on a toy body model."""
from . import body_model, geometry, losses, metrics, net, nn_core, pipeline, scenegen

__version__ = "0.1.0"

__all__ = ["body_model", "geometry", "losses", "metrics", "net", "nn_core", "pipeline",
           "scenegen"]

"""Video-guided 3D affordance grounding on a small numpy autodiff engine."""

__version__ = "0.1.0"

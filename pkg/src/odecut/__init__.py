"""Image-to-image translation with a Neural-ODE generator bottleneck."""

__version__ = "0.1.0"

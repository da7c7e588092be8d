"""Self-paced weakly supervised object detection over bags of boxes."""

__version__ = "0.1.0"

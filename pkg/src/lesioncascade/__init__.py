"""Two-stage skin-lesion analysis: segment, mask the lesion, classify."""
from .dataio import CLASSES

__version__ = "0.1.0"
__all__ = ["CLASSES", "__version__"]

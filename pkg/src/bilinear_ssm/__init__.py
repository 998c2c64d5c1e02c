"""Selective state-space models with bilinear input modulation, in plain numpy."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("bilinear-ssm")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .ssm_core import ModelDims, Routing, Variant, count_params
from .variants import ModelSpec

__all__ = ["ModelDims", "ModelSpec", "Routing", "Variant", "count_params", "__version__"]

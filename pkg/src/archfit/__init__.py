"""Fitting a statistical shape model of the aortic arch to sparse planar contours."""

__version__ = "0.1.0"

from .errors import ArchfitError, NonFinite  # noqa: E402,F401
from .fitting import FitConfig, FitState, Fitter, fit_frame0, fit_sequence  # noqa: E402,F401
from .mesh import TubeMesh  # noqa: E402,F401
from .ssm import ShapeModel, build_model  # noqa: E402,F401

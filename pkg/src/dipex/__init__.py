"""Equivalent infinitesimal-dipole models from magnitude-only near-field scans."""

from .errors import (
    ConfigError,
    DipexError,
    GeometryError,
    IllConditionedError,
    MetricError,
    SchemaError,
    SingularityError,
)
from .forward import Dipole, DipoleType, Environment, build_transfer_matrix, forward_fields
from .ga import ExtractionResult, GAConfig, SearchBounds, extract_auto, ga_run
from .scan import FieldDataset, ScanSurface, make_cylinder, make_plane, read_dataset, write_dataset
from .solver import FitResult, SolverConfig, back_and_forth_single, back_and_forth_two, lstsq_complex
from .sources import WireAntenna, synth_dataset, wire_moment

__version__ = "0.1.0"

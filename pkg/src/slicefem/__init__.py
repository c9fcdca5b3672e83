"""Compatible finite element vertical-slice model of the compressible Euler equations."""

__version__ = "0.1.0"

from .mesh import ExtrudedMesh, build_mesh, apply_terrain  # noqa: E402
from .femspace import Field, FunctionSpace  # noqa: E402
from .forms import ModelParams, PhysicalConstants, SliceModel, State, exner  # noqa: E402
from .solver import SolverConfig, Stepper  # noqa: E402
from .testcases import get_case, init_case, list_cases  # noqa: E402

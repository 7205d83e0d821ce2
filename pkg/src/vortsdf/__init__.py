"""Multi-view surface reconstruction with an explicit SDF stored on an
adaptive centroidal Voronoi tessellation."""

__version__ = "0.1.0"

from .geom import SiteSet, TetMesh, delaunay  # noqa: E402,F401
from .field import FieldState, init_field  # noqa: E402,F401
from .extract import TriMesh, marching_tetrahedra, chamfer  # noqa: E402,F401

"""Exception taxonomy.

Three top-level families map onto the CLI exit codes: bad inputs
(``ContractError``, exit 2), solver/numerical failures (``NumericError``,
exit 3) and missing or stale pipeline artifacts (``DependencyError``,
exit 4).  Anything else is a plain bug and exits 1.
"""


class SurfmapError(Exception):
    """Base class for all package errors."""


class ContractError(SurfmapError):
    """An input violates a documented precondition."""

    exit_code = 2


class FormatError(ContractError):
    """A file could not be parsed.  Carries the offending location."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc = f" [{loc}]"
        super().__init__(f"{message}{loc}")
        self.path = path
        self.line = line


class UnsupportedTopologyError(FormatError):
    """Non-triangular faces or otherwise unsupported connectivity."""


class DegenerateInputError(ContractError):
    """Geometry collapsed to nothing (empty clean result, zero-area fan...)."""


class NotWatertightError(ContractError):
    """A closed surface was required.  Reports the open-edge count."""

    def __init__(self, message, boundary_edges=None):
        if boundary_edges is not None:
            message = f"{message} ({boundary_edges} boundary edges)"
        super().__init__(message)
        self.boundary_edges = boundary_edges


class ShapeError(ContractError):
    """Array dimensions do not line up."""


class TopologyError(ContractError):
    """Connectivity is valid but not what the operation needs."""

    def __init__(self, message, loops=None):
        super().__init__(message)
        self.loops = loops


class MissingShapeError(ContractError):
    """A shape id is not registered in the network at hand."""


class NumericError(SurfmapError):
    """A solver failed to converge or produced unusable output."""

    exit_code = 3


class SingularityError(NumericError):
    """A linear system is rank deficient for the given data."""


class DependencyError(SurfmapError):
    """A pipeline stage ran before the stages it consumes."""

    exit_code = 4

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class StaleArtifactError(DependencyError):
    """A cached artifact no longer matches its recorded checksum."""

"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised for non-finite or structurally invalid inputs."""


class ConvexityError(ValueError):
    """A responsibility vector would make the filter objective non-convex.

    ``agent`` holds the index of the first offending agent.
    """

    def __init__(self, message, agent=None, scene=None):
        super().__init__(message)
        self.agent = agent
        self.scene = scene


class DegenerateDerivativeError(RuntimeError):
    """The active-set KKT system was singular.

    The least-squares fallback is still attached as ``result`` so callers
    can decide whether to use it.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class ParseError(ValueError):
    """Malformed track file. ``line`` is 1-based (header is line 1)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointVersionError(ValueError):
    """Checkpoint was written by an incompatible format version."""

"""Exception hierarchy shared by all solver modules."""


class FfbsdeError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(FfbsdeError, ValueError):
    pass


class CoefficientEvaluationError(FfbsdeError):
    """A coefficient callable returned non-finite or mis-shaped output."""

    def __init__(self, name, args, detail=""):
        self.name = name
        self.args_repr = args
        msg = f"coefficient {name} failed at {args}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class BlowUpError(FfbsdeError):
    """Non-finite state produced during forward or backward stepping."""

    def __init__(self, what, node, path=None):
        self.what = what
        self.node = node
        self.path = path
        where = f"node {node}" if path is None else f"path {path}, node {node}"
        super().__init__(f"non-finite {what} at {where}")


class OracleDivergenceError(FfbsdeError):
    pass


class UnsupportedReductionError(FfbsdeError):
    pass


class UnsupportedProblemError(FfbsdeError):
    pass


class InconclusiveStudyError(FfbsdeError):
    pass


class ConfigError(FfbsdeError, ValueError):
    """Malformed run or problem configuration; message carries the key path."""

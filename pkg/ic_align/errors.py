"""Exceptions raised by ic_align."""


class ICAlignError(Exception):
    """Base class for every error the library raises on purpose."""

    def __init__(self, message, level=None, iteration=None):
        super().__init__(message)
        self.level = level
        self.iteration = iteration

    def with_context(self, level=None, iteration=None):
        """Attach pyramid level / iteration info and return self"""
        if level is not None:
            self.level = level
        if iteration is not None:
            self.iteration = iteration
        where = []
        if self.level is not None:
            where.append(f"level {self.level}")
        if self.iteration is not None:
            where.append(f"iteration {self.iteration}")
        if where:
            base = str(self.args[0]).split(" [at ")[0]
            self.args = (f"{base} [at {', '.join(where)}]",)
        return self


class ConfigError(ICAlignError, ValueError):
    pass


class DegenerateAffineError(ICAlignError):
    pass


class ImageTooSmallError(ICAlignError):
    pass


class PyramidTooDeepError(ICAlignError):
    pass


class UnderdeterminedSystemError(ICAlignError):
    pass


class IllConditionedHessianError(ICAlignError):
    pass


class NoAdmissibleStepError(ICAlignError):
    pass


class InsufficientMarginError(ICAlignError):
    pass


class MotionTooLargeError(ICAlignError):
    pass


class GroundTruthError(ICAlignError):
    """A generated pair failed its own self-consistency check."""


class EmptyInputError(ICAlignError):
    pass


class FormatError(ICAlignError):
    """A file could not be parsed; carries the path and, for text files, the line."""

    def __init__(self, path, message, line=None):
        where = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


class NearCutLocusWarning(UserWarning):
    """Rotation angle is within numerical reach of pi; the log map lost precision."""

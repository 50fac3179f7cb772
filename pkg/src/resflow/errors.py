"""Exception hierarchy shared across the package."""


class ResflowError(Exception):
    pass


class DimensionMismatch(ResflowError, ValueError):
    pass


class ShapeMismatch(ResflowError, ValueError):
    pass


class FlowKindMismatch(ResflowError, ValueError):
    pass


class NonRotationMatrix(ResflowError, ValueError):
    pass


class NonPositiveDepth(ResflowError, ValueError):
    def __init__(self, indices):
        self.indices = list(int(i) for i in indices)
        shown = self.indices[:10]
        more = "" if len(self.indices) <= 10 else f" (+{len(self.indices) - 10} more)"
        super().__init__(f"non-positive depth at point indices {shown}{more}")


class EmptyCloud(ResflowError, ValueError):
    pass


class EmptyInput(ResflowError, ValueError):
    pass


class EmptyResult(ResflowError, ValueError):
    pass


class DegenerateGeometry(ResflowError, ValueError):
    pass


class MissingGroundTruth(ResflowError, ValueError):
    pass


class InvalidConfig(ResflowError, ValueError):
    pass


class NonFiniteLoss(ResflowError, FloatingPointError):
    def __init__(self, message, step=None, epoch=None, terms=None, last_good=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
        self.terms = terms or {}
        self.last_good = last_good


class ParseError(ResflowError, ValueError):
    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message}" + (f" ({', '.join(where)})" if where else ""))
        self.line = line
        self.offset = offset


class VersionMismatch(ResflowError, ValueError):
    pass


class ValidationError(ResflowError, ValueError):
    pass

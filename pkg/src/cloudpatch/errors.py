"""Exception hierarchy.

Everything raised deliberately by the toolkit derives from
:class:`CloudpatchError`; the CLI maps these to exit status 1.
"""


class CloudpatchError(Exception):
    pass


# raster / file formats
class BadMagic(CloudpatchError):
    pass


class TruncatedFile(CloudpatchError):
    pass


class BadDims(CloudpatchError, ValueError):
    pass


class DimMismatch(CloudpatchError, ValueError):
    pass


class IoFailure(CloudpatchError, OSError):
    pass


# maskgen
class DegenerateGrid(CloudpatchError, ValueError):
    pass


class DegenerateField(CloudpatchError, ValueError):
    pass


# tensor / models
class ShapeMismatch(CloudpatchError, ValueError):
    pass


class OddDims(CloudpatchError, ValueError):
    pass


class BadRate(CloudpatchError, ValueError):
    pass


class EmptyMask(CloudpatchError, ValueError):
    pass


class UnsupportedKind(CloudpatchError, ValueError):
    pass


class NonFiniteInput(CloudpatchError, ValueError):
    pass


# baseline
class AllMissing(CloudpatchError, ValueError):
    def __init__(self, band: int | None = None):
        self.band = band
        msg = "band has no finite values" if band is None else f"band {band} has no finite values"
        super().__init__(msg)


# train
class TooFewImages(CloudpatchError, ValueError):
    pass


class DivergedLoss(CloudpatchError, ArithmeticError):
    pass


# eval / indices
class ConstantSeries(CloudpatchError, ValueError):
    pass


class NonFinite(CloudpatchError, ValueError):
    pass


class EmptyRegion(CloudpatchError, ValueError):
    pass


class DateMismatch(CloudpatchError, ValueError):
    pass


class BadConfig(CloudpatchError, ValueError):
    pass


class ConfigError(CloudpatchError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class UnknownSubcommand(CloudpatchError, ValueError):
    pass

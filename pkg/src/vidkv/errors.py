"""Exception hierarchy shared by every vidkv module."""


class VidKVError(Exception):
    """Base class; the CLI turns these into a one-line machine-readable error."""

    code = "error"


class FormatError(VidKVError):
    code = "format"


class LengthError(VidKVError):
    code = "length"


class DataError(VidKVError):
    code = "data"


class SpecError(VidKVError):
    code = "spec"


class GeometryError(VidKVError):
    code = "geometry"


class CodeRangeError(VidKVError):
    code = "range"


class ConfigError(VidKVError):
    code = "config"


class SpanIndexError(VidKVError):
    code = "index"

"""Exception types.  Each carries the exit code the CLI reports for it."""


class NeuroMambaError(Exception):
    code = 1
    kind = "error"


class ShapeError(NeuroMambaError, ValueError):
    code = 6
    kind = "shape_error"


class ParameterError(NeuroMambaError, ValueError):
    code = 6
    kind = "invalid_argument"


class MissingFileError(NeuroMambaError, FileNotFoundError):
    code = 3
    kind = "missing_file"


class MalformedHeaderError(NeuroMambaError, ValueError):
    code = 4
    kind = "malformed_header"


class ConfigError(NeuroMambaError, ValueError):
    code = 5
    kind = "config_error"

"""
errors.py — exception taxonomy

All library failures raise a subclass of QbirError. Each class also inherits the
closest builtin exception, so `except ValueError` keeps working for callers who
do not know this module. `exit_code` is what the CLI returns when the exception
escapes a command:

  1  invalid input and any other library failure
  2  script errors
  3  resource caps
  4  unsupported operations and unreadable files
  5  a benchmark whose scaling falls outside its band
"""


class QbirError(Exception):
    exit_code = 1
    kind      = "error"


class ValidationError(QbirError, ValueError):
    kind = "validation"


class QubitRangeError(QbirError, IndexError):
    kind = "range"


class ShapeError(QbirError, ValueError):
    kind = "shape"


class ResourceError(QbirError):
    exit_code = 3
    kind      = "resource"


class DispatchError(QbirError, KeyError):
    kind = "dispatch"

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message.
        return str(self.args[0]) if self.args else ""


class UnsupportedError(QbirError, NotImplementedError):
    exit_code = 4
    kind      = "unsupported"


class RenormalizationError(QbirError, ArithmeticError):
    kind = "renormalization"


class UndecidableError(QbirError):
    kind = "undecidable"


class SerializationError(QbirError):
    exit_code = 4
    kind      = "serialization"


class ScalingError(QbirError):
    exit_code = 5
    kind      = "scaling"


class ScriptError(QbirError):
    """Script failure with a 1-based source position."""

    exit_code = 2
    kind      = "parse"

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.message = message
        self.line    = line
        self.column  = column


class ScriptParseError(ScriptError):
    kind = "parse"


class ScriptRangeError(ScriptError):
    kind = "range"


class ScriptValidationError(ScriptError):
    kind = "validation"

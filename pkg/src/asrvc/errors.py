"""Exception hierarchy.

Data/format problems derive from :class:`DataError` and numeric blow-ups from
:class:`NumericError`; the CLI maps the two families onto distinct exit codes.
"""


class VCError(Exception):
    pass


class DataError(VCError):
    pass


class NumericError(VCError, ArithmeticError):
    """A NaN or Inf appeared in a tensor."""


class NotFound(DataError, FileNotFoundError):
    pass


class UnsupportedFormat(DataError):
    pass


class DomainError(DataError, ValueError):
    pass


class TooShort(DataError, ValueError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class ConfigMismatch(DataError, ValueError):
    pass


class MissingTensor(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing tensor"


class VersionMismatch(DataError):
    pass


class MissingF0(DataError, ValueError):
    pass


class StateMismatch(DataError, ValueError):
    pass


class EmptyManifest(DataError, ValueError):
    pass


class DuplicateSpeaker(DataError, ValueError):
    pass


class UnknownSpeaker(DataError, KeyError):
    def __init__(self, name, available=()):
        self.name = name
        self.available = list(available)
        super().__init__(name)

    def __str__(self):
        names = ", ".join(self.available) if self.available else "<none>"
        return f"unknown speaker {self.name!r}; available: {names}"


class EmptyInput(DataError, ValueError):
    pass


class TooFewSpeakers(DataError, ValueError):
    pass


class IndexOutOfRange(DataError, IndexError):
    pass

"""Exception hierarchy shared by all pipeline stages."""


class DeclassifyError(Exception):
    """Base class for every error raised by this package."""

    #: process exit code used by the command-line front end
    exit_code = 3


class InputError(DeclassifyError):
    """Malformed or unsupported input (exit code 2)."""

    exit_code = 2


class NotElf(InputError):
    pass


class UnsupportedClass(InputError):
    pass


class TruncatedFile(InputError):
    pass


class ParseError(InputError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DuplicateSeq(InputError):
    def __init__(self, function, seq):
        super().__init__(f"duplicate seq {seq} in function {function:#x}")
        self.function = function
        self.seq = seq


class NoRttiFound(InputError):
    pass


class ProviderError(InputError):
    """Raised by a disassembly provider that cannot decode its input."""


class UnknownFormat(InputError):
    pass


class InvalidConfig(InputError):
    pass


class UnknownClass(DeclassifyError, KeyError):
    def __init__(self, class_id):
        super().__init__(f"unknown class {class_id!r}")
        self.class_id = class_id

    def __str__(self):
        return self.args[0]


class UnmappableIdentity(DeclassifyError):
    pass


class InvariantViolation(DeclassifyError):
    pass

"""Exception types shared across the package.

The CLI maps :class:`InputError` to exit code 2 and :class:`InvariantError`
to exit code 3.
"""


class InputError(ValueError):
    """Malformed or inconsistent user input (files, arguments)."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class InvariantError(RuntimeError):
    """An internal invariant was violated (a bug, not bad input)."""

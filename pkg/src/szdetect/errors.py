"""Common base class for errors raised by this package.

Every module-specific error derives from SzDetectError so the CLI can map
any expected failure to a single-line diagnostic and a nonzero exit code.
"""


class SzDetectError(Exception):
    pass

"""Exception types shared by the simulator, the store kernels and the CLI."""


class ConfigError(ValueError):
    """Invalid topology, cost or experiment configuration."""


class TraceError(ValueError):
    """A trace record could not be parsed or validated.

    ``line`` and ``column`` are 1-based and refer to the input stream.
    """

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


class SimFault(Exception):
    """A simulated fault delivered to the faulting thread (not a simulator bug)."""

    kind = "fault"

    def __init__(self, vaddr: int, message: str = ""):
        self.vaddr = vaddr
        super().__init__(message or f"{self.kind} at {vaddr:#x}")


class SegmentationFault(SimFault):
    kind = "segfault"


class ProtectionFault(SimFault):
    kind = "protection fault"


class InvariantViolation(AssertionError):
    """A protocol invariant does not hold; always a simulator bug."""

"""Exception hierarchy shared by every simulator module."""


class DramLockerError(Exception):
    pass


# dram
class AddressError(DramLockerError, IndexError):
    pass


class SizeError(DramLockerError, ValueError):
    pass


class SubarrayMismatch(DramLockerError, ValueError):
    pass


class DegenerateCopy(DramLockerError, ValueError):
    pass


# lock controller
class CapacityExceeded(DramLockerError):
    def __init__(self, required_bytes, budget_bytes):
        super().__init__(
            f"lock-table needs {required_bytes} bytes, budget is {budget_bytes} bytes"
        )
        self.required_bytes = required_bytes
        self.budget_bytes = budget_bytes


class NotLocked(DramLockerError, KeyError):
    pass


class DegenerateSwap(DramLockerError, ValueError):
    pass


class UntrustedCopy(DramLockerError, PermissionError):
    pass


class ResourceExhausted(DramLockerError):
    pass


# isa
class InvalidPayload(DramLockerError, ValueError):
    pass


class TypeConfusion(DramLockerError, TypeError):
    pass


class Nontermination(DramLockerError):
    pass


class AssemblyError(DramLockerError, ValueError):
    pass


# victim models
class FormatError(DramLockerError, ValueError):
    pass


class RangeError(DramLockerError, ValueError):
    pass


class PlacementError(DramLockerError):
    pass


class PageFault(DramLockerError):
    pass


# attacks
class EmptyCandidateSet(DramLockerError, ValueError):
    pass


class EncodingError(DramLockerError, ValueError):
    pass


# cli / config
class ConfigError(DramLockerError, ValueError):
    pass


# analysis
class IoError(DramLockerError, OSError):
    pass

"""Exception types shared across the package."""


class VoxmeshError(Exception):
    """Base class for all package errors."""


class InputError(VoxmeshError):
    """Malformed or inconsistent input data (files, datasets, flags)."""


class CapacityError(VoxmeshError):
    """A fixed-capacity structure (hash table, pool) is exhausted."""


class ConsistencyError(VoxmeshError):
    """Internal invariant violated; indicates a phase-ordering bug."""

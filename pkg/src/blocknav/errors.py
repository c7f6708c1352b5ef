"""Exception hierarchy.

``DataError`` marks problems with user-supplied data (bad geometry, corrupt
files, invalid configs) and maps to CLI exit code 2; everything else that
escapes maps to exit code 3.
"""


class BlocknavError(Exception):
    """Base class for all package errors."""


class DataError(BlocknavError):
    """Invalid input data: geometry, files, configs."""


class NonIntegerGeometry(DataError):
    """Environment corner coordinates must be integers in block units."""


class DisconnectedFreespace(DataError):
    """Free blocks do not form a single 4-connected component."""


class CorridorTooNarrow(DataError):
    """Some free block is not part of any fully free 2x2 square."""


class OutOfFreespace(DataError):
    """Queried point does not lie in a free block."""


class InfeasibleClearance(DataError):
    """Agent diameter does not fit through the narrowest corridor."""


class Unreachable(BlocknavError):
    """No clearance-respecting path between the queried points."""


class TooFewAgents(BlocknavError):
    """Operation needs at least two active agents."""


class ShapeMismatch(DataError):
    """Vector length does not match the network layer it feeds."""


class NonFiniteLoss(BlocknavError):
    """Loss evaluated to NaN or infinity."""


class EmptyDataset(DataError):
    """Imitation dataset contains no transition tuples."""


class EmptyRollout(BlocknavError):
    """Rollout produced no agent records; reward undefined."""


class UnclassifiableBlock(DataError):
    """Freespace does not decompose into lattice-aligned 2-wide corridors."""


class DimensionMismatch(DataError):
    """Perturbation vectors disagree in length."""


class GenerationFailed(BlocknavError):
    """Scenario generator exhausted its retry budget."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt or has an unknown format version."""


class FormatError(DataError):
    """Structured file is malformed or has an unknown format version."""

"""Lock-table RowHammer defence: DRAM model, controller, attacks and analysis."""

__version__ = "0.1.0"

from .dram import DramConfig, DramState, RowAddress, Timing  # noqa: E402
from .locker import DefensePolicy, LockController, LockTable, Reservation, build_lock_table  # noqa: E402

__all__ = ["DramConfig", "DramState", "RowAddress", "Timing", "DefensePolicy", "LockController",
           "LockTable", "Reservation", "build_lock_table", "__version__"]

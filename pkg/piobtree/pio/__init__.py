from .models import (
    WILDCARD_PTR, FenceKeyRecord, FlushStats, OpFlag, OpqEntry, PioConfig, PioGeometry, PioLeafNode,
    PioListener,
)
from .leaf import fold, merged_records, shrink
from .lsmap import LsMap
from .opq import AUTOCOMMIT, OpQueue
from .pio_tree import PioBTree, check_search_needed

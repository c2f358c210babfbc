from .models import (
    KEY_MAX, KEY_MIN, NIL_PAGE, IndexRecord, InternalNode, LeafNode, Superblock, TreeGeometry,
    pack_counts,
)
from .buffer_pool import BufferPool
from .bplus_tree import BPlusTree

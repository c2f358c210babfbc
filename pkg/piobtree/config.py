import os
from dotenv import load_dotenv

load_dotenv()


class Config:
    """Base configuration, overridable through the environment or a .env file."""
    LOG_LEVEL = os.getenv('PIOBTREE_LOG_LEVEL', 'INFO')
    DATA_DIR = os.getenv('PIOBTREE_DATA_DIR', os.path.join(os.getcwd(), 'data'))

    # Device
    PAGE_SIZE = int(os.getenv('PIOBTREE_PAGE_SIZE', 4096))
    PAGE_COUNT = int(os.getenv('PIOBTREE_PAGE_COUNT', 4 * 1024 * 1024))
    CHANNELS = int(os.getenv('PIOBTREE_CHANNELS', 16))
    READ_LATENCY_US = float(os.getenv('PIOBTREE_READ_LATENCY_US', 100.0))
    WRITE_LATENCY_US = float(os.getenv('PIOBTREE_WRITE_LATENCY_US', 200.0))
    INTERLEAVE_PENALTY = float(os.getenv('PIOBTREE_INTERLEAVE_PENALTY', 1.3))

    # PIO B-tree
    PIO_MAX = int(os.getenv('PIOBTREE_PIO_MAX', 64))
    SPERIOD = int(os.getenv('PIOBTREE_SPERIOD', 5000))
    BCNT = int(os.getenv('PIOBTREE_BCNT', 5000))
    LEAF_SEGMENTS = int(os.getenv('PIOBTREE_LEAF_SEGMENTS', 1))
    OPQ_PAGES = int(os.getenv('PIOBTREE_OPQ_PAGES', 1))

    # Memory available to the buffer pool (and the OPQ, for the PIO B-tree)
    BUFFER_PAGES = int(os.getenv('PIOBTREE_BUFFER_PAGES', 64))

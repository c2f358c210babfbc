from .models import (
    BufferGeometry, Calibration, CostProfile, EtaRounding, SearchVariant, TuningResult,
)
from .formulas import (
    best_node_size, buffer_geometry, cost_bplus, cost_bplus_buffered, cost_bplus_buffered_geometry,
    cost_pio, cost_pio_buffered, g_of_level, predict_latency, tree_height, utility_cost,
)
from .tuning import calibrate, tune

"""Network width search with a bilaterally coupled shared-weight supernet."""

from .widthspace import (
    FlopsTable,
    IndexSet,
    LayerSpec,
    NetworkWidth,
    WidthSpace,
    WidthSpaceError,
    bc_index_sets,
    build_flops_table,
    cardinality_bc,
    cardinality_ua,
    complement,
    flops_of,
    new_space,
    space_size,
    ua_index_set,
    uniform_sample,
    uniform_scale_width,
)

__version__ = "0.1.0"

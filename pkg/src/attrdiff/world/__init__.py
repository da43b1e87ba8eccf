from .factors import (
    ATTRIBUTE_NAMES,
    ATTRIBUTE_RANGES,
    IDENTITY_NAMES,
    IDENTITY_RANGES,
    N_ATTRIBUTE,
    N_FACTORS,
    N_IDENTITY,
    WorldParams,
    attribute_index,
    sample_params,
)
from .renderer import (
    face_region_from_landmarks,
    landmarks,
    region_mask,
    render,
    render_batch,
    render_flagged,
)

"""Dense binocular stereo matching toolkit.

Learned patch-similarity costs from a Siamese feature network with
deconvolution layers, classical census/SAD baselines, four-direction
semi-global aggregation and the full post-processing chain (consistency
check, subpixel refinement, hole filling, edge padding).
"""

from .imaging import (
    DisparityMap,
    decode_kitti_disparity,
    encode_kitti_disparity,
    load_image,
    normalize,
    read_disparity_png,
    read_image_png,
    rgb_to_luminance,
    write_disparity_png,
    write_image_png,
)
from .network import (
    BatchNorm,
    ConfigError,
    ConvLayer,
    DeconvLayer,
    FeatureExtractor,
    GeometryError,
    build_network,
    conv_forward,
    conv_output_size,
    count_parameters,
    deconv_forward,
    deconv_output_size,
    extract_features,
    layer_matrix,
    load_weights,
    save_weights,
    similarity_scores,
    size_chain,
    validate_geometry,
)
from .training import (
    TrainerConfig,
    TrainingSample,
    backward,
    cross_entropy,
    generate_patch_pairs,
    make_label,
    softmax,
    train,
)
from .cost_volume import (
    INVALID,
    build_dsi_census,
    build_dsi_learned,
    build_dsi_sad,
    census_transform,
    derive_left_dsi,
    derive_right_dsi,
    read_dsi,
    write_dsi,
)
from .sgm import Direction, Penalties, aggregate_all, aggregate_direction
from .disparity import (
    consistency_check,
    fill_invalid,
    pad_to_full,
    subpixel_refine,
    wta,
)
from .evaluation import (
    CameraGeometry,
    ErrorReport,
    disparity_to_depth,
    make_random_dot_stereogram,
    n_pixel_error,
    reproject,
)

__version__ = "0.1.0"

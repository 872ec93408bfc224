"""warpfit: localize-crop-match image registration.

An anchor-box localizer finds the moving image's object inside a fixed
image, the region is cropped, and a spatial-transformer network predicts
a thin-plate-spline warp that aligns the binary masks under an overlap
loss with a smoothness penalty. Everything runs on a small numpy
reverse-mode autodiff engine.
"""

from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    GenerationError,
    ParameterError,
    PipelineError,
    TrainingError,
    WarpfitError,
)
from .tensor import (
    Tensor,
    backward,
    concat,
    default_dtype,
    elu,
    leaky_relu,
    matmul,
    no_grad,
    set_default_dtype,
    sigmoid,
    use_dtype,
    zero_grad,
)
from .nn import (
    bce_with_logits,
    batchnorm2d,
    conv2d,
    dense,
    he_normal,
    maxpool2d,
    smooth_l1,
)
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .optim import AdamState, adam_step
from .tps import (
    ControlGrid,
    TpsParams,
    bilinear_sample,
    output_lattice,
    tps_grid,
    tps_solve,
    warp_field,
    warp_mask,
)
from .losses import (
    LossBreakdown,
    binarize,
    dc_metric,
    dice_loss,
    miou_metric,
    smoothness_loss,
    total_loss,
)
from .boxes import (
    Box,
    box_dc,
    box_iou,
    center_to_corners,
    corners_to_center,
    decode_offsets,
    encode_offsets,
    nms,
)
from .data import (
    MetricLog,
    SampleRecord,
    crop_to_object,
    gen_composites,
    gen_mask_pairs,
    load_composites,
    load_idx,
    load_manifest,
    load_masks_dir,
    read_metrics,
    render_digit,
    synth_digit_bank,
    tight_box,
    tile_to_canvas,
    write_idx,
)
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .imaging import (
    overlay_masks,
    read_png_gray,
    resize_bilinear,
    write_png_gray,
    write_png_rgb,
)
from .locnet import (
    LocNetModel,
    build_anchors,
    crop_resize,
    detect,
    evaluate_detection,
    expanded_pixel_rect,
    load_locnet,
    train_locnet,
)
from .matcher import (
    MatcherModel,
    MatchResult,
    evaluate_matcher,
    load_matcher,
    match_batch,
    match_pair,
    train_matcher,
)
from .config import ExperimentConfig, load_config, parse_config_text, write_template
from .pipeline import (
    ExperimentPaths,
    RegistrationRecord,
    canvas_scores,
    register_pair,
    run_experiment,
)

__version__ = "0.1.0"

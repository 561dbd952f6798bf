"""flowscape: animate landscape stills with per-semantic motion control.

A motion encoder summarizes what each semantic region of a driving video
is doing into a small latent vector; a flow generator paints those
latents back over a single still image and produces dense optical flow;
the still is brought to life by warping it along accumulated flows.
Every semantic can follow a different reference video at its own speed.
"""

from .config import RunConfig, load_run_config, parse_config_text
from .encoder import EncoderConfig, LatentSet, MotionEncoder, prepare_encoder_inputs
from .errors import DataError, EvaluationError, FlowscapeError, FormatError, NumericError
from .evaluation import (
    dynamic_region_mask,
    endpoint_error,
    evaluate_frame_dirs,
    masked_psnr,
    masked_ssim,
    write_metrics_csv,
)
from .flow_io import (
    flow_to_color,
    image_to_unit_range,
    read_flo,
    read_image,
    unit_range_to_uint8,
    write_flo,
    write_image,
)
from .flow_ops import (
    add_flows,
    compose_flows,
    flip_horizontal,
    scale_flow,
    warp_backward,
)
from .generator import FlowGenerator, GeneratorConfig, build_latent_map
from .inference import AnimationResult, ReferenceSet, animate, reference_latents, save_animation
from .losses import LossConfig, loss_flow, loss_frame, loss_total, loss_tv
from .pconv import MaskedInstanceNorm2d, PartialConv2d, partial_conv2d
from .synth import (
    Clip,
    HalfPlane,
    MotionModel,
    PlaidTexture,
    Rect,
    Region,
    SceneSpec,
    load_clip,
    make_scene,
    random_scene_spec,
    save_clip,
)
from .taxonomy import (
    CLASS_NAMES,
    class_index,
    index_map_to_masks,
    masks_to_index_map,
    read_mask,
    validate_partition,
    write_mask,
)
from .training import (
    TrainConfig,
    TrainingSample,
    TrainResult,
    build_training_sample,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

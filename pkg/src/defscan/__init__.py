"""defscan: a selective state space vision backbone whose scan order and
sampling positions adapt to the input, implemented on NumPy with a
verification-first autodiff core."""

from .tensor import FINITE_CHECKS, Module, Parameter, Tape, Tensor
from . import ops
from .ops import (activation, channel_attention, conv2d, cross_entropy,
                  depthwise_conv2d, global_avg_pool, layer_norm, linear,
                  matmul, pointwise_conv)
from .optim import AdamW, AdamState, adamw_step, init_adam_state, lr_at
from .ssm import (DiscretizedScan, ScanInputs, SsmParams, discretize_zoh,
                  s6_project, selective_scan_chunked, selective_scan_sequential,
                  ssm_apply)
from .scan_orders import (ScanOrder, adjacency_retention, continuous_order,
                          fixed_order, identity_order, local_window_order,
                          raster_order, raster_reversed_order)
from .deform import (DeformableScanWeights, OffsetBias, OffsetField,
                     OffsetNetwork, ReferenceGrid, TokenIndex, bilinear_sample,
                     deformable_scan, flatten_by_order, make_reference_grid,
                     make_token_index, order_from_index, reorder_tokens,
                     sample_with_bias, squash_split_normalize,
                     straight_through_index_grad, unflatten_by_order)
from .model import (Backbone, DmBlock, Dssm, ModelConfig, build_model,
                    count_params, preset_config, stage_resolutions)
from .data import SynthSample, synth_dataset
from .config import (DataConfig, OptimConfig, RunConfig, TrainConfig,
                     load_config, parse_config, save_config, serialize_config)
from .checkpoint import (load_checkpoint, load_into_model, save_checkpoint,
                         save_model)
from .train import TrainResult, evaluate, run_training
from .bench import bench_scan
from .gradcheck import run_gradcheck
from .viz import read_ppm, scan_viz, write_ppm

__version__ = "0.1.0"

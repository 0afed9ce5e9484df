"""Camera-versatile monocular depth estimation, self-contained on numpy.

A relative-depth trunk shared across cameras, frequency-mixing decoder
stages, small per-camera relative-to-metric converter heads, the
matching losses and metric suite, a synthetic multi-camera RGB-D
generator, and a training/evaluation harness.
"""

from .depth_math import (DepthMap, LossConfig, NormalizationStats, Sample,
                         crde_loss, denormalize, model_input, normalize,
                         overall_loss, silog_loss)
from .errors import (CameraLookupError, ConfigError, DegenerateInputError,
                     DuplicateCameraError, FormatError, NumericError, ShapeError)
from .harness import (Adam, ExperimentConfig, RunReport, SeparatePool, ablate,
                      cross_eval, evaluate, evaluate_checkpoint,
                      mixing_coefficients, run_setting_suite, train)
from .metrics import (MetricsReport, aggregate, basic_metrics,
                      calibrate_scale_shift, kendall_tau, kendall_tau_brute,
                      relative_metrics)
from .model import (Crde, ModelConfig, MultiDecoderModel, VdeModel,
                    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint,
                    micro_config, paper_scale_config, save_checkpoint,
                    toy_config)
from .rng import Rng
from .synth import (CameraProfile, SceneSpec, apply_camera, default_profiles,
                    generate_dataset, load_manifest, make_sample, random_scene,
                    read_depth, render_scene, write_depth, write_depth_png)
from .tensor import Module, Tensor, grad_check, no_grad

__version__ = "0.1.0"

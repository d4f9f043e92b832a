"""Multi-modal multi-view convolutional-transformer recognition toolkit."""

from .tensor import (Tensor, concat, conv2d, layer_norm, batch_norm, no_grad,
                     set_debug_checks)
from .gradcheck import grad_check, grad_check_sampled
from .model import (ModelConfig, MultiViewNet, ViewFeatures, param_count,
                    save_checkpoint, load_checkpoint)
from .fusion import (FusionBundle, FusedRepresentation, view_entropy,
                     entropy_weights, fuse, fuse_batched)
from .dataset import (ViewpointRig, MultiViewSample, View, generate_shape,
                      render_views, generate_dataset, save_dataset,
                      load_dataset, kfold_split)
from .trainer import (TrainConfig, TrainReport, cross_entropy, Adam,
                      cosine_lr, train, evaluate, ablation_sweep)

__version__ = "0.1.0"

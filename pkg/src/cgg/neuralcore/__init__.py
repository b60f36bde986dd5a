from .layers import (ShapeError, conv1d_backward, conv1d_forward, dense_sigmoid_forward,
                     dropout_forward, gat_backward, gat_forward, gru_sequence_backward,
                     gru_sequence_forward, gru_step, mean_pool_forward, sigmoid)
from .loss import bce_grad, bce_loss
from .model import (ForwardResult, ModelConfig, ModelParams, backward, forward, init_bounds,
                    init_params, param_count, param_count_formula, predict)

"""Direct binary embedding: binary image codes straight from a convnet.

A small convolutional network ends in an embedding layer whose activation
tanh(relu(batchnorm(linear(x)))) lives in [0, 1) and, once trained for
classification, concentrates near {0, 1}. Thresholding at 0.5 then yields
compact binary codes suitable for Hamming-distance retrieval, linear
classification, and multilabel annotation.
"""

from .autodiff import Tensor, Tape, backward, finite_diff_check
from .network import (
    Model,
    ModelConfig,
    build_dbe_lenet,
    dbe_activation_scalar,
    forward_embed,
    load_checkpoint,
    save_checkpoint,
)
from .losses import (
    LossConfig,
    joint_cross_entropy,
    quantization_penalty,
    softmax_cross_entropy,
    total_loss,
    weighted_binary_sigmoid_ce,
)

__version__ = "0.1.0"

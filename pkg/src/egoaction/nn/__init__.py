from .checkpoint import CheckpointError, checkpoint_hash, load_checkpoint, save_checkpoint
from .gradcheck import activation_pattern, check_layer, grad_check, relative_error
from .layers import (
    LSTM, Conv2D, Dense, Flatten, Layer, LstmParams, MaxPool2D, Parameter, ReLU,
    ShapeError, lstm_cell, lstm_cell_backward, sigmoid, softmax, softmax_backward,
    softmax_cross_entropy,
)

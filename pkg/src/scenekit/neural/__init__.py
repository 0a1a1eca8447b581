from scenekit.neural.gru import gru_cell, gru_cell_backward, gru_sequence, gru_sequence_backward
from scenekit.neural.layers import (
    BatchNorm,
    Bidirectional,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Gru,
    Layer,
    MaxPool2D,
    ReLU,
    Softmax,
)
from scenekit.neural.net import (
    CacheError,
    ForwardCache,
    Mode,
    NetSpec,
    NetworkFormatError,
    ShapeError,
    backward,
    count_params,
    cross_entropy,
    decode_network,
    encode_network,
    forward,
    init_params,
    load_network,
    predict_proba,
    save_network,
)
from scenekit.neural.optim import Adagrad, Adam, RmsProp, Sgd, make_optimizer
from scenekit.neural.train import History, TrainConfig, TrainingDiverged, train
from scenekit.neural.architectures import (
    build_architecture,
    examples_for,
    input_shape_for,
    segment_sequence,
)

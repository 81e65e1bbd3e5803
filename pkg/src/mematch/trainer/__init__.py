from .checkpoint import (
    Checkpoint,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .engine import (
    EVAL_EPISODES,
    EVAL_QUERIES,
    EvalReport,
    NumericalAbort,
    batch_loss,
    confidence95,
    episode_accuracy,
    evaluate,
    train_step,
    warm_up_batchnorm,
)
from .loop import METRICS_HEADER, TrainSettings, train
from .loss import episode_loss, predict_label, predict_labels
from .model import EpisodeOutput, ModelConfig, ModelParams, episode_logits, forward_episode, init_model
from .optim import Adam

__all__ = [
    "Adam",
    "Checkpoint",
    "CheckpointError",
    "EVAL_EPISODES",
    "EVAL_QUERIES",
    "EpisodeOutput",
    "EvalReport",
    "METRICS_HEADER",
    "ModelConfig",
    "ModelParams",
    "NumericalAbort",
    "TrainSettings",
    "batch_loss",
    "confidence95",
    "decode_checkpoint",
    "encode_checkpoint",
    "episode_accuracy",
    "episode_logits",
    "episode_loss",
    "evaluate",
    "forward_episode",
    "init_model",
    "load_checkpoint",
    "predict_label",
    "predict_labels",
    "save_checkpoint",
    "train",
    "train_step",
    "warm_up_batchnorm",
]

"""Heightmap forecasting with a ConvLSTM encoder-decoder and MC dropout."""

from .gradcheck import GradCheckReport, check_gradients, relative_error, resolvable_floor
from .inference import PredictionResult, mc_predict, population_moments, sample_streams, write_prediction
from .model_io import MAGIC, ModelFormatError, load_model, save_model
from .network import (MASKED_LAYERS, ConvLstmCell, Network, NetworkConfig, ShapeError, convlstm_step,
                      count_parameters, draw_masks)
from .sequences import (NormStats, SequenceError, SequenceSample, build_sequences, compute_stats, denormalize,
                        normalize, sequence_origins, stack_samples, stats_from_samples)
from .training import TrainConfig, TrainingDivergedError, TrainResult, evaluate_loss, train

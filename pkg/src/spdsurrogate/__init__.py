"""SPD-by-construction surrogate models for 6x6 stiffness matrices."""
__version__ = "0.1.0"

from .datasets import Dataset, SamplingBox, generate_dataset, read_csv, write_csv
from .layers import Positivity, SpdLayer
from .surrogates import PredictiveModel, compose, dumps_model, loads_model, make_surrogate
from .tensor import IndexMap, NumericalFailure, cholesky, sym_eig, sym_eig_batch
from .training import ModelSpec, TrainConfig, TrainResult, train

__all__ = [
    "__version__",
    "Dataset",
    "SamplingBox",
    "generate_dataset",
    "read_csv",
    "write_csv",
    "Positivity",
    "SpdLayer",
    "PredictiveModel",
    "compose",
    "dumps_model",
    "loads_model",
    "make_surrogate",
    "IndexMap",
    "NumericalFailure",
    "cholesky",
    "sym_eig",
    "sym_eig_batch",
    "ModelSpec",
    "TrainConfig",
    "TrainResult",
    "train",
]

from .classifier import ConvNetClassifier
from .contract import Evaluator
from .data import Dataset, SyntheticDatasetSpec, load_tensor, make_dataset, save_tensor
from .evaluator import CNNEvaluator
from .network import ConvNet
from .surrogate import SurrogateLogEvaluator

__all__ = [
    "CNNEvaluator",
    "ConvNet",
    "ConvNetClassifier",
    "Dataset",
    "Evaluator",
    "SurrogateLogEvaluator",
    "SyntheticDatasetSpec",
    "load_tensor",
    "make_dataset",
    "save_tensor",
]

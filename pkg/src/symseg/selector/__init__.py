from .bn import EMConvergenceWarning, EMResult, LayeredBN, mutual_information
from .margin import LinearOvR
from .model import (BayesSelector, MarginSelector, SchemaMismatch, SelectorModel, load_model,
                    model_from_dict, save_model, select, train_bn, train_margin)
from .samples import BuildStats, TrainingSample, build_training_sets, ranked_gap

__all__ = ["BayesSelector", "BuildStats", "EMConvergenceWarning", "EMResult", "LayeredBN",
           "LinearOvR", "MarginSelector", "SchemaMismatch", "SelectorModel", "TrainingSample",
           "build_training_sets", "load_model", "mutual_information", "model_from_dict",
           "ranked_gap", "save_model", "select", "train_bn", "train_margin"]

from .config import Config, desk_preset, paper_preset
from .data import ClipSample, generate_dataset, load_dataset, save_dataset
from .model import Model, select_target
from .train import train

__all__ = ["Config", "desk_preset", "paper_preset", "ClipSample",
           "generate_dataset", "load_dataset", "save_dataset", "Model",
           "select_target", "train"]

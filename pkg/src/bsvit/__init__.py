"""Burst-spiking vision transformer: addition-only inference, surrogate-gradient training
and operation-level energy accounting, all in numpy."""
from .attention import build_adjacency, dbssa_forward, ssa_forward, vsa_oracle
from .data import bin_events, load_cifar_batch, load_tensors, save_tensors, synth_dataset
from .estimator import BSViTClassifier, SpikeFeatureExtractor
from .model import BSViT, ModelConfig, build_model, infer, load_checkpoint, save_checkpoint
from .neurons import SpikingNeuron, SurrogateSpec
from .profiler import EnergyLedger, complexity_report, estimate_energy, multiply_trap
from .tensor import matmul_addonly, matmul_float
from .training import TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "BSViT", "BSViTClassifier", "EnergyLedger", "ModelConfig", "SpikeFeatureExtractor", "SpikingNeuron",
    "SurrogateSpec", "TrainConfig", "bin_events", "build_adjacency", "build_model", "complexity_report",
    "dbssa_forward", "estimate_energy", "evaluate", "fit", "infer", "load_checkpoint", "load_cifar_batch",
    "load_tensors", "matmul_addonly", "matmul_float", "multiply_trap", "save_checkpoint", "save_tensors",
    "ssa_forward", "synth_dataset", "vsa_oracle",
]

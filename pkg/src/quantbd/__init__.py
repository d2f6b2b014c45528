"""Backdoor detection under post-training quantization: attack, quantize, defend, report."""

from .attack import (PoisonPolicy, SGDConfig, TrainConfig, apply_trigger, evaluate_asr,
                     evaluate_clean_accuracy, poison_dataset, train_classifier)
from .datamodel import (DefenseId, DefenseVerdict, ExperimentRecord, MetricPair, ModelArtifact,
                        QuantScheme, RecordStore, SchemeName, TriggerSpec)
from .harness import ProtocolConfig, run_protocol, validate_attack
from .ingestion import DatasetBundle, load_dataset, make_toy_dataset
from .quant import quantize_dequantize, quantize_model
from .report import emit_report

__version__ = "0.1.0"

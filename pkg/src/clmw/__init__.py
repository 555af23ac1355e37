"""Desk-scale workbench for chemical language model experiments.

Subpackages cover the full experimental loop: SMILES parsing and
standardization, corpus splitting and noise injection, subword tokenizer
training, a small autodiff core with a BERT-style encoder, MLM pretraining,
evaluation statistics, cross-validated fine-tuning, and experiment
orchestration with reporting.
"""

__version__ = "0.1.0"

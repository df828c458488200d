"""Desk-scale multi-task sequence-to-sequence laboratory: task-token routing
over translation and summarization, length-ratio positional encoding, pseudo
data pipelines, and a truncation-aware evaluation suite."""

import os

import torch

# avoid thread oversubscription on small machines; harmless elsewhere
torch.set_num_threads(max(1, os.cpu_count() or 1))

__version__ = "0.1.0"

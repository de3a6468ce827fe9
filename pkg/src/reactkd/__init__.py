"""Region-graph knowledge distillation for liver tumour grading on synthetic volumes."""

__version__ = "0.1.0"

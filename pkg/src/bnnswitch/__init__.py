"""Per-packet model switching between resident binary neural networks.

A fixed 1088-byte packet format carries a slot id in its metadata block;
a bank of bit-packed two-layer BNNs stays resident behind one shared
executor, and the slot id selects which weight set scores each packet's
1024-byte payload. Replay harnesses measure switching cost, bank scaling,
boundary continuity, and the cost of swapping weights over a control
channel instead.
"""

__version__ = "0.1.0"

from .packet_format import (
    FRAME_LEN,
    META_LEN,
    PAYLOAD_BITS,
    PAYLOAD_LEN,
    PayloadView,
    Reg0Metadata,
    build_frame,
    parse_frame,
    read_trace,
    write_trace,
)
from .bnn import ModelWeights, cost_model, infer_fast, infer_reference, load_model, save_model
from .model_bank import ModelBank, load_bank

__all__ = [
    "FRAME_LEN",
    "META_LEN",
    "PAYLOAD_BITS",
    "PAYLOAD_LEN",
    "ModelBank",
    "ModelWeights",
    "PayloadView",
    "Reg0Metadata",
    "build_frame",
    "cost_model",
    "infer_fast",
    "infer_reference",
    "load_bank",
    "load_model",
    "parse_frame",
    "read_trace",
    "save_model",
    "write_trace",
]

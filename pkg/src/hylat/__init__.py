"""Hybrid latent + text messaging between small transformer agents.

Agents exchange messages made of a block of continuous hidden-state vectors
(rolled out from the model's own final layer) followed by a short answer in
text.  The package contains the model, the message protocol, the two
training stages, evaluation harnesses and probes.
"""
from .errors import (AlignmentError, CapacityError, CodecError, HylatError, InputError,
                     IoError, NumericError, ProtocolError, ShapeError)
from .model import ModelConfig, TinyTransformer, load_checkpoint, save_checkpoint
from .protocol import (ChannelMode, HybridMessage, LatentBlock, TextBlock, assemble_input,
                       count_comm_tokens, deserialize, serialize, validate_format)
from .vocab import VOCAB

__version__ = "0.1.0"

__all__ = [
    "AlignmentError", "CapacityError", "ChannelMode", "CodecError", "HybridMessage",
    "HylatError", "InputError", "IoError", "LatentBlock", "ModelConfig", "NumericError",
    "ProtocolError", "ShapeError", "TextBlock", "TinyTransformer", "VOCAB", "assemble_input",
    "count_comm_tokens", "deserialize", "load_checkpoint", "save_checkpoint", "serialize",
    "validate_format",
]

"""Chemical language model: SMILES tokenizer, linear-attention encoder, training and analysis."""

from .errors import ChemLMError, NumericError, ValidationError
from .model import EncoderConfig, EncoderState, init_state
from .tokenizer import Vocabulary, build_vocabulary, encode, tokenize

__all__ = [
    "ChemLMError",
    "NumericError",
    "ValidationError",
    "EncoderConfig",
    "EncoderState",
    "init_state",
    "Vocabulary",
    "build_vocabulary",
    "encode",
    "tokenize",
]
__version__ = "0.1.0"

from .config import DecoderConfig, EncoderConfig, FlowConfig, SetAbstraction
from .decoder import Decoder
from .encoder import Encoder, PreparedCloud, prepare_cloud
from .flow import ConditionalFlow
from .params import checksum, frozen, from_arrays, to_arrays

__all__ = [
    "ConditionalFlow",
    "Decoder",
    "DecoderConfig",
    "Encoder",
    "EncoderConfig",
    "FlowConfig",
    "PreparedCloud",
    "SetAbstraction",
    "checksum",
    "frozen",
    "from_arrays",
    "prepare_cloud",
    "to_arrays",
]

"""Binary neural network toolkit: bit-packed xnor/popcount convolution,
dense/improvement block models, analytic cost accounting and STE training."""

from bnnkit.tensor import BitTensor, pack_bits, sign_forward, ste_backward, unpack_bits

__version__ = "0.1.0"

__all__ = [
    "BitTensor",
    "pack_bits",
    "unpack_bits",
    "sign_forward",
    "ste_backward",
]

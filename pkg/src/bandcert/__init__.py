"""bandcert: certified adversarial-patch defense via column-band smoothing.

A small, self-contained research package: a tape-based autodiff engine on
numpy, a compact vision transformer with band-restricted attention, a
progressive masked-reconstruction training curriculum, a deterministic vote
certifier, and brute-force oracles that validate every certificate claim.
"""

__version__ = "0.1.0"

from .errors import ContractError, DataFormatError, NumericError, ShapeError

__all__ = [
    "ContractError",
    "DataFormatError",
    "NumericError",
    "ShapeError",
    "__version__",
]

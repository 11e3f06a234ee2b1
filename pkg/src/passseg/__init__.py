"""Progressive adversarial semantic segmentation on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DataError, NumericalError, ShapeError  # noqa: E402
from .tensor import Tensor, backward, no_grad  # noqa: E402

__all__ = ["ConfigError", "ContractError", "DataError", "NumericalError", "ShapeError",
           "Tensor", "backward", "no_grad", "__version__"]

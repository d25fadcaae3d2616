"""Matrix-parametrized resolvent splitting for coupled monotone inclusions."""

__version__ = "0.1.0"

from . import (  # noqa: F401
    decentral,
    design_sdp,
    files,
    matparams,
    operators,
    probgen,
    solver,
    structure,
)

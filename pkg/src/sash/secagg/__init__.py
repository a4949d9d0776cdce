"""SecAgg engine and its primitives."""

from .engine import (
    SecAggClient,
    SecAggConfig,
    SecAggResult,
    SecAggServer,
    client_mask_input,
    default_threshold,
    run_secagg,
)
from .ka import KaKeyPair, ka_agree, ka_gen
from .prg import prg_expand
from .shamir import ShamirShare, shamir_reconstruct, shamir_share

__all__ = [
    "KaKeyPair",
    "SecAggClient",
    "SecAggConfig",
    "SecAggResult",
    "SecAggServer",
    "ShamirShare",
    "client_mask_input",
    "default_threshold",
    "ka_agree",
    "ka_gen",
    "prg_expand",
    "run_secagg",
    "shamir_reconstruct",
    "shamir_share",
]

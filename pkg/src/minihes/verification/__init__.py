"""Dense reference oracles and the randomized check suite built on them."""

from minihes.verification.oracle import (
    DenseMatrix,
    block_diagonal,
    dense_gauss_newton,
    dense_hessian,
    dense_jacobian,
    fd_gradient,
    fd_hessian,
    hessian_offdiag_mass,
)
from minihes.verification.suite import dominance_trend, random_instance, run_verification

__all__ = [
    "DenseMatrix",
    "block_diagonal",
    "dense_gauss_newton",
    "dense_hessian",
    "dense_jacobian",
    "fd_gradient",
    "fd_hessian",
    "hessian_offdiag_mass",
    "dominance_trend",
    "random_instance",
    "run_verification",
]

"""Model layer: Feynman-Kac abstraction, concrete models, oracles."""

from .abc_model import (
    AbcModel,
    GaussianLocationAbc,
    LotkaVolterraAbc,
    gaussian_abc_likelihood,
)
from .diffusion import (
    ConstantDrift,
    CoupledEulerModel,
    DiffusionFamily,
    DriftDiffusion,
    EulerDiffusionModel,
    GeometricBrownian,
    LinearDrift,
    coupled_euler_interval,
    euler_step,
    ou_exact_lgssm,
    ou_level_lgssm,
)
from .fk import FeynmanKacModel
from .gillespie import GillespiePath, Stoichiometry, gillespie_simulate
from .lgssm import (
    LinearGaussianSSM,
    kalman_loglik,
    kalman_smoother_means,
    lgssm_feynman_kac,
)

__all__ = [
    "FeynmanKacModel",
    "LinearGaussianSSM",
    "kalman_loglik",
    "kalman_smoother_means",
    "lgssm_feynman_kac",
    "DriftDiffusion",
    "LinearDrift",
    "GeometricBrownian",
    "ConstantDrift",
    "EulerDiffusionModel",
    "CoupledEulerModel",
    "DiffusionFamily",
    "euler_step",
    "coupled_euler_interval",
    "ou_level_lgssm",
    "ou_exact_lgssm",
    "Stoichiometry",
    "GillespiePath",
    "gillespie_simulate",
    "AbcModel",
    "GaussianLocationAbc",
    "LotkaVolterraAbc",
    "gaussian_abc_likelihood",
]

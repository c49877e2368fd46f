"""Image registration by differentiable phase correlation with learned feature extractors."""
from dpcreg.estimator import EstimatorConfig, PoseEstimate, PoseSim2, RegistrationError, register, warp_sim2
from dpcreg.features import ExtractorSet, Topology

__version__ = "0.1.0"

__all__ = ["EstimatorConfig", "ExtractorSet", "PoseEstimate", "PoseSim2", "RegistrationError",
           "Topology", "register", "warp_sim2"]

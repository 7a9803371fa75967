from .integrators import heun_integrate, srk_integrate
from .methods import CRPSConfig, CRPSMethod, EDMConfig, EDMMethod, SIConfig, SIMethod, two_sample_crps
from .model import GenerativeModel, TrainConfig, latent_moments, train_generative
from .schedules import EDMSchedule, InterpolantSchedule
from .streams import MemberStreams

__all__ = [
    "CRPSConfig",
    "CRPSMethod",
    "EDMConfig",
    "EDMMethod",
    "EDMSchedule",
    "GenerativeModel",
    "InterpolantSchedule",
    "MemberStreams",
    "SIConfig",
    "SIMethod",
    "TrainConfig",
    "heun_integrate",
    "latent_moments",
    "srk_integrate",
    "train_generative",
    "two_sample_crps",
]

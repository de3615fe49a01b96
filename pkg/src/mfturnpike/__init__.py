"""Optimal control of interacting particle systems with turnpike certificates."""
from .model import (CostSpec, InteractionKernel, ParticleEnsemble, ProblemSpec, Violation, sample_initial,
                    second_moment, spec_from_dict, spec_to_dict, validate_spec)
from .dynamics import (CheapFeedback, ConstantControl, OpenLoopControl, ThreePhaseFeedback, Trajectory,
                       ZeroControl, cheap_feedback, integrate, mean_field_force, three_phase_feedback)

__version__ = "0.1.0"

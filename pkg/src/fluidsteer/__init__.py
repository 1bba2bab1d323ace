"""Boundary control of rigid bodies immersed in a two-dimensional perfect fluid.

Bodies move inside a bounded domain filled with an incompressible inviscid
fluid. The fluid velocity is prescribed on part of the outer wall, and the
feedback law picks that boundary data so the bodies follow a target pose
trajectory.
"""

from .geometry import BodyShape, ClosedCurve, DomainSpec, build_mesh, min_separation
from .laplace import operators
from .dynamics import FlowState, FluidModel
from .control import ControlSettings, FeedbackLaw, SynthesisError, pd_feedback
from .vorticity import VortexCloud, advect
from .scenario import ScenarioConfig, ScenarioError, parse_scenario, serialize
from .sim import (AbortedRun, SimState, Simulator, TargetTrajectory, TrackingReport, closed_loop_step,
                  run_tracking, simulate, uncontrolled_step)

__version__ = "0.1.0"

"""Recover from a wrong starting pose with PD feedback.

Exact tracking only reproduces the target acceleration, so an initial
offset never goes away. Adding proportional and derivative terms makes the
pose error obey a damped linear equation. With critical damping at
frequency w, the error decays like (1 + w t) exp(-w t), and a larger w
gives faster recovery.
"""

from dataclasses import replace

from fluidsteer import parse_scenario, run_tracking
from fluidsteer.cli import bundled_scenario
from fluidsteer.control import FeedbackLaw
from fluidsteer.sim import build_from_scenario

base = parse_scenario(bundled_scenario("ellipse-pd"))
base = replace(base, target=replace(base.target, times=(0.0, 1.0)), numerics=replace(base.numerics, dt=0.01))
law: FeedbackLaw = build_from_scenario(base)[1].law   # reused for both gains

for w in (2.0, 4.0):
    cfg = replace(base, mode=replace(base.mode, kp=w * w, kd=2 * w))
    report = run_tracking(cfg, law=law)
    err = report.array("err_pos")
    print(f"w = {w}: error {err[0]:.3f} -> {err[-1]:.2e} after 1 s, "
          f"fitted rate {report.header['decay_rate']:.3f} (predicted {report.header['predicted_rate']:.3f})")

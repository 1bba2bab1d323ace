"""How accurate is the boundary solver?

A disk of radius 1 inside a circle of radius 4 has a known added mass,
pi (16 + 1) / (16 - 1). We refine the mesh on the disk and watch the
relative error shrink, then look at an ellipse, whose added mass differs
along its two axes.
"""

import numpy as np

from fluidsteer import BodyShape, ClosedCurve, DomainSpec, build_mesh
from fluidsteer.dynamics import added_mass

exact = np.pi * 17.0 / 15.0
domain = DomainSpec(ClosedCurve.circle(4.0), (0.0, 0.5))
disk = BodyShape(ClosedCurve.circle(1.0), 1.0, 1.0, allow_disk=True)

print("panels  added mass   rel. error")
for panels in (32, 64, 128, 256, 512):
    mesh = build_mesh(domain, [disk], np.zeros(3), panels / (2 * np.pi))
    value = added_mass(mesh)[0][0, 0]
    print(f"{panels:6d}  {value:.6f}  {abs(value / exact - 1):.2e}")

# An elongated body resists sideways motion much more than motion along its axis.
unit = DomainSpec(ClosedCurve.circle(1.0), (0.0, 0.9))
ellipse = BodyShape(ClosedCurve.ellipse(0.6, 0.3), 1.0, 0.1125)
Ma, _ = added_mass(build_mesh(unit, [ellipse], np.zeros(3), 20))
print("\nellipse 0.6 x 0.3 in the unit disk, added mass matrix:")
print(np.array2string(Ma, precision=4, suppress_small=True))

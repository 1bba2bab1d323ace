"""Why the steering needs a body that is not a disk.

The controller builds any requested force from a few pressure "pushes" at
boundary points of each body. That works only if those pushes surround
the origin in force space, and the radius of the largest ball they
surround measures how much room there is. A disk cannot turn itself by
pushing on its boundary, so its radius collapses to zero.
"""

import numpy as np

from fluidsteer import BodyShape, ClosedCurve
from fluidsteer.control import SynthesisError, caratheodory

print("aspect   radius")
for aspect in (3.0, 2.0, 1.5, 1.1, 1.01, 1.001):
    shape = BodyShape(ClosedCurve.ellipse(0.3 * aspect, 0.3), 1.0, 0.1)
    print(f"{aspect:6.3f}   {caratheodory([shape], [60]).r:.3e}")

try:
    caratheodory([BodyShape(ClosedCurve.circle(0.3), 1.0, 0.1, allow_disk=True)], [60])
except SynthesisError as exc:
    print(f"\nexact disk: {exc}")

# Any velocity-like vector is a positive combination of the pushes.
data = caratheodory([BodyShape(ClosedCurve.ellipse(0.6, 0.3), 1.0, 0.1125)], [60])
v = np.array([0.3, -1.2, 0.7])
q = np.array([0.0, 0.0, 0.4])
weights = data.mu(q, v)
print(f"\n{len(weights)} positive weights, smallest {weights.min():.3e}, "
      f"reconstruction error {np.linalg.norm(weights @ data.e(q) - v):.1e}")

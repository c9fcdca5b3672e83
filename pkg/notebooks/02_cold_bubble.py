"""Walkthrough: the falling cold bubble at 800 m resolution.

Run with ``python3 notebooks/02_cold_bubble.py``; takes a few minutes.
"""
import numpy as np

from slicefem.femspace import Field
from slicefem.solver import Stepper
from slicefem.testcases import front_location, init_density_current, perturbation_extrema

setup = init_density_current(800)
spec = setup.spec
model = setup.model()
x = model.state_to_vector(setup.state)
print(f"{spec.ncols}x{spec.nlayers} cells, dt={spec.dt}s, {spec.nsteps} steps")
print("initial theta perturbation range:", perturbation_extrema(setup.state.theta, setup.theta_b))

stepper = Stepper(model)
for n in range(spec.nsteps):
    x = stepper.step(x, spec.dt)
    if (n + 1) % 25 == 0:
        theta = Field("theta_space", x[model.slice("theta")])
        lo, hi = perturbation_extrema(theta, setup.theta_b)
        # the -0.1 K contour is insensitive to tiny ripples ahead of the front
        front = front_location(theta, setup.theta_b, setup.mesh, threshold=-0.1)
        print(f"t={stepper.time:5.0f}s dtheta in [{lo:6.2f}, {hi:5.2f}] K, front(-0.1 K) {front:7.0f} m")

# Surface profile of the perturbation along the lowest level.
xs = np.linspace(0.0, 2.5e4, 26)
d = model.spaces["theta"].evaluate(x[model.slice("theta")] - setup.theta_b.coefficients, xs, np.full_like(xs, 100.0))
for xi, di in zip(xs, d):
    print(f"{xi / 1e3:5.1f} km {di:7.2f} K " + "*" * int(max(-di, 0)))

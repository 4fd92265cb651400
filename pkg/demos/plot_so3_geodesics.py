"""
Rotations, geodesics and the torus
==================================

The generative state of a rigid adsorbate is an in-plane position on a
periodic cell and an orientation in SO(3). This script walks through the
numerics the rest of the package is built on.
"""

import math

import numpy as np

from rigidflow import manifold as mf

rng = np.random.default_rng(0)

###############################################################################
# Exponential and logarithm
# -------------------------
# An axis-angle vector maps to a rotation through Rodrigues' formula; the
# logarithm inverts it, returning the representative with angle <= pi.

v = np.array([0.3, -1.2, 0.8])
R = mf.exp_so3(v)
print("angle", np.linalg.norm(v), "recovered", mf.log_so3(R))

# near pi the axis is read off the symmetric part instead of R - R^T
R_pi = mf.exp_so3(np.array([0.0, 0.0, math.pi - 1e-9]))
print("log near pi:", mf.log_so3(R_pi))

###############################################################################
# Geodesics
# ---------
# The straight path between two orientations is exp(t log(R1 R0^T)) R0. Its
# angular velocity omega* is the same at every t, which is what makes it a
# good flow-matching target.

R0, R1 = mf.sample_rotation(rng, 2)
omega = mf.rotation_target(R0, R1)
for t in np.linspace(0.0, 1.0, 5):
    Rt = mf.geodesic(R0, R1, t)
    print(f"t={t:.2f}  angle from R0 {mf.geodesic_angle(R0, Rt):.4f}  to R1 {mf.geodesic_angle(Rt, R1):.4f}")
print("|omega*| =", np.linalg.norm(omega), "= total angle", mf.geodesic_angle(R0, R1))

###############################################################################
# Torus arithmetic
# ----------------
# Displacements use the minimal image, so the step from x = 9.5 to x = 0.5
# in a 10-wide cell is +1, not -9.

box = np.array([10.0, 10.0])
a = mf.TorusPoint(np.array([9.5, 2.0]), box)
b = mf.TorusPoint(np.array([0.5, 2.0]), box)
print("displacement", mf.torus_displacement(a, b))
print("wrapped", mf.torus_wrap(a.t + mf.torus_displacement(a, b), box).t)

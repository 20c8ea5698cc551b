"""anisoforge: design-parameter-dependent polyconvex hyperelastic surrogates.

Learns strain-energy models from stress-strain data with partially
input-convex networks, discovers the anisotropy class and preferred
directions during training, and inverts the trained surrogate for design
parameters and orientations, directly or through a small total-Lagrangian
finite-element harness.
"""

__version__ = "0.1.0"

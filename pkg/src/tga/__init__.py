"""Text Grouping Adapter: turn text-detector regions into paragraph groups.

Subpackages by concern:

- ``numerics``: reverse-mode autodiff on numpy arrays
- ``geometry``: region unification, rasterization and contours
- ``pixel_embedding``, ``assembly``, ``head``, ``model``: the adapter itself
- ``matching``: Hungarian matching and one-to-many group targets
- ``cascade``: word -> line -> paragraph two-stage variant
- ``metrics``: precision, recall, F1 and panoptic quality
- ``dataio``: annotations, synthetic scenes, tensor files
- ``training``, ``cli``: optimisation loop and command line
"""

__version__ = "0.1.0"

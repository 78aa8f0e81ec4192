"""Refinement of noisy monocular 3D car detections into pseudo-labels.

Modules: ``geom`` (rigid transforms, camera model), ``shape`` (mesh space),
``render`` (soft silhouette / depth rendering), ``motion`` (tracking and
motion fitting), ``losses``, ``refine``, ``kitti_io``, ``evaluation``,
``synth`` and ``cli``.
"""

__version__ = "0.1.0"

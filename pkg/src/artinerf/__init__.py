"""Free-viewpoint rendering of articulated subjects from monocular image
sequences: skeletal + temporal deformation fields over a canonical radiance
field, trained end to end through a minimal reverse-mode engine, with an
analytic capsule-scene oracle for verification."""

__version__ = "0.1.0"

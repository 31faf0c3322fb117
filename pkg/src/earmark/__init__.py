"""Ear-CT landmark regression and augmented-reality overlay toolkit."""

__version__ = "0.1.0"

LANDMARK_NAMES = (
    "RWN",
    "INCUS_TIP",
    "UMBO",
    "MALLEUS_SHORT",
    "PYRAMID_TIP",
    "COCHLEA_APEX",
    "COCHLEA_BASE",
)

# COCHLEA_BASE is held out as the registration test landmark; the remaining
# six are the ones a user is allowed to pick correspondences for.
REGISTRATION_LANDMARKS = tuple(n for n in LANDMARK_NAMES if n != "COCHLEA_BASE")

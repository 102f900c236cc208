"""Per-member motion description for synthetic ensembles."""

import numpy as np

from flint_tsr.struct import ConfigStruct
from flint_tsr.types import from_type_name

# allow missing class docstring
# pylint: disable=missing-class-docstring


class Motion(ConfigStruct):
    """Closed-form motion of one ensemble member. Members that were not given are left out entirely."""

    def velocity_vector(self, rank: int) -> np.ndarray:
        """Translation in cells per step, (x, y[, z]) order; zero when the member has no translation."""
        velocity = self.values.get("velocity")
        if velocity is None:
            return np.zeros(rank)
        if len(velocity) > rank:
            raise ValueError(f"velocity has {len(velocity)} components for a rank-{rank} grid")
        return np.pad(np.asarray(velocity, dtype=np.float64), (0, rank - len(velocity)))

    def rotation_rate(self) -> float:
        """Rotation about the domain centre in radians per step, in the x-y plane."""
        return float(self.values.get("rotation", 0.0))

    def sim_params(self) -> np.ndarray:
        """Simulation parameter vector: translation speed followed by rotation rate."""
        speed = float(np.linalg.norm(self.values.get("velocity", [0.0])))
        return np.array([speed, self.rotation_rate()])


def make_motion(velocity=None, rotation=None) -> Motion:
    """Create a Motion struct for one member.

    If a value is not used then the member is omitted from the struct entirely, so a written manifest only carries
    the motions that were asked for.
    """
    if all(i is None for i in [velocity, rotation]):
        raise ValueError("At least one argument must be given.")

    members, kwargs = {}, {}
    if velocity is not None:
        members["velocity"] = from_type_name("float[]")
        kwargs["velocity"] = [float(v) for v in velocity]
    if rotation is not None:
        members["rotation"] = from_type_name("float")
        kwargs["rotation"] = float(rotation)

    # type() runs __set_name__ on the members
    member_motion = type("MemberMotion", (Motion,), members)
    return member_motion(**kwargs)

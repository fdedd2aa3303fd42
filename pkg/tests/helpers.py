from __future__ import annotations

from scipy.spatial.transform import Rotation

from camgeo.geometry import Pose


def random_pose(rng, t_scale=1.0) -> Pose:
    return Pose(Rotation.random(random_state=rng).as_matrix(), rng.normal(scale=t_scale, size=3))

import numpy as np
import pytest

from palpation_lab import Inclusion, PhantomModel, StiffnessField, make_organ_mesh


@pytest.fixture(scope="session")
def organ_mesh():
    return make_organ_mesh()


@pytest.fixture(scope="session")
def tumor_phantom(organ_mesh):
    """Soft organ with one stiff disc inclusion — the standard search target."""
    field = StiffnessField(
        background=0.30,
        inclusions=(
            Inclusion(center_uv=(0.62, 0.55), radius_uv=0.10, stiffness=1.00, smoothing_uv=0.03),
        ),
    )
    return PhantomModel(mesh=organ_mesh, stiffness=field)


@pytest.fixture(scope="session")
def plain_phantom(organ_mesh):
    """Uniform stiffness everywhere; probing and line-fit tests."""
    return PhantomModel(mesh=organ_mesh, stiffness=StiffnessField(background=0.5))


def random_rigid(rng: np.random.Generator, max_angle_rad: float = np.pi, max_trans_mm: float = 20.0):
    from palpation_lab import RigidTransform

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle_rad, max_angle_rad)
    trans = rng.uniform(-max_trans_mm, max_trans_mm, size=3)
    return RigidTransform.from_axis_angle(axis, angle, trans)

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from motionprim.errors import DegenerateInput, EmptyInput, InvalidRotation, ZeroWeightSum
from motionprim.rotation import (
    RigidTransform, apply_rigid, blend_rot6d, matrix_to_rot6d, rot6d_to_matrix,
)

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def rz(angle):
    return Rotation.from_euler("z", angle).as_matrix()


@pytest.mark.parametrize("r6", [(1, 0, 0, 0, 1, 0), (2, 0, 0, 0, 3, 0)])
def test_rot6d_identity_cases(r6):
    np.testing.assert_allclose(rot6d_to_matrix(torch.tensor(r6, dtype=torch.float64)), np.eye(3), atol=1e-12)


def test_rot6d_swapped_axes():
    R = rot6d_to_matrix(torch.tensor([0.0, 1, 0, 1, 0, 0], dtype=torch.float64)).numpy()
    np.testing.assert_allclose(R[:, 0], [0, 1, 0])
    np.testing.assert_allclose(R[:, 1], [1, 0, 0])
    np.testing.assert_allclose(R[:, 2], [0, 0, -1])


@pytest.mark.parametrize("r6", [(0, 0, 0, 0, 1, 0), (1, 0, 0, 2, 0, 0), (1, 1, 0, 0, 0, 0)])
def test_rot6d_degenerate(r6):
    with pytest.raises(DegenerateInput):
        rot6d_to_matrix(torch.tensor(r6, dtype=torch.float64))


def test_matrix_to_rot6d_cases():
    np.testing.assert_allclose(matrix_to_rot6d(torch.eye(3, dtype=torch.float64)), [1, 0, 0, 0, 1, 0])
    np.testing.assert_allclose(matrix_to_rot6d(torch.tensor(RZ90)), [0, 1, 0, -1, 0, 0], atol=1e-15)


def test_matrix_to_rot6d_rejects_non_rotation():
    with pytest.raises(InvalidRotation):
        matrix_to_rot6d(torch.diag(torch.tensor([1.0, 1.0, -1.0], dtype=torch.float64)))
    with pytest.raises(InvalidRotation):
        matrix_to_rot6d(2 * torch.eye(3, dtype=torch.float64))


def test_roundtrip_random_rotations():
    R = torch.tensor(Rotation.random(1000, random_state=0).as_matrix())
    back = rot6d_to_matrix(matrix_to_rot6d(R))
    assert (back - R).abs().max() < 1e-6


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=6, max_size=6))
def test_rot6d_output_is_rotation(values):
    r = torch.tensor(values, dtype=torch.float64)
    a, b = r[:3], r[3:]
    if a.norm() < 1e-3 or (b - (a @ b) / (a @ a) * a).norm() < 1e-3:
        return
    R = rot6d_to_matrix(r)
    assert (R.T @ R - torch.eye(3, dtype=torch.float64)).abs().max() < 1e-6
    assert abs(torch.linalg.det(R) - 1) < 1e-6


def test_blend_cases():
    r1 = torch.tensor([1.0, 0, 0, 0, 1, 0], dtype=torch.float64)
    r2 = matrix_to_rot6d(torch.tensor(RZ90))
    np.testing.assert_allclose(blend_rot6d(torch.tensor([1.0, 0.0]), torch.stack([r1, r2])), r1)
    np.testing.assert_allclose(blend_rot6d(torch.tensor([0.3, 0.3]), torch.stack([r2, r2])), r2)
    mid = blend_rot6d(torch.tensor([1.0, 1.0]), torch.stack([r1, r2]))
    np.testing.assert_allclose(mid, [0.5, 0.5, 0, -0.5, 0.5, 0], atol=1e-15)
    np.testing.assert_allclose(rot6d_to_matrix(mid), rz(math.pi / 4), atol=1e-12)


def test_blend_errors():
    with pytest.raises(EmptyInput):
        blend_rot6d(torch.zeros(0), torch.zeros(0, 6))
    with pytest.raises(ZeroWeightSum):
        blend_rot6d(torch.zeros(2), torch.ones(2, 6))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100))
def test_blend_weight_scale_invariance(scale):
    rng = np.random.default_rng(1)
    w = torch.tensor(rng.uniform(0.1, 1, 4))
    rots = torch.tensor(rng.normal(size=(4, 6)))
    torch.testing.assert_close(blend_rot6d(w * scale, rots), blend_rot6d(w, rots), rtol=1e-12, atol=1e-12)


def test_apply_rigid_cases():
    root = matrix_to_rot6d(torch.tensor(rz(0.3)))
    g = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    th, gg = apply_rigid(RigidTransform.identity(), root, g)
    torch.testing.assert_close(th, root)
    torch.testing.assert_close(gg, g)

    t = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    th, gg = apply_rigid(RigidTransform.identity()._replace(translation=t), root, g)
    torch.testing.assert_close(th, root)
    torch.testing.assert_close(gg, g + t)

    rho = RigidTransform.from_matrix(torch.tensor(RZ90), torch.zeros(3, dtype=torch.float64))
    _, gg = apply_rigid(rho, root, g)
    np.testing.assert_allclose(gg, [0, 1, 0], atol=1e-15)


def test_apply_rigid_composition():
    rng = np.random.default_rng(3)
    R = Rotation.random(2, random_state=4).as_matrix()
    rho1 = RigidTransform.from_matrix(torch.tensor(R[0]), torch.tensor(rng.normal(size=3)))
    rho2 = RigidTransform.from_matrix(torch.tensor(R[1]), torch.tensor(rng.normal(size=3)))
    root = matrix_to_rot6d(torch.tensor(Rotation.random(random_state=5).as_matrix()))
    g = torch.tensor(rng.normal(size=3))
    th1, g1 = apply_rigid(rho1, root, g)
    th2, g2 = apply_rigid(rho2, th1, g1)
    th12, g12 = apply_rigid(rho2.compose(rho1), root, g)
    assert (g2 - g12).abs().max() < 1e-6
    assert (rot6d_to_matrix(th2) - rot6d_to_matrix(th12)).abs().max() < 1e-6

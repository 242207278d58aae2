import numpy as np
import pytest

from gsavatar import quats
from gsavatar.bodies import (
    Pose,
    default_skeleton,
    forward_kinematics,
    lbs_points,
    single_capsule_skeleton,
)


@pytest.fixture(scope="module")
def skel():
    return default_skeleton()


def test_default_skeleton_is_16_joints_one_head(skel):
    assert skel.num_joints == 16
    assert skel.joint_names.count("head") == 1
    heads = [c for c in skel.template_mesh.capsules if c.is_head]
    assert len(heads) == 1


def test_parents_form_single_rooted_tree(skel):
    assert skel.parents[0] == -1
    assert np.all(skel.parents[1:] >= 0)
    # every joint reaches the root
    for j in range(skel.num_joints):
        seen = set()
        while j != 0:
            assert j not in seen
            seen.add(j)
            j = int(skel.parents[j])


def test_mesh_weights_rows_sum_to_one(skel):
    rows = skel.template_mesh.weights.sum(axis=1)
    assert np.allclose(rows, 1.0, atol=1e-9)


def test_mesh_has_no_degenerate_faces(skel):
    assert skel.template_mesh.face_areas().min() > 1e-9


def test_canonical_fk_matches_rest_positions(skel):
    R, t, _ = forward_kinematics(skel, skel.canonical_pose())
    assert np.allclose(R, np.eye(3)[None], atol=1e-12)
    assert np.allclose(t, skel.rest_joint_positions(), atol=1e-12)


def test_fk_transforms_are_rigid(skel):
    rng = np.random.default_rng(3)
    pose = skel.canonical_pose().perturbed(rng, 0.4, 0.2)
    R, _, _ = forward_kinematics(skel, pose)
    for j in range(skel.num_joints):
        assert np.allclose(R[j] @ R[j].T, np.eye(3), atol=1e-10)
        assert np.linalg.det(R[j]) > 0


def test_root_rotation_rotates_about_origin(skel):
    yaw = 1.1
    pose = skel.canonical_pose().with_root_yaw(yaw)
    _, t, _ = forward_kinematics(skel, pose)
    Ry = quats.to_matrix(quats.from_axis_angle(np.array([0.0, yaw, 0.0])))
    expected = skel.rest_joint_positions() @ Ry.T
    assert np.allclose(t, expected, atol=1e-12)


def test_lbs_points_identity_at_canonical(skel):
    mesh = skel.template_mesh
    out = lbs_points(mesh.vertices, mesh.weights, skel, skel.canonical_pose())
    assert np.allclose(out, mesh.vertices, atol=1e-12)


def test_pose_rejects_non_unit_quaternions():
    q = np.tile(quats.IDENTITY, (16, 1))
    q[3] = [1.0, 0.5, 0.0, 0.0]
    with pytest.raises(ValueError):
        Pose(q, np.zeros(3))


def test_single_capsule_area_control():
    # capsule surface area ~= 2*pi*r*L + 4*pi*r^2 (poles slightly truncated)
    r, L = 0.1, 1.2
    skel = single_capsule_skeleton(r, L)
    area = skel.template_mesh.face_areas().sum()
    analytic = 2 * np.pi * r * L + 4 * np.pi * r * r
    assert abs(area - analytic) / analytic < 0.12


def test_uv_coordinates_stay_inside_capsule_cells(skel):
    mesh = skel.template_mesh
    for ci in range(len(mesh.capsules)):
        sel = mesh.vertex_capsule == ci
        u0, v0, u1, v1 = mesh.uv_cells[ci]
        uv = mesh.uvs[sel]
        assert uv[:, 0].min() >= u0 - 1e-9 and uv[:, 0].max() <= u1 + 1e-9
        assert uv[:, 1].min() >= v0 - 1e-9 and uv[:, 1].max() <= v1 + 1e-9


def test_mirror_capsules_are_mutual(skel):
    mesh = skel.template_mesh
    mirror = mesh.mirror_capsule_index()
    assert np.array_equal(mirror[mirror], np.arange(len(mesh.capsules)))
    names = [c.name for c in mesh.capsules]
    assert names[mirror[names.index("l_thigh")]] == "r_thigh"

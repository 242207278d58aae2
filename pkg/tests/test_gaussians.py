import numpy as np
import pytest

from gsavatar import cameras, quats
from gsavatar.bodies import default_skeleton, single_capsule_skeleton
from gsavatar.gaussians import (
    GaussianSet,
    MapCapacityError,
    build_gaussian_maps,
    concatenate_sets,
    make_template,
    refill_map_channels,
)


@pytest.fixture(scope="module")
def skel():
    return default_skeleton()


@pytest.fixture(scope="module")
def template(skel):
    return make_template(skel, skel.canonical_pose(), density=900.0, seed=7)


def unit_area_capsule():
    # solve 2*pi*r*L + 4*pi*r^2 = 1 for L at r = 0.08
    r = 0.08
    L = (1.0 - 4 * np.pi * r * r) / (2 * np.pi * r)
    return single_capsule_skeleton(r, L)


def test_density_controls_count_on_unit_area_capsule():
    skel = unit_area_capsule()
    gset = make_template(skel, skel.canonical_pose(), density=100.0, seed=0)
    assert 80 <= len(gset) <= 120


def test_zero_density_rejected():
    skel = unit_area_capsule()
    with pytest.raises(ValueError):
        make_template(skel, skel.canonical_pose(), density=0.0)


def test_head_partition_nonempty_and_disjoint(template):
    head = set(template.head_indices.tolist())
    body = set(template.body_indices.tolist())
    assert head and body
    assert head.isdisjoint(body)
    assert head | body == set(range(len(template)))


def test_template_deterministic_given_seed(skel):
    a = make_template(skel, skel.canonical_pose(), density=300.0, seed=11)
    b = make_template(skel, skel.canonical_pose(), density=300.0, seed=11)
    assert np.array_equal(a.means, b.means)
    assert np.array_equal(a.skin_weights, b.skin_weights)
    c = make_template(skel, skel.canonical_pose(), density=300.0, seed=12)
    assert not np.array_equal(a.means, c.means)


def test_template_invariants(template):
    assert np.allclose(np.linalg.norm(template.rotations, axis=1), 1.0, atol=1e-6)
    assert np.all(np.isfinite(template.scales)) and np.all(template.scales > 0)
    assert np.allclose(template.skin_weights.sum(axis=1), 1.0, atol=1e-6)


def test_gaussian_single_view(template):
    g = template[0]
    assert g.scale.shape == (3,)
    assert 0.0 < g.opacity < 1.0


def front_back_cams(width=96):
    return (
        cameras.orbit(np.array([0, 0.9, 0]), 2.6, 0.0, width=width, height=width),
        cameras.orbit(np.array([0, 0.9, 0]), 2.6, np.pi, width=width, height=width),
    )


def test_maps_house_every_gaussian_exactly_once(skel, template):
    front, back = front_back_cams()
    fm, bm = build_gaussian_maps(template, skel.canonical_pose(), front, back, skel, map_size=48)
    ids = np.concatenate([fm.pixel_to_gaussian[fm.occupied], bm.pixel_to_gaussian[bm.occupied]])
    assert np.array_equal(np.sort(ids), np.arange(len(template)))


def test_map_capacity_error_names_minimum(skel, template):
    front, back = front_back_cams()
    with pytest.raises(MapCapacityError, match="need at least"):
        build_gaussian_maps(template, skel.canonical_pose(), front, back, skel, map_size=8)


def test_map_roundtrip_reads_back_posed_positions(skel, template):
    from gsavatar.bodies import lbs_points

    front, back = front_back_cams()
    pose = skel.canonical_pose()
    fm, bm = build_gaussian_maps(template, pose, front, back, skel, map_size=48)
    posed = lbs_points(template.means, template.skin_weights, skel, pose)
    for m in (fm, bm):
        occ = m.occupied
        ids = m.pixel_to_gaussian[occ]
        assert np.allclose(m.channels[occ], posed[ids], atol=1e-12)


def test_refill_changes_arm_pixels_only(skel, template):
    from gsavatar.bodies import lbs_points

    front, back = front_back_cams()
    canonical = skel.canonical_pose()
    fm, bm = build_gaussian_maps(template, canonical, front, back, skel, map_size=48)

    # raise the left arm 90 degrees at the shoulder
    q = canonical.joint_rotations.copy()
    lsh = skel.joint_names.index("l_shoulder")
    q[lsh] = quats.from_axis_angle(np.array([0.0, 0.0, np.pi / 2]))
    raised = type(canonical)(q, canonical.root_translation)

    posed = lbs_points(template.means, template.skin_weights, skel, raised)
    fm2 = refill_map_channels(fm, posed)

    arm_joints = [lsh, skel.joint_names.index("l_elbow"), skel.joint_names.index("l_wrist")]
    occ = fm.occupied
    ids = fm.pixel_to_gaussian[occ]
    moved = np.abs(fm2.channels[occ] - fm.channels[occ]).max(axis=1)
    affected = template.skin_weights[ids][:, arm_joints].sum(axis=1) > 1e-9
    assert moved[~affected].max() < 1e-6
    assert moved[affected].max() > 0.05


def test_tiny_map_injectivity():
    skel = unit_area_capsule()
    gset = make_template(skel, skel.canonical_pose(), density=4.0, seed=0)
    front, back = front_back_cams(width=64)
    fm, bm = build_gaussian_maps(gset, skel.canonical_pose(), front, back, skel, map_size=2)
    ids = np.concatenate([fm.pixel_to_gaussian[fm.occupied], bm.pixel_to_gaussian[bm.occupied]])
    assert np.array_equal(np.sort(ids), np.arange(len(gset)))


def test_concatenate_sets_unions_attributes(template):
    other = GaussianSet(
        means=np.zeros((5, 3)),
        rotations=np.tile(quats.IDENTITY, (5, 1)),
        log_scales=np.full((5, 3), -3.0),
        colors=np.full((5, 3), 0.2),
        opacities_raw=np.zeros(5),
        skin_weights=np.eye(template.num_joints)[np.zeros(5, int)],
        head_indices=np.array([], int),
    )
    both = concatenate_sets(template, other)
    assert len(both) == len(template) + 5
    assert np.array_equal(both.head_indices, template.head_indices)

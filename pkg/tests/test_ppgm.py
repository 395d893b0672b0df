import numpy as np
import pytest
from scipy import ndimage

from pournet.exceptions import ContractError, ShapeError
from pournet.models.config import DemonsConfig, PhantomSpec
from pournet.services.phantom import degrade, generate_atlas, generate_phantom
from pournet.services.ppgm import (
    AtlasDataset,
    DeformationField,
    atlas_match,
    demons_register,
    generate_prior,
    jacobian_determinant,
    warp,
)
from pournet.services.volume import Volume3D, VolumeKind, normalize_mu, write_volume
from pournet.telemetry import PPGM_MATCH, PPGM_REGISTER, get_phase_timer


def brute_force(query, volumes):
    best_index, best_mse = 0, np.inf
    for index, volume in enumerate(volumes):
        total = 0.0
        for a, b in zip(volume.ravel().astype(np.float64), query.ravel().astype(np.float64)):
            total += (a - b) ** 2
        mse = total / query.size
        if mse < best_mse:
            best_index, best_mse = index, mse
    return best_index, best_mse


@pytest.fixture
def random_atlas(rng, make_volume):
    entries = [(f"{i:04d}", make_volume(rng.uniform(size=(8, 8, 8)))) for i in range(16)]
    return AtlasDataset(entries)


def smooth_phantom(size=32, seed=0):
    mu, _ = generate_phantom(PhantomSpec(size=size, seed=seed))
    data = ndimage.gaussian_filter(normalize_mu(mu).data.astype(np.float64), 1.0)
    return Volume3D(data, mu.spacing, VolumeKind.MU_NORMALIZED)


def test_atlas_match_equals_brute_force(random_atlas, rng, make_volume):
    query = make_volume(rng.uniform(size=(8, 8, 8)))
    result = atlas_match(query, random_atlas)
    index, mse = brute_force(query.data, [e.volume.data for e in random_atlas])
    assert result.index == index
    assert result.mse == pytest.approx(mse, rel=1e-9)
    assert result.id == f"{index:04d}"
    threaded = atlas_match(query, random_atlas, workers=3)
    assert threaded.index == result.index
    assert threaded.mse == pytest.approx(result.mse, rel=1e-12)


def test_atlas_match_finds_exact_member(random_atlas):
    member = random_atlas[11].volume
    result = atlas_match(member, random_atlas)
    assert result.index == 11
    assert result.mse == 0.0
    assert atlas_match(member, random_atlas, presample=2).index == 11


def test_atlas_match_ties_prefer_lower_index(make_volume):
    twin = np.full((4, 4, 4), 0.5)
    atlas = AtlasDataset([("b", make_volume(twin)), ("a", make_volume(twin)),
                          ("c", make_volume(twin + 1))])
    assert atlas.ids == ["a", "b", "c"]
    assert atlas_match(make_volume(twin), atlas).index == 0


def test_atlas_match_resamples_query(random_atlas, make_volume):
    query = make_volume(np.full((12, 12, 12), 0.5))
    result = atlas_match(query, random_atlas)
    assert 0 <= result.index < 16


def test_atlas_match_rejects_bad_arguments(random_atlas, make_volume):
    with pytest.raises(ContractError):
        atlas_match(make_volume(np.zeros((8, 8, 8))), AtlasDataset([]))
    with pytest.raises(ContractError):
        atlas_match(make_volume(np.zeros((8, 8, 8))), random_atlas, presample=3)


def test_atlas_validation(make_volume):
    vol = make_volume(np.zeros((4, 4, 4)))
    with pytest.raises(ContractError, match="unique"):
        AtlasDataset([("a", vol), ("a", vol)])
    with pytest.raises(ContractError, match="MU_NORMALIZED"):
        AtlasDataset([("a", make_volume(np.zeros((4, 4, 4)), kind=VolumeKind.MU))])
    with pytest.raises(ShapeError):
        AtlasDataset([("a", vol), ("b", make_volume(np.zeros((4, 4, 5))))])
    with pytest.raises(ContractError):
        AtlasDataset([]).shape


def test_atlas_directory_round_trip(tmp_path, random_atlas, make_volume):
    random_atlas.to_directory(tmp_path / "atlas")
    loaded = AtlasDataset.from_directory(tmp_path / "atlas")
    assert loaded.ids == random_atlas.ids
    np.testing.assert_array_equal(loaded.stacked, random_atlas.stacked)

    raw = tmp_path / "raw"
    raw.mkdir()
    write_volume(make_volume(np.full((4, 4, 4), 0.075), kind=VolumeKind.MU), raw / "0000.vvol")
    entry = AtlasDataset.from_directory(raw)[0]
    assert entry.volume.kind == VolumeKind.MU_NORMALIZED
    np.testing.assert_allclose(entry.volume.data, 0.5)

    with pytest.raises(ContractError, match="no .vvol"):
        AtlasDataset.from_directory(tmp_path / "empty")


def test_warp_zero_field_is_exact(rng, make_volume):
    vol = make_volume(rng.uniform(size=(6, 7, 8)))
    out = warp(vol, DeformationField.zeros(vol.shape))
    np.testing.assert_array_equal(out.data, vol.data)
    assert out.kind == vol.kind


def test_warp_integer_shift(rng, make_volume):
    vol = make_volume(rng.uniform(size=(6, 6, 10)))
    out = warp(vol, DeformationField.constant(vol.shape, (0.0, 0.0, 2.0)))
    np.testing.assert_array_equal(out.data[:, :, :-2], vol.data[:, :, 2:])
    # samples beyond the edge clamp to the border
    np.testing.assert_array_equal(out.data[:, :, -1], vol.data[:, :, -1])


def test_warp_rejects_mismatched_field(make_volume):
    with pytest.raises(ShapeError):
        warp(make_volume(np.zeros((4, 4, 4))), DeformationField.zeros((4, 4, 5)))


def test_deformation_field_validation():
    with pytest.raises(ShapeError):
        DeformationField(np.zeros((2, 4, 4, 4)))
    bad = np.zeros((3, 4, 4, 4))
    bad[0, 1, 1, 1] = np.nan
    with pytest.raises(ContractError):
        DeformationField(bad)
    field = DeformationField.constant((4, 5, 6), (1.0, 2.0, 2.0))
    assert field.dims == (6, 5, 4)
    assert field.mean_magnitude() == pytest.approx(3.0)


def test_jacobian_of_translation_is_one():
    field = DeformationField.constant((5, 5, 5), (0.5, -1.0, 2.0))
    np.testing.assert_allclose(jacobian_determinant(field), 1.0)
    assert field.positive_jacobian_fraction() == 1.0


def test_jacobian_of_uniform_scaling():
    z, y, x = np.meshgrid(*(np.arange(6.0),) * 3, indexing="ij")
    field = DeformationField(np.stack([0.1 * z, 0.1 * y, 0.1 * x]))
    np.testing.assert_allclose(field.jacobian_determinant(), 1.1**3)


def test_register_identical_volumes(make_volume, rng):
    data = ndimage.gaussian_filter(rng.uniform(size=(16, 16, 16)), 2.0)
    vol = make_volume(data)
    field, warped = demons_register(vol, vol)
    assert field.mean_magnitude() < 1e-6
    np.testing.assert_allclose(warped.data, vol.data, atol=1e-6)


def test_register_never_increases_mse(rng, make_volume):
    fixed = make_volume(ndimage.gaussian_filter(rng.uniform(size=(16, 16, 16)), 1.5))
    moving = make_volume(ndimage.gaussian_filter(rng.uniform(size=(16, 16, 16)), 1.5))
    cfg = DemonsConfig(pyramid_levels=2, iterations_per_level=(10, 10))
    _, warped = demons_register(fixed, moving, cfg)
    before = np.mean((fixed.data.astype(np.float64) - moving.data) ** 2)
    after = np.mean((fixed.data.astype(np.float64) - warped.data) ** 2)
    assert after <= before + 1e-9


def test_register_rejects_mismatched_inputs(make_volume):
    with pytest.raises(ShapeError):
        demons_register(make_volume(np.zeros((8, 8, 8))), make_volume(np.zeros((8, 8, 6))))


def test_generate_prior_report(make_volume):
    atlas = AtlasDataset([(f"{i:04d}", smooth_phantom(16, seed=i)) for i in range(4)])
    truth = smooth_phantom(16, seed=9)
    prior, index, report = generate_prior(truth, atlas, ground_truth=truth)
    assert prior.shape == truth.shape
    assert prior.kind == VolumeKind.MU_NORMALIZED
    assert report.matched_index == index
    assert report.matched_id == atlas[index].id
    assert report.registered_mse <= report.matched_mse + 1e-9
    assert report.gt_registered_psnr >= report.gt_matched_psnr - 1e-6
    stats = get_phase_timer().get_stats()["phases"]
    assert stats[PPGM_MATCH]["count"] == 1
    assert stats[PPGM_REGISTER]["count"] == 1


@pytest.mark.slow
def test_register_recovers_rigid_shift():
    fixed = smooth_phantom(32, seed=1)
    # warp(moving, +2 in x) reproduces fixed
    moving = fixed.with_data(ndimage.shift(fixed.data, (0, 0, 2), order=1, mode="nearest"))
    field, warped = demons_register(fixed, moving)
    body = ndimage.binary_erosion(fixed.data > 0.3, iterations=3)
    assert abs(field.displacement[2][body].mean() - 2.0) < 0.5
    assert np.mean((fixed.data - warped.data) ** 2) < np.mean((fixed.data - moving.data) ** 2)
    assert field.positive_jacobian_fraction() > 0.99


@pytest.mark.slow
def test_register_recovers_smooth_warp():
    moving = smooth_phantom(32, seed=2)
    z, y, x = np.meshgrid(*(np.arange(32.0),) * 3, indexing="ij")
    wave = 1.5 * np.sin(2 * np.pi * z / 32) * np.cos(2 * np.pi * y / 32)
    truth = DeformationField(np.stack([0.5 * wave, wave, -wave]))
    fixed = warp(moving, truth)
    field, _ = demons_register(fixed, moving)
    body = ndimage.binary_erosion(fixed.data > 0.3, iterations=3)
    error = np.sqrt(np.sum((field.displacement - truth.displacement) ** 2, axis=0))
    assert error[body].mean() < 0.5


@pytest.mark.slow
def test_registration_improves_matched_priors(small_spec):
    atlas = generate_atlas(64, small_spec)
    for index in range(4):
        mu, lam = generate_phantom(small_spec, index)
        _, mu_mlaa = degrade(mu, lam, 0.1, small_spec.seed, index=index)
        query, truth = normalize_mu(mu_mlaa), normalize_mu(mu)

        _, matched, report = generate_prior(query, atlas, ground_truth=truth)
        expected, _ = brute_force(query.data, [e.volume.data for e in atlas])
        assert matched == expected
        assert report.gt_registered_psnr >= report.gt_matched_psnr, index

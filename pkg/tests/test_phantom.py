import hashlib

import numpy as np
import pytest

from pournet import seeding
from pournet.exceptions import ContractError
from pournet.models.config import DatasetConfig, DegradeConfig, PhantomSpec
from pournet.services.cascade import TrainingManifest
from pournet.services.phantom import (
    Tissue,
    atlas_id,
    degrade,
    export_dataset,
    fraction_tag,
    generate_atlas,
    generate_phantom,
    phantom_labels,
    split_tags,
)
from pournet.services.volume import VolumeKind, normalize_mu, read_volume


def test_phantom_is_deterministic(small_spec):
    mu_a, lam_a = generate_phantom(small_spec, 2)
    mu_b, lam_b = generate_phantom(small_spec, 2)
    np.testing.assert_array_equal(mu_a.data, mu_b.data)
    np.testing.assert_array_equal(lam_a.data, lam_b.data)
    mu_c, _ = generate_phantom(small_spec, 3)
    assert not np.array_equal(mu_a.data, mu_c.data)


def test_phantom_values_and_kinds(small_spec):
    mu, lam = generate_phantom(small_spec)
    assert mu.kind == VolumeKind.MU
    assert lam.kind == VolumeKind.ACTIVITY
    assert mu.dims == (16, 16, 16)
    assert mu.spacing == (2.0, 2.0, 2.0)
    assert mu.data.min() >= 0.0
    assert mu.data.max() <= 0.15 + 1e-6
    assert lam.data.min() >= 0.0
    # corners lie outside the body
    assert mu.data[0, 0, 0] < 1e-3


def test_labels_contain_every_structure():
    spec = PhantomSpec(size=32, seed=4, lesion_count=(1, 1))
    labels = phantom_labels(spec, seeding.substream(4, seeding.PHANTOM, 0))
    present = set(np.unique(labels).tolist())
    assert {Tissue.BACKGROUND, Tissue.SOFT, Tissue.LUNG, Tissue.BONE} <= present
    # spine sits posterior (+y) of the centre
    bone_y = np.nonzero(labels == Tissue.BONE)[1]
    assert bone_y.mean() > 16


def test_body_outside_grid_is_rejected():
    spec = PhantomSpec(size=16, body_axes=(1.05, 0.5, 0.5), body_jitter=0.0)
    with pytest.raises(ContractError, match="outside the grid"):
        generate_phantom(spec)


def test_degrade_is_seeded_and_shaped(small_spec):
    mu, lam = generate_phantom(small_spec)
    lam_a, mu_a = degrade(mu, lam, 0.1, seed=1)
    lam_b, mu_b = degrade(mu, lam, 0.1, seed=1)
    np.testing.assert_array_equal(mu_a.data, mu_b.data)
    np.testing.assert_array_equal(lam_a.data, lam_b.data)
    assert mu_a.kind == VolumeKind.MU
    assert lam_a.kind == VolumeKind.ACTIVITY
    assert mu_a.shape == mu.shape
    _, mu_c = degrade(mu, lam, 0.1, seed=2)
    assert not np.array_equal(mu_a.data, mu_c.data)


def test_degrade_preserves_mean_activity(small_spec):
    mu, lam = generate_phantom(small_spec)
    lam_mlaa, _ = degrade(mu, lam, 0.5, seed=0, cfg=DegradeConfig(total_counts=1e7))
    assert lam_mlaa.data.mean() == pytest.approx(lam.data.mean(), rel=0.02)


def test_degrade_without_noise_is_smoothing_only(small_spec):
    mu, lam = generate_phantom(small_spec)
    cfg = DegradeConfig(poisson=False, mu_noise=0.0, crosstalk=0.0)
    lam_a, mu_a = degrade(mu, lam, 0.1, seed=0, cfg=cfg)
    lam_b, mu_b = degrade(mu, lam, 0.025, seed=7, cfg=cfg)
    np.testing.assert_array_equal(mu_a.data, mu_b.data)
    np.testing.assert_array_equal(lam_a.data, lam_b.data)


@pytest.mark.parametrize("cfg", [DegradeConfig(), DegradeConfig(crosstalk=0.0)])
def test_lower_counts_are_noisier(small_spec, cfg):
    mu, lam = generate_phantom(small_spec)

    def variance(fraction):
        draws = np.stack([degrade(mu, lam, fraction, seed=s, cfg=cfg)[1].data
                          for s in range(50)])
        return draws.var(axis=0).mean()

    assert variance(0.025) > variance(0.10)


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5, float("nan")])
def test_degrade_rejects_bad_fraction(small_spec, fraction):
    mu, lam = generate_phantom(small_spec)
    with pytest.raises(ContractError):
        degrade(mu, lam, fraction, seed=0)


def test_atlas_generation(small_spec):
    atlas = generate_atlas(3, small_spec)
    assert atlas.ids == ["0000", "0001", "0002"]
    assert all(e.volume.kind == VolumeKind.MU_NORMALIZED for e in atlas)
    assert atlas.shape == (16, 16, 16)
    threaded = generate_atlas(3, small_spec, workers=2)
    np.testing.assert_array_equal(atlas.stacked, threaded.stacked)
    # the atlas stream is disjoint from the phantom stream
    mu, _ = generate_phantom(small_spec, 0)
    assert not np.allclose(atlas[0].volume.data, mu.data / 0.15)
    with pytest.raises(ContractError):
        generate_atlas(0, small_spec)


def test_atlas_id_ordering():
    assert atlas_id(7, 10) == "0007"
    assert atlas_id(123, 20000) == "00123"
    ids = [atlas_id(i, 12000) for i in range(12000)]
    assert ids == sorted(ids)


def test_split_tags():
    assert split_tags(10) == ["train"] * 7 + ["val"] + ["test"] * 2
    assert split_tags(16, DatasetConfig(val_fraction=0.0, test_fraction=0.25)) == (
        ["train"] * 12 + ["test"] * 4
    )
    assert split_tags(1) == ["train"]


def test_fraction_tag():
    assert fraction_tag(0.1) == "0.1"
    assert fraction_tag(0.025) == "0.025"


def test_export_dataset(tmp_path):
    spec = PhantomSpec(size=12, seed=5, count_fractions=(0.1, 0.025), lesion_count=(0, 0))
    manifests = export_dataset(tmp_path, spec, 4, workers=2)
    assert [m.name for m in manifests] == ["manifest_f0.1.tsv", "manifest_f0.025.tsv"]
    manifest = TrainingManifest.load(manifests[0])
    assert [r.case_id for r in manifest.records] == ["case000", "case001", "case002", "case003"]
    assert [r.split for r in manifest.records] == ["train", "train", "train", "test"]
    for name in ("lambda_gt.vvol", "mu_gt.vvol", "lambda_mlaa_f0.1.vvol", "mu_mlaa_f0.025.vvol"):
        assert (tmp_path / "case002" / name).exists()
    mu_gt = read_volume(tmp_path / "case001" / "mu_gt.vvol")
    expected, _ = generate_phantom(spec, 1)
    np.testing.assert_array_equal(mu_gt.data, expected.data)
    case = manifest.load_case(manifest.records[0])
    assert case.mu_gt.kind == VolumeKind.MU_NORMALIZED
    assert case.lam.kind == VolumeKind.ACTIVITY_NORMALIZED


def test_tissue_attenuation_ordering():
    # without ribs every bone voxel belongs to the spine
    spec = PhantomSpec(size=32, seed=6, lesion_count=(0, 0), rib_count=(0, 0))
    for index in range(3):
        labels = phantom_labels(spec, seeding.substream(spec.seed, seeding.PHANTOM, index))
        mu, _ = generate_phantom(spec, index)
        means = {t: mu.data[labels == t].mean() for t in (Tissue.LUNG, Tissue.SOFT, Tissue.BONE)}
        assert means[Tissue.LUNG] < means[Tissue.SOFT] < means[Tissue.BONE]


def test_atlas_never_repeats_a_phantom(small_spec):
    def digest(volume):
        return hashlib.sha256(volume.data.tobytes()).hexdigest()

    atlas = {digest(e.volume) for e in generate_atlas(64, small_spec)}
    assert len(atlas) == 64
    cases = {digest(normalize_mu(generate_phantom(small_spec, i)[0])) for i in range(18)}
    assert atlas.isdisjoint(cases)

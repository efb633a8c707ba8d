import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcasunet.data import (
    AnnotatedImage, AnnotationParseError, DataError, MissingImageError, OutOfBoundsError, PlacementError,
    SynthSpec, augment, crop, density_target, format_annotation_line, hflip, ingest_annotations,
    load_dataset, parse_annotation_line, resize_image, stack_dataset, synth_generate, vflip, write_dataset,
)
from gcasunet.pnm import PNMError, read_pgm, read_ppm, write_pgm_density, write_ppm

import oracles


def test_density_target_sums():
    assert density_target(np.zeros((0, 2)), 16, 16).sum() == 0
    assert abs(density_target([(31.5, 31.5)], 64, 64, 2.0).sum() - 1.0) < 1e-6
    pts = np.random.default_rng(0).uniform(0, 63, size=(7, 2))
    assert abs(density_target(pts, 64, 64, 2.0).sum() - 7.0) < 1e-5


def test_density_target_interior_shape_matches_gaussian():
    # far from the border the truncated kernel keeps all but ~e^-8 of the mass
    got = density_target([(20.0, 30.0)], 64, 64, 2.0)
    ref = oracles.gaussian_mass([(20.0, 30.0)], 64, 64, 2.0)
    assert np.max(np.abs(got - ref)) < 1e-4
    assert got[30, 20] == got.max()
    assert got[30, 29] == 0.0  # beyond the 4 sigma radius


def test_density_target_rejects_bad_sigma():
    with pytest.raises(DataError):
        density_target([(1.0, 1.0)], 4, 4, 0.0)


coord = st.one_of(st.floats(0.0, 1.0), st.floats(0.0, 31.0), st.floats(30.0, 31.0), st.sampled_from([0.0, 31.0]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(coord, coord), max_size=12), st.sampled_from([0.5, 1.0, 2.0, 3.0]))
def test_density_integral_equals_count(points, sigma):
    d = density_target(np.array(points, dtype=np.float64).reshape(-1, 2), 32, 32, sigma)
    assert abs(d.sum() - len(points)) < 1e-5 and (d >= 0).all()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 23), st.floats(0, 15)), max_size=6))
def test_density_commutes_with_flips(points):
    img = AnnotatedImage(np.zeros((16, 24, 3)), points)
    base = density_target(img.points, 16, 24)
    assert np.max(np.abs(density_target(hflip(img).points, 16, 24) - base[:, ::-1])) < 1e-6
    assert np.max(np.abs(density_target(vflip(img).points, 16, 24) - base[::-1])) < 1e-6


def test_synth_counts_and_determinism():
    spec = SynthSpec(image_size=32, count_range=(5, 5), seed=3)
    recs = synth_generate(spec, 20)
    assert all(r.true_count == 5 for r in recs)
    again = synth_generate(spec, 20)
    assert all(np.array_equal(a.pixels, b.pixels) and np.array_equal(a.points, b.points) for a, b in zip(recs, again))
    empty = synth_generate(SynthSpec(image_size=32, count_range=(0, 0)), 5)
    assert all(r.true_count == 0 for r in empty)


def test_synth_image_depends_only_on_seed_and_index():
    spec = SynthSpec(image_size=32, seed=1)
    a = synth_generate(spec, 6)
    b = synth_generate(spec, 3, start=3)
    for x, y in zip(a[3:], b):
        assert np.array_equal(x.pixels, y.pixels) and x.name == y.name


def test_synth_pixel_range_and_quantisation():
    r = synth_generate(SynthSpec(image_size=32, seed=2), 1)[0]
    assert r.pixels.dtype == np.float32 and r.pixels.min() >= 0 and r.pixels.max() <= 1
    q = r.pixels.astype(np.float64) * 255
    assert np.max(np.abs(q - np.rint(q))) < 1e-4


def test_synth_targets_respect_overlap_bound():
    spec = SynthSpec(image_size=64, count_range=(20, 20), seed=4)
    for r in synth_generate(spec, 5):
        p = r.points
        d = np.hypot(*(p[:, None] - p[None]).transpose(2, 0, 1))
        np.fill_diagonal(d, np.inf)
        # centres at least (1 - 0.5) * (r1 + r2) >= 2.0 px apart
        assert d.min() >= 2.0 - 1e-9


def test_synth_spec_validation():
    with pytest.raises(DataError):
        SynthSpec(count_range=(5, 3))
    with pytest.raises(PlacementError):
        SynthSpec(image_size=16, count_range=(1, 200))
    with pytest.raises(DataError):
        SynthSpec(object_radius_range=(0.0, 1.0))


def test_annotation_line_parsing():
    name, pts = parse_annotation_line("img1.ppm; (3.0,4.0) (10.5,20.25)", 1)
    assert name == "img1.ppm" and pts.tolist() == [[3.0, 4.0], [10.5, 20.25]]
    assert parse_annotation_line("  # only a comment", 2) is None
    name, pts = parse_annotation_line("a.ppm;", 3)
    assert len(pts) == 0
    for bad in ("no separator", "a.ppm; (1,2) junk", "; (1,2)", "a.ppm; (1,x)"):
        with pytest.raises(AnnotationParseError, match="line 7"):
            parse_annotation_line(bad, 7)


def test_annotation_format_round_trip():
    pts = np.array([[0.1, 2.0], [1 / 3, 7.25]])
    line = format_annotation_line("x.ppm", pts)
    name, back = parse_annotation_line(line, 1)
    assert name == "x.ppm" and np.array_equal(back, pts)


def test_write_and_load_dataset_round_trip(tmp_path):
    recs = synth_generate(SynthSpec(image_size=16, count_range=(0, 4), seed=5), 4)
    write_dataset(tmp_path, recs)
    back = load_dataset(tmp_path)
    for a, b in zip(recs, back):
        assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.points, b.points) and a.name == b.name


def test_ingest_errors(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.zeros((8, 8, 3)))
    ann = tmp_path / "ann.txt"
    ann.write_text("")
    assert ingest_annotations(tmp_path, ann) == []
    ann.write_text("a.ppm; (-1,5)\n")
    with pytest.raises(OutOfBoundsError, match="a.ppm"):
        ingest_annotations(tmp_path, ann)
    ann.write_text("# header\nmissing.ppm; (1,1)\n")
    with pytest.raises(MissingImageError, match="line 2"):
        ingest_annotations(tmp_path, ann)
    ann.write_text("a.ppm (1,1)\n")
    with pytest.raises(AnnotationParseError, match="line 1"):
        ingest_annotations(tmp_path, ann)


def test_ingest_resizes_and_rescales_points(tmp_path):
    px = np.zeros((8, 8, 3))
    px[2, 6] = 1.0
    write_ppm(tmp_path / "a.ppm", px)
    (tmp_path / "ann.txt").write_text("a.ppm; (6,2) (0,0) (7,7)\n")
    (rec,) = ingest_annotations(tmp_path, tmp_path / "ann.txt", input_size=16)
    assert rec.pixels.shape == (16, 16, 3)
    assert rec.points.tolist() == [[12.5, 4.5], [0.5, 0.5], [14.5, 14.5]]
    # the bright pixel lands around the rescaled point
    y, x = np.unravel_index(rec.pixels[..., 0].argmax(), (16, 16))
    assert abs(x - 12.5) <= 1 and abs(y - 4.5) <= 1


def test_resize_identity_and_constant():
    img = np.random.default_rng(1).uniform(size=(6, 6, 3))
    assert np.allclose(resize_image(img, 6), img)
    assert np.allclose(resize_image(np.full((5, 5, 3), 0.4), 9), 0.4)


def test_flip_laws():
    img = AnnotatedImage(np.random.default_rng(2).uniform(size=(8, 10, 3)), [(2.5, 3.0), (0.0, 7.0)])
    f = hflip(img)
    assert f.points.tolist() == [[6.5, 3.0], [9.0, 7.0]]
    assert np.array_equal(hflip(f).pixels, img.pixels) and np.array_equal(hflip(f).points, img.points)
    assert np.array_equal(vflip(vflip(img)).points, img.points)
    assert vflip(img).true_count == img.true_count == f.true_count


def test_crop_laws():
    img = AnnotatedImage(np.random.default_rng(3).uniform(size=(8, 8, 3)), [(1.0, 1.0), (6.0, 6.0)])
    whole = crop(img, 0, 0, 8, 8)
    assert np.array_equal(whole.pixels, img.pixels) and np.array_equal(whole.points, img.points)
    part = crop(img, 0, 0, 4, 4)
    assert part.true_count == 1 and part.pixels.shape == (4, 4, 3)
    shifted = crop(img, 2, 3, 6, 5)
    assert shifted.points.tolist() == [[3.0, 4.0]]
    with pytest.raises(DataError):
        crop(img, 0, 0, 0, 4)
    with pytest.raises(DataError):
        crop(img, 5, 5, 4, 4)


def test_augment_is_seeded():
    img = AnnotatedImage(np.random.default_rng(4).uniform(size=(16, 16, 3)), [(3.0, 4.0), (12.0, 9.0)])
    a = augment(img, ["hflip", "crop"], seed=7)
    b = augment(img, ["hflip", "crop"], seed=7)
    assert np.array_equal(a.pixels, b.pixels) and a.pixels.shape == (12, 12, 3)
    assert augment(img, ["crop"], crop_box=(0, 0, 16, 16)).true_count == 2
    with pytest.raises(DataError):
        augment(img, ["rotate"])
    with pytest.raises(DataError):
        augment(img, ["crop"], crop_size=(0, 4))


def test_stack_dataset():
    recs = synth_generate(SynthSpec(image_size=16, count_range=(1, 3)), 3)
    imgs, dens, counts = stack_dataset(recs)
    assert imgs.shape == (3, 16, 16, 3) and dens.shape == (3, 16, 16)
    assert np.allclose(dens.sum(axis=(1, 2)), counts, atol=1e-5)
    with pytest.raises(DataError):
        stack_dataset([])


def test_ppm_round_trip_and_errors(tmp_path):
    px = np.rint(np.random.default_rng(5).uniform(size=(5, 7, 3)) * 255) / 255
    write_ppm(tmp_path / "x.ppm", px)
    assert np.allclose(read_ppm(tmp_path / "x.ppm"), px, atol=0)
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(PNMError):
        read_ppm(tmp_path / "bad.ppm")
    (tmp_path / "short.ppm").write_bytes(b"P6\n4 4\n255\n\x00\x00")
    with pytest.raises(PNMError):
        read_ppm(tmp_path / "short.ppm")


def test_pgm_density_export(tmp_path):
    d = density_target([(3.0, 4.0), (10.0, 2.0)], 12, 16)
    scale = write_pgm_density(tmp_path / "d.pgm", d)
    text = (tmp_path / "d.pgm").read_text()
    assert text.startswith("P2\n# scale=")
    grid, s = read_pgm(tmp_path / "d.pgm")
    assert s == scale and grid.max() == 65535 and grid.shape == (12, 16)
    # quantisation error is at most half a level per pixel
    assert np.max(np.abs(grid * s - d)) <= s / 2 + 1e-15
    assert abs(grid.sum() * s - d.sum()) <= d.size * s / 2
    write_pgm_density(tmp_path / "z.pgm", np.zeros((3, 3)))
    grid, s = read_pgm(tmp_path / "z.pgm")
    assert grid.sum() == 0

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mwtcs.phantoms import (
    NS_TEST,
    NS_TRAIN,
    Circle,
    CirclePhantomSpec,
    derive_seed,
    generate_dataset,
    generate_phantom,
    load_dataset,
    render_circles,
    save_dataset,
)
from oracles import pixel_disc_count


def test_empty_scene():
    spec = CirclePhantomSpec(n_circles_range=(0, 0))
    assert not generate_phantom(spec, 3).any()


def test_centred_circle_pixel_count():
    x = render_circles([Circle(16.0, 16.0, 4.0, 2.0)], 32)
    n = int(np.count_nonzero(x == 1.0))
    assert n == pixel_disc_count(32, 16.0, 16.0, 4.0)
    assert abs(n - np.pi * 16) <= 6
    assert set(np.unique(x)) == {0.0, 1.0}


def test_later_circles_overwrite():
    x = render_circles([Circle(8, 8, 4, 2.0), Circle(8, 8, 2, 3.0)], 16).reshape(16, 16)
    assert x[7, 7] == 2.0
    assert x[8, 4] == 1.0


def test_row_major_layout():
    # a circle near the top-left corner lights up the first row
    x = render_circles([Circle(0.5, 0.5, 0.4, 2.0)], 4)
    assert x[0] == 1.0 and x.sum() == 1.0


def test_determinism():
    spec = CirclePhantomSpec()
    np.testing.assert_array_equal(generate_phantom(spec, 42), generate_phantom(spec, 42))
    assert not np.array_equal(generate_phantom(spec, 42), generate_phantom(spec, 43))


def test_dataset_elements_follow_seed_rule():
    spec = CirclePhantomSpec()
    ds = generate_dataset(spec, 5, seed=11)
    for k in range(5):
        np.testing.assert_array_equal(ds[k], generate_phantom(spec, derive_seed(11, k)))
    np.testing.assert_array_equal(generate_dataset(spec, 1, 11)[0], ds[0])


def test_namespaces_do_not_collide():
    train = {derive_seed(5, k, NS_TRAIN) for k in range(20000)}
    test = {derive_seed(5, k, NS_TEST) for k in range(1000)}
    assert len(train) == 20000
    assert not train & test


def test_dataset_file_is_reproducible(tmp_path):
    spec = CirclePhantomSpec()
    for name in ("a", "b"):
        save_dataset(tmp_path / f"{name}.mtx", generate_dataset(spec, 100, 9), spec, 9)
    assert (tmp_path / "a.mtx").read_bytes() == (tmp_path / "b.mtx").read_bytes()
    assert (tmp_path / "a.mtx.json").read_bytes() == (tmp_path / "b.mtx.json").read_bytes()
    data, meta = load_dataset(tmp_path / "a.mtx")
    assert data.shape == (100, 256)
    assert CirclePhantomSpec.from_dict(meta["spec"]) == spec


def test_large_dataset_timing():
    t0 = time.perf_counter()
    ds = generate_dataset(CirclePhantomSpec(), 10_000, seed=0)
    assert time.perf_counter() - t0 < 10.0
    assert ds.shape == (10_000, 256)


def test_spec_validation():
    with pytest.raises(ValueError):
        CirclePhantomSpec(epsilon_r_range=(1.0, 2.0))
    with pytest.raises(ValueError):
        CirclePhantomSpec(radius_range=(1.0, 8.0), grid_pixels_per_side=16)


@settings(max_examples=50, deadline=None)
@given(
    m=st.integers(8, 24),
    n_max=st.integers(0, 4),
    r_max=st.floats(1.0, 3.9),
    seed=st.integers(0, 2**63 - 1),
)
def test_background_fraction_and_nonnegativity(m, n_max, r_max, seed):
    spec = CirclePhantomSpec(
        n_circles_range=(0, n_max), radius_range=(0.5, r_max), grid_pixels_per_side=m
    )
    x = generate_phantom(spec, seed)
    assert np.all(x >= 0)
    # a disc of radius r covers at most pi*(r + sqrt(2)/2)^2 pixel centres;
    # the continuous bound n*pi*r^2/I needs the pixelisation slack
    frac = np.count_nonzero(x) / x.size
    assert frac <= n_max * np.pi * (r_max + np.sqrt(0.5)) ** 2 / x.size + 1e-12

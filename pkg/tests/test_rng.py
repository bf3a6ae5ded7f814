import numpy as np

from splitplot.rng import make_stream, open_uniforms, partial_fisher_yates, shuffle_tags, standard_normals


def test_stream_depends_only_on_seed_and_path():
    a = make_stream(5, (1, 2)).integers(0, 1 << 30, size=8)
    make_stream(5, (9,)).integers(0, 10, size=100)
    b = make_stream(5, (1, 2)).integers(0, 1 << 30, size=8)
    c = make_stream(5, (1, 3)).integers(0, 1 << 30, size=8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_open_uniforms_exclude_endpoints():
    u = open_uniforms(make_stream(1), 100_000)
    assert u.min() > 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.01


def test_standard_normals_moments():
    z = standard_normals(make_stream(2), 200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1) < 0.01


def test_partial_fisher_yates_draws_distinct_indices():
    picks = partial_fisher_yates(make_stream(3), 10, 4, batch=50)
    assert picks.shape == (50, 4)
    assert all(len(set(row)) == 4 for row in picks)
    assert picks.min() >= 0 and picks.max() <= 9


def test_partial_fisher_yates_is_uniform_over_subsets():
    rng = make_stream(4)
    picks = partial_fisher_yates(rng, 5, 2, batch=60_000)
    keys = np.sort(picks, axis=1) @ np.array([5, 1])
    counts = np.bincount(keys, minlength=25)
    counts = counts[counts > 0]
    assert len(counts) == 10
    assert np.all(np.abs(counts - 6000) < 4 * np.sqrt(6000 * 0.9))


def test_shuffle_tags_is_a_permutation():
    tags = np.array([2.0] * 6 + [0.0] * 6)
    out = shuffle_tags(make_stream(5), tags)
    np.testing.assert_array_equal(np.sort(out), np.sort(tags))

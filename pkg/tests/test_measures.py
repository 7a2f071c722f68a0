import numpy as np
import pytest

from motbounds.errors import SchemaError
from motbounds.measures import (DiscreteMarginal, MarginalSystem, center, empirical_from_samples,
                                load_marginals, rescale_to_unit_ball)


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestDiscreteMarginal:
    def test_scalar_points_become_column(self):
        m = DiscreteMarginal([1.0, 2.0], [0.5, 0.5])
        assert m.points.shape == (2, 1) and m.dim == 1 and m.n == 2

    def test_arrays_are_read_only(self):
        m = DiscreteMarginal([1.0, 2.0], [0.5, 0.5])
        with pytest.raises(ValueError):
            m.weights[0] = 1.0

    @pytest.mark.parametrize("w", [[0.5, 0.4], [1.0, 0.0], [1.5, -0.5], [0.5, np.nan]])
    def test_rejects_bad_weights(self, w):
        with pytest.raises(ValueError):
            DiscreteMarginal([0.0, 1.0], w)

    def test_weight_sum_tolerance(self):
        DiscreteMarginal([0.0, 1.0], [0.5, 0.5 + 5e-13])
        with pytest.raises(ValueError):
            DiscreteMarginal([0.0, 1.0], [0.5, 0.5 + 1e-10])

    def test_mean_and_translate(self):
        m = DiscreteMarginal([[0.0, 1.0], [2.0, 3.0]], [0.25, 0.75])
        np.testing.assert_allclose(m.mean(), [1.5, 2.5])
        np.testing.assert_allclose(m.translate([1, -1]).mean(), [2.5, 1.5])


class TestEmpirical:
    def test_uniform_weights_keep_duplicates(self):
        m = empirical_from_samples([1.0, 1.0, 2.0])
        assert m.n == 3
        np.testing.assert_allclose(m.weights, [1 / 3] * 3)

    def test_vector_samples(self):
        m = empirical_from_samples([[0, 1], [2, 3]])
        assert m.dim == 2

    def test_empty_and_ragged(self):
        with pytest.raises(ValueError):
            empirical_from_samples([])
        with pytest.raises(ValueError):
            empirical_from_samples([[1, 2], [3]])


class TestSystem:
    def test_needs_two_margins_of_one_dimension(self):
        a = empirical_from_samples([0.0])
        with pytest.raises(ValueError):
            MarginalSystem((a,))
        with pytest.raises(ValueError):
            MarginalSystem((a, empirical_from_samples([[0.0, 1.0]])))

    def test_shape_labels_select(self):
        a, b = empirical_from_samples([0.0, 1.0]), empirical_from_samples([5.0])
        s = MarginalSystem((a, b), ("ctl", "trt"))
        assert s.shape == (2, 1) and s.K == 2
        assert s.select(["trt", "ctl"]).shape == (1, 2)
        with pytest.raises(SchemaError):
            s.index("nope")

    def test_center(self, rng):
        m = empirical_from_samples(rng.normal(1e6, 1.0, (50, 2)))
        c, mu = center(m)
        assert np.abs(c.mean()).max() < 1e-9
        np.testing.assert_allclose(mu, m.mean())

    def test_rescale(self, rng):
        s = MarginalSystem(tuple(empirical_from_samples(rng.normal(3, 5, (10, 2))) for _ in range(3)))
        t, scale, offset = rescale_to_unit_ball(s)
        assert max(np.linalg.norm(p, axis=1).max() for p in t.points) <= 1 + 1e-12
        np.testing.assert_allclose(t.points[0] * scale + offset, s.points[0])


class TestLoadMarginals:
    def test_basic(self, tmp_path):
        p = write(tmp_path, "unit,arm,y1,y2\n1,b,1,2\n2,a,3,4\n3,b,5,6\n")
        s = load_marginals(p)
        assert s.labels == ("a", "b") and s.dim == 2 and s.shape == (1, 2)

    def test_declared_order(self, tmp_path):
        p = write(tmp_path, "arm,y1\nb,1\na,3\n")
        assert load_marginals(p, ["b", "a"]).labels == ("b", "a")

    @pytest.mark.parametrize("text", [
        "y1\n1\n",                    # no arm column
        "arm,z\na,1\nb,2\n",          # no outcome columns
        "arm,y1,y3\na,1,2\nb,1,2\n",  # gap in outcome columns
        "arm,y1\na,x\nb,1\n",         # non-numeric
        "arm,y1\na,\nb,1\n",          # missing value
        "arm,y1\na,inf\nb,1\n",       # non-finite
        "arm,y1\na,1\na,2\n",         # a single arm
        "arm,y1\n,1\nb,2\n",          # empty label
        "",                           # empty file
    ])
    def test_schema_errors(self, tmp_path, text):
        with pytest.raises(SchemaError):
            load_marginals(write(tmp_path, text))

    def test_unknown_and_missing_declared_arms(self, tmp_path):
        p = write(tmp_path, "arm,y1\na,1\nb,2\nc,3\n")
        with pytest.raises(SchemaError):
            load_marginals(p, ["a", "b"])
        with pytest.raises(SchemaError):
            load_marginals(p, ["a", "b", "c", "d"])

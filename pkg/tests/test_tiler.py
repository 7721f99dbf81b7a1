import numpy as np
import pytest

from cimsim.tiler import (
    ArrayShape,
    col2im,
    column_index,
    im2col_patches,
    im2col_reference,
    map_weights,
    plan_tiling,
)


def nested_loop_conv(x, w, stride=1, pad=0):
    """Independent oracle: direct convolution, dtype-preserving."""
    b, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((b, co, ho, wo), dtype=x.dtype)
    for bi in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[bi, o, i, j] = (patch * w[o]).sum()
    return out


class TestPlanTiling:
    def test_sixteen_channel_layer(self):
        plan = plan_tiling(16, 16, 3, ArrayShape(16, 16))
        assert plan.channels_per_array == 1  # floor(16 / 9)
        assert plan.n_array_rows == 16
        assert plan.n_array_cols == 1
        assert plan.n_array == 16

    def test_single_tile_case(self):
        plan = plan_tiling(1, 1, 1, ArrayShape(16, 16))
        assert plan.n_array == 1
        assert plan.channels_per_array == 1  # capped at c_in
        assert plan.oc_per_array == 1

    def test_kernel_too_large(self):
        with pytest.raises(ValueError, match="kernel does not fit array rows"):
            plan_tiling(4, 4, 5, ArrayShape(16, 16))

    def test_ranges_partition_channels(self):
        plan = plan_tiling(13, 10, 3, ArrayShape(32, 4))
        ins = [plan.input_range(rt) for rt in range(plan.n_array_rows)]
        assert ins[0][0] == 0 and ins[-1][1] == 13
        for (a0, a1), (b0, b1) in zip(ins, ins[1:]):
            assert a1 == b0
        outs = [plan.output_range(ct) for ct in range(plan.n_array_cols)]
        assert outs[0][0] == 0 and outs[-1][1] == 10

    def test_kernel_rows_stay_within_array(self):
        # kernel integrity: a tile's stretched rows never exceed the word lines
        for rows in (9, 16, 20, 64):
            plan = plan_tiling(7, 5, 3, ArrayShape(rows, 8))
            assert plan.channels_per_array * 9 <= rows


class TestMapWeights:
    def test_single_array_block_is_weight(self):
        plan = plan_tiling(2, 3, 3, ArrayShape(32, 8))
        w = np.arange(2 * 3 * 9, dtype=np.float64).reshape(3, 2, 3, 3)
        blocks = map_weights(w, plan)
        assert blocks.shape[0] == 1
        assert np.array_equal(blocks[0, :3, :2], w)

    def test_reconstruction(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            c_in = int(rng.integers(1, 20))
            c_out = int(rng.integers(1, 20))
            k = int(rng.choice([1, 3]))
            shape = ArrayShape(int(rng.integers(k * k, 40)), int(rng.integers(1, 12)))
            plan = plan_tiling(c_in, c_out, k, shape)
            w = rng.normal(size=(c_out, c_in, k, k))
            blocks = map_weights(w, plan)
            rebuilt = np.zeros_like(w)
            for a in range(plan.n_array):
                rt, ct = plan.tile_of(a)
                ic0, ic1 = plan.input_range(rt)
                oc0, oc1 = plan.output_range(ct)
                rebuilt[oc0:oc1, ic0:ic1] = blocks[a, : oc1 - oc0, : ic1 - ic0]
            assert np.array_equal(rebuilt, w)

    def test_padding_is_zero(self):
        plan = plan_tiling(3, 3, 3, ArrayShape(19, 2))  # 2 channels/array, ragged
        w = np.ones((3, 3, 3, 3))
        blocks = map_weights(w, plan)
        for a in range(plan.n_array):
            rt, ct = plan.tile_of(a)
            ic0, ic1 = plan.input_range(rt)
            oc0, oc1 = plan.output_range(ct)
            assert np.all(blocks[a, oc1 - oc0 :] == 0)
            assert np.all(blocks[a, :, ic1 - ic0 :] == 0)

    def test_shape_mismatch_rejected(self):
        plan = plan_tiling(2, 2, 3, ArrayShape(32, 8))
        with pytest.raises(ValueError):
            map_weights(np.zeros((2, 2, 5, 5)), plan)


class TestColumnIndex:
    def test_first_column_is_zero(self):
        plan = plan_tiling(4, 4, 1, ArrayShape(8, 8))
        assert column_index(plan, 0, 0, 0, n_split=2) == 0

    def test_bijective_and_complete(self):
        plan = plan_tiling(9, 7, 3, ArrayShape(20, 3))
        n_split = 2
        ids = set()
        for a in range(plan.n_array):
            for o in range(plan.mapped_oc(a)):
                for k in range(n_split):
                    ids.add(column_index(plan, a, o, k, n_split))
        assert ids == set(range(plan.total_columns(n_split)))

    def test_uniform_plan_count(self):
        plan = plan_tiling(16, 16, 3, ArrayShape(16, 16))
        assert plan.total_columns(2) == 2 * plan.n_array * plan.oc_per_array

    def test_out_of_range_channel(self):
        plan = plan_tiling(4, 4, 1, ArrayShape(8, 8))
        with pytest.raises(IndexError):
            column_index(plan, 0, 4, 0, n_split=1)


class TestIm2colReference:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 5))
        w = np.ones((1, 1, 1, 1))
        assert np.allclose(im2col_reference(w, x), x)

    def test_zero_weights(self):
        x = np.ones((1, 3, 4, 4))
        w = np.zeros((2, 3, 3, 3))
        assert np.all(im2col_reference(w, x) == 0)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_matches_nested_loops_integer(self, stride, pad):
        rng = np.random.default_rng(5)
        for _ in range(5):
            c_in = int(rng.integers(1, 5))
            c_out = int(rng.integers(1, 5))
            k = int(rng.choice([1, 3]))
            h = int(rng.integers(k, 8))
            x = rng.integers(-9, 10, size=(2, c_in, h, h))
            w = rng.integers(-9, 10, size=(c_out, c_in, k, k))
            got = im2col_reference(w, x, stride, pad)
            want = nested_loop_conv(x, w, stride, pad)
            assert got.dtype.kind == "i"
            assert np.array_equal(got, want)


class TestPatchRoundtrip:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_col2im_is_adjoint(self, stride, pad):
        # <im2col(x), y> == <x, col2im(y)> pins the scatter indexing
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3, 6, 6))
        cols = im2col_patches(x, 3, stride, pad)
        y = rng.normal(size=cols.shape)
        lhs = float(np.sum(cols * y))
        rhs = float(np.sum(x * col2im(y, x.shape, 3, stride, pad)))
        assert lhs == pytest.approx(rhs, rel=1e-12)

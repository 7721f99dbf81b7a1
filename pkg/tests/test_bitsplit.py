import numpy as np
import pytest

from cimsim.bitsplit import recombine, shift_add, split


class TestSplit:
    def test_zero_gives_zero_planes(self):
        sp = split(np.zeros(4, dtype=np.int64), bits=4, cell_bits=2)
        assert all(np.all(p == 0) for p in sp.planes)

    def test_minus_three_two_bit_cells(self):
        # -3 is 1101 in two's complement: low digit 01=1, signed top 11=-1
        sp = split(np.array([-3]), bits=4, cell_bits=2)
        assert sp.planes[0][0] == 1
        assert sp.planes[1][0] == -1
        assert 1 + (-1) * 4 == -3

    def test_seven_two_bit_cells(self):
        sp = split(np.array([7]), bits=4, cell_bits=2)
        assert sp.planes[0][0] == 3
        assert sp.planes[1][0] == 1

    def test_single_split_is_identity(self):
        codes = np.arange(-8, 8)
        sp = split(codes, bits=4, cell_bits=4)
        assert sp.n_split == 1
        assert np.array_equal(sp.planes[0], codes)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError, match="does not divide"):
            split(np.array([0]), bits=4, cell_bits=3)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="out of signed"):
            split(np.array([8]), bits=4, cell_bits=2)

    def test_float_codes_rejected(self):
        with pytest.raises(TypeError):
            split(np.array([1.0]), bits=4, cell_bits=2)

    @pytest.mark.parametrize("bits,cell_bits", [(2, 1), (2, 2), (4, 1), (4, 2), (4, 4), (8, 1), (8, 2), (8, 4)])
    def test_plane_ranges(self, bits, cell_bits):
        codes = np.arange(-(2 ** (bits - 1)), 2 ** (bits - 1))
        sp = split(codes, bits, cell_bits)
        for p in sp.planes[:-1]:
            assert p.min() >= 0 and p.max() <= 2**cell_bits - 1
        top = sp.planes[-1]
        assert top.min() >= -(2 ** (cell_bits - 1))
        assert top.max() <= 2 ** (cell_bits - 1) - 1


class TestRecombine:
    @pytest.mark.parametrize("bits", [2, 4, 8])
    @pytest.mark.parametrize("cell_bits", [1, 2, 4])
    def test_exhaustive_roundtrip(self, bits, cell_bits):
        if bits % cell_bits:
            pytest.skip("cell width must divide code width")
        codes = np.arange(-(2 ** (bits - 1)), 2 ** (bits - 1))
        assert np.array_equal(recombine(split(codes, bits, cell_bits)), codes)

    def test_all_zero_planes(self):
        sp = split(np.zeros(3, dtype=np.int64), bits=8, cell_bits=2)
        assert np.all(recombine(sp) == 0)


class TestShiftAdd:
    def test_single_split_identity(self):
        x = np.array([1.5, -2.0])
        assert np.array_equal(shift_add([x], cell_bits=2), x)

    def test_hand_value(self):
        # 1 + 2 * 2^2 = 9
        out = shift_add([np.array([1.0]), np.array([2.0])], cell_bits=2)
        assert out[0] == 9.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            shift_add([], cell_bits=2)

    @pytest.mark.parametrize("bits,cell_bits", [(4, 2), (8, 2), (8, 4), (4, 1)])
    def test_per_plane_mac_recombines_exactly(self, bits, cell_bits):
        # shift-and-add of per-plane dot products equals the full integer MAC
        rng = np.random.default_rng(11)
        for _ in range(20):
            w = rng.integers(-(2 ** (bits - 1)), 2 ** (bits - 1), size=64)
            a = rng.integers(0, 16, size=64)
            sp = split(w, bits, cell_bits)
            per_plane = [np.array([np.dot(p, a)]) for p in sp.planes]
            assert shift_add(per_plane, cell_bits)[0] == np.dot(w, a)

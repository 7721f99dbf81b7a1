import pytest

from cimsim.cost_model import dequant_mults, report, scale_storage
from cimsim.quantizer import Granularity
from cimsim.tiler import ArrayShape, plan_tiling

L, A, C = Granularity.LAYER, Granularity.ARRAY, Granularity.COLUMN


@pytest.fixture
def plan16():
    # 16 input channels, K=3 on 16x16 arrays: 16 arrays of 16 output channels
    return plan_tiling(16, 16, 3, ArrayShape(16, 16))


class TestDequantMults:
    def test_layer_layer_is_one(self, plan16):
        assert dequant_mults(L, L, plan16, n_split=2) == 1

    def test_array_psums(self, plan16):
        assert dequant_mults(L, A, plan16, n_split=2) == 256  # 16 arrays x 16 oc

    def test_column_psums(self, plan16):
        assert dequant_mults(L, C, plan16, n_split=2) == 512  # 2 x 16 x 16

    @pytest.mark.parametrize("p_gran,expected", [(L, 1), (A, 256), (C, 512)])
    def test_weight_granularity_never_changes_count(self, plan16, p_gran, expected):
        for w_gran in (L, A, C):
            assert dequant_mults(w_gran, p_gran, plan16, n_split=2) == expected

    def test_ragged_plan_counts_mapped_channels(self):
        plan = plan_tiling(5, 7, 3, ArrayShape(20, 3))  # ragged on both axes
        mapped = sum(plan.mapped_oc(a) for a in range(plan.n_array))
        assert dequant_mults(L, A, plan, 2) == mapped
        assert dequant_mults(C, C, plan, 2) == 2 * mapped


class TestScaleStorage:
    def test_layer_layer(self, plan16):
        assert scale_storage(L, L, plan16, 2) == (1, 1, 1)

    def test_column_column(self, plan16):
        stored_w, stored_p, stored_fused = scale_storage(C, C, plan16, 2)
        assert stored_w == 512 and stored_p == 512 and stored_fused == 512

    def test_layer_weight_column_psum(self, plan16):
        stored_w, stored_p, stored_fused = scale_storage(L, C, plan16, 2)
        assert stored_w == 1 and stored_fused == 512

    def test_array_granularity_counts_arrays(self, plan16):
        stored_w, stored_p, _ = scale_storage(A, A, plan16, 2)
        assert stored_w == 16 and stored_p == 16


class TestReport:
    def test_totals_are_sums(self, plan16):
        rows = [
            ("conv0", C, C, plan16, 2),
            ("conv1", L, C, plan16, 2),
            ("conv2", L, L, plan16, 2),
        ]
        rep = report(rows)
        assert rep.total_dequant_mults == 512 + 512 + 1
        assert len(rep.csv_rows()) == 3

    def test_empty_model_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            report([])

    def test_hand_computed_three_layer_model(self):
        p1 = plan_tiling(1, 8, 3, ArrayShape(16, 16))   # 1 array, 8 oc
        p2 = plan_tiling(8, 8, 3, ArrayShape(16, 16))   # 8 arrays, 8 oc
        p3 = plan_tiling(8, 4, 1, ArrayShape(16, 16))   # 1 array, 4 oc
        rep = report([("a", C, C, p1, 2), ("b", C, A, p2, 2), ("c", C, L, p3, 2)])
        # by hand: 2*1*8 + 8*8 + 1
        assert rep.total_dequant_mults == 16 + 64 + 1

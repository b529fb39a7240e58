import numpy as np
import pytest

from underdx.data import Cohort, IndividualRecord, read_cohort, write_cohort
from underdx.errors import DataError


def make_record(rec_id, results, horizon=5):
    results = np.asarray(results)
    t_n = results.shape[0]
    diagnosed = results[-1] in (1, 2)
    return IndividualRecord(rec_id, np.array([0.1, -0.2]), np.array([1.0]),
                            results, t_n, diagnosed)


class TestCohort:
    def test_from_records_sorts_and_derives_diagnosis(self):
        recs = [make_record(3, [3, 3, 1]), make_record(1, [3, 3, 3, 3, 3]),
                make_record(2, [0, 3, 2])]
        cohort = Cohort.from_records(recs, horizon=5)
        np.testing.assert_array_equal(cohort.ids, [1, 2, 3])
        np.testing.assert_array_equal(cohort.diagnosed, [False, True, True])
        np.testing.assert_array_equal(cohort.t_n, [5, 3, 3])

    def test_record_round_trip(self):
        rec = make_record(7, [0, 3, 1])
        cohort = Cohort.from_records([rec], horizon=5)
        back = cohort.record(0)
        assert back.id == 7 and back.t_n == 3 and back.diagnosed
        np.testing.assert_array_equal(back.results, [0, 3, 1])

    def test_positive_before_censoring_rejected(self):
        bad = IndividualRecord(1, np.zeros(2), np.zeros(1), np.array([1, 3, 3]), 3, False)
        with pytest.raises(DataError, match="positive result before censoring"):
            Cohort.from_records([bad], horizon=3)

    def test_undiagnosed_must_reach_horizon(self):
        bad = IndividualRecord(1, np.zeros(2), np.zeros(1), np.array([3, 3]), 2, False)
        with pytest.raises(DataError, match="before the horizon"):
            Cohort.from_records([bad], horizon=5)

    def test_duplicate_ids_rejected(self):
        recs = [make_record(1, [3, 3, 3, 3, 3]), make_record(1, [0, 3, 3, 3, 3])]
        with pytest.raises(DataError, match="duplicate ids"):
            Cohort.from_records(recs, horizon=5)

    def test_subset_relabels_for_resampling(self):
        recs = [make_record(i, [3, 3, 3, 3, 3]) for i in range(4)]
        cohort = Cohort.from_records(recs, horizon=5)
        idx = np.array([2, 2, 0, 3])
        with pytest.raises(DataError, match="duplicate"):
            cohort.subset(idx)
        sample = cohort.subset(idx, new_ids=np.arange(4))
        assert sample.n == 4
        np.testing.assert_array_equal(sample.ids, np.arange(4))


class TestCsvRoundTrip:
    def test_write_read_identity(self, tmp_path):
        recs = [make_record(3, [3, 3, 1]), make_record(1, [3, 3, 3, 3, 3]),
                make_record(2, [0, 3, 2])]
        cohort = Cohort.from_records(recs, horizon=5)
        write_cohort(cohort, tmp_path / "b.csv", tmp_path / "p.csv")
        back = read_cohort(tmp_path / "b.csv", tmp_path / "p.csv", horizon=5)
        np.testing.assert_array_equal(back.ids, cohort.ids)
        np.testing.assert_array_equal(back.results, cohort.results)
        np.testing.assert_array_equal(back.t_n, cohort.t_n)
        np.testing.assert_allclose(back.x, cohort.x)
        assert back.x_names == cohort.x_names
        assert back.a_names == cohort.a_names

    def test_missing_panel_rows_mean_no_test(self, tmp_path):
        (tmp_path / "b.csv").write_text("id,x_1,a_1\n1,0.5,1\n")
        (tmp_path / "p.csv").write_text("id,t,r\n1,3,0\n")
        cohort = read_cohort(tmp_path / "b.csv", tmp_path / "p.csv", horizon=4)
        np.testing.assert_array_equal(cohort.results[0], [3, 3, 0, 3])
        assert cohort.t_n[0] == 4 and not cohort.diagnosed[0]

    def test_unknown_baseline_column_rejected(self, tmp_path):
        (tmp_path / "b.csv").write_text("id,x_1,weight\n1,0.5,70\n")
        (tmp_path / "p.csv").write_text("id,t,r\n1,1,3\n")
        with pytest.raises(DataError, match="unrecognised columns"):
            read_cohort(tmp_path / "b.csv", tmp_path / "p.csv")

    def test_duplicate_panel_row_rejected(self, tmp_path):
        (tmp_path / "b.csv").write_text("id,x_1,a_1\n1,0.5,1\n")
        (tmp_path / "p.csv").write_text("id,t,r\n1,1,3\n1,1,0\n")
        with pytest.raises(DataError, match="duplicate"):
            read_cohort(tmp_path / "b.csv", tmp_path / "p.csv")

    def test_panel_id_missing_from_baseline_rejected(self, tmp_path):
        (tmp_path / "b.csv").write_text("id,x_1,a_1\n1,0.5,1\n")
        (tmp_path / "p.csv").write_text("id,t,r\n2,1,3\n")
        with pytest.raises(DataError, match="not present in baseline"):
            read_cohort(tmp_path / "b.csv", tmp_path / "p.csv")

    def test_results_after_positive_rejected(self, tmp_path):
        (tmp_path / "b.csv").write_text("id,x_1,a_1\n1,0.5,1\n")
        (tmp_path / "p.csv").write_text("id,t,r\n1,1,1\n1,2,0\n")
        with pytest.raises(DataError, match="after a positive"):
            read_cohort(tmp_path / "b.csv", tmp_path / "p.csv", horizon=3)

    def test_censoring_inferred_from_panel(self, tmp_path):
        (tmp_path / "b.csv").write_text("id,x_1,a_1\n5,0.5,0\n9,1.0,1\n")
        (tmp_path / "p.csv").write_text("id,t,r\n5,2,2\n9,4,0\n")
        cohort = read_cohort(tmp_path / "b.csv", tmp_path / "p.csv", horizon=4)
        np.testing.assert_array_equal(cohort.t_n, [2, 4])
        np.testing.assert_array_equal(cohort.diagnosed, [True, False])

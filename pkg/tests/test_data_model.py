import numpy as np
import pytest

from idmselect.data_model import (
    ColumnSchema,
    CovariateMatrix,
    Dataset,
    LikelihoodCase,
    ObservationRecord,
    classify_case,
    load_dataset,
    save_dataset,
    standardize_covariates,
)
from idmselect.errors import DataError


def write_csv(path, text):
    path.write_text(text.strip() + "\n")
    return path


class TestClassifyCase:
    def test_ill_censored(self):
        rec = ObservationRecord("s1", 0.0, 4.0, 6.0, 1, 9.0, 0)
        assert classify_case(rec) is LikelihoodCase.ILL_CENSORED

    def test_ill_died(self):
        rec = ObservationRecord("s", 0.0, 4.0, 6.0, 1, 9.0, 1)
        assert classify_case(rec) is LikelihoodCase.ILL_DIED

    def test_healthy_censored(self):
        rec = ObservationRecord("s", 0.0, 7.0, None, 0, 7.0, 0)
        assert classify_case(rec) is LikelihoodCase.HEALTHY_CENSORED

    def test_healthy_died(self):
        rec = ObservationRecord("s2", 0.0, 7.0, None, 0, 7.5, 1)
        assert classify_case(rec) is LikelihoodCase.HEALTHY_DIED

    def test_bijection_over_indicator_pairs(self):
        seen = set()
        for di, dd in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            rec = ObservationRecord("s", 0.0, 4.0, 6.0 if di else None, di, 9.0, dd)
            seen.add(classify_case(rec))
        assert seen == set(LikelihoodCase)


class TestRecordValidation:
    def test_r_before_l_rejected(self):
        rec = ObservationRecord("s3", 0.0, 4.0, 3.0, 1, 9.0, 0)
        with pytest.raises(DataError, match="s3"):
            rec.validate()

    def test_v0_after_l_rejected(self):
        with pytest.raises(DataError, match="v0"):
            ObservationRecord("s", 5.0, 4.0, None, 0, 9.0, 0).validate()

    def test_missing_r_when_diagnosed(self):
        with pytest.raises(DataError, match="r is missing"):
            ObservationRecord("s", 0.0, 4.0, None, 1, 9.0, 0).validate()

    def test_r_at_t_admissible(self):
        # diagnosis at the death/censoring time is accepted (r <= t)
        ObservationRecord("s", 0.0, 4.0, 9.0, 1, 9.0, 1).validate()

    def test_negative_time_rejected(self):
        with pytest.raises(DataError, match="negative"):
            ObservationRecord("s", 0.0, -1.0, None, 0, 9.0, 0).validate()


class TestLoadDataset:
    def test_basic_load_and_cases(self, tmp_path):
        p = write_csv(
            tmp_path / "d.csv",
            """
id,v0,l,r,delta_i,t,delta_d,z1,z2
s1,0,4,6,1,9,0,0.5,-1.0
s2,0,7,,0,7.5,1,1.5,2.0
""",
        )
        data = load_dataset(p, standardize=False)
        assert data.n == 2 and data.p == 2
        assert data.records[0].case is LikelihoodCase.ILL_CENSORED
        assert data.records[1].case is LikelihoodCase.HEALTHY_DIED
        assert data.covariates.column_names == ("z1", "z2")

    def test_invalid_row_names_subject(self, tmp_path):
        p = write_csv(
            tmp_path / "d.csv",
            """
id,v0,l,r,delta_i,t,delta_d,z1
s3,0,4,3,1,9,0,0.0
""",
        )
        with pytest.raises(DataError, match="s3"):
            load_dataset(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="no such file"):
            load_dataset(tmp_path / "nope.csv")

    def test_unparsable_cell(self, tmp_path):
        p = write_csv(
            tmp_path / "d.csv",
            """
id,v0,l,r,delta_i,t,delta_d,z1
s1,0,4,abc,1,9,0,0.0
""",
        )
        with pytest.raises(DataError, match="unparsable"):
            load_dataset(p)

    def test_missing_column(self, tmp_path):
        p = write_csv(tmp_path / "d.csv", "id,v0,l,r,delta_i,t\ns,0,1,,0,2")
        with pytest.raises(DataError, match="delta_d"):
            load_dataset(p)

    def test_schema_renames(self, tmp_path):
        p = write_csv(
            tmp_path / "d.csv",
            """
subject,entry,last,diag,di,stop,dd,age
a,0,3,,0,5,0,61
b,0,2,4,1,6,1,72
""",
        )
        schema = ColumnSchema(
            id="subject", v0="entry", l="last", r="diag",
            delta_i="di", t="stop", delta_d="dd",
        )
        data = load_dataset(p, schema=schema, standardize=False)
        assert data.covariates.column_names == ("age",)
        assert data.records[1].r == 4.0

    def test_standardization_constants_retained(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = "\n".join(
            f"s{i},0,{5 + i % 3},,0,{9 + i % 4},0,{rng.normal(3.0, 2.0)},{rng.normal(-1, 0.5)}"
            for i in range(40)
        )
        p = write_csv(tmp_path / "d.csv", "id,v0,l,r,delta_i,t,delta_d,z1,z2\n" + rows)
        data = load_dataset(p, standardize=True)
        cov = data.covariates
        assert cov.standardized
        assert np.abs(cov.values.mean(axis=0)).max() < 1e-8
        assert np.abs(cov.values.std(axis=0, ddof=1) - 1).max() < 1e-8
        assert cov.center is not None and cov.scale is not None
        raw = load_dataset(p, standardize=False)
        np.testing.assert_allclose(
            (raw.covariates.values - cov.center) / cov.scale, cov.values
        )


class TestRoundTrip:
    def test_csv_round_trip_identical(self, tmp_path):
        rng = np.random.default_rng(42)
        records = []
        zs = []
        for i in range(25):
            l = float(rng.uniform(1, 8))
            ill = int(rng.random() < 0.5)
            r = float(l + rng.uniform(0.5, 3)) if ill else None
            t = float((r if ill else l) + rng.uniform(0, 5))
            records.append(
                ObservationRecord(f"s{i}", 0.0, l, r, ill, t, int(rng.random() < 0.5))
            )
            zs.append(rng.normal(size=3))
        data = Dataset(tuple(records), CovariateMatrix(np.array(zs), ("z1", "z2", "z3")))
        path = tmp_path / "round.csv"
        save_dataset(data, path)
        back = load_dataset(path, standardize=False)
        assert back.records == data.records
        np.testing.assert_allclose(back.covariates.values, data.covariates.values,
                                   rtol=0, atol=1e-12)


def test_standardize_rejects_constant_column():
    cov = CovariateMatrix(np.ones((5, 1)), ("z1",))
    with pytest.raises(DataError, match="constant"):
        standardize_covariates(cov)

from decimal import Decimal
from fractions import Fraction

import pytest

from conftest import make_record
from gadetect.dataset import AreaCategory, Centrality
from gadetect.error_analysis import (
    REVIEW_COLUMNS,
    ErrorRow,
    ErrorTable,
    fn_by_area,
    fn_by_centrality,
    monotonicity_check,
    sample_false_negatives,
    write_review_template,
)
from gadetect.errors import DataError, InputError

# whole-test-set totals and false negatives per area category, smallest first
TABLE3 = [
    (AreaCategory.QUESTIONABLE, 275, 173, "62.9"),
    (AreaCategory.LT_I2, 38, 30, "78.9"),
    (AreaCategory.I2_TO_O2, 125, 76, "60.8"),
    (AreaCategory.O2_TO_HALF_DA, 192, 90, "46.9"),
    (AreaCategory.HALF_TO_1_DA, 297, 79, "26.6"),
    (AreaCategory.ONE_TO_2_DA, 403, 95, "23.6"),
    (AreaCategory.GE_2_DA, 1255, 248, "19.8"),
]
# central GA by center-point certainty
TABLE4 = [
    (Centrality.DEFINITE_CENTER_POINT, 1297, 279, "21.5"),
    (Centrality.QUESTIONABLE_CP_DEFINITE_SUBFIELD, 158, 50, "31.6"),
]


def table3_fixture():
    records, preds = [], []
    for cat, total, fn, _ in TABLE3:
        for i in range(total):
            records.append(make_record(pid=f"{cat.name}{i}", ga=True, area=cat))
            preds.append(i >= fn)
    for i in range(500):
        records.append(make_record(pid=f"N{i}"))
        preds.append(i % 7 == 0)
    return preds, records


def table4_fixture():
    records, preds = [], []
    for cen, total, fn, _ in TABLE4:
        for i in range(total):
            records.append(make_record(pid=f"{cen.name}{i}", ga=True, centrality=cen))
            preds.append(i >= fn)
    for i in range(300):
        records.append(make_record(pid=f"NC{i}", ga=True))
        preds.append(False)
    return preds, records


def test_area_table_reproduces_rates():
    table = fn_by_area(*table3_fixture())
    assert [r.category for r in table.rows] == [c.name for c, *_ in TABLE3]
    for row, (_, total, fn, rate) in zip(table.rows, TABLE3):
        assert (row.n_total, row.n_false_negative) == (total, fn)
        assert row.rate_percent == Decimal(rate)


def test_centrality_table_reproduces_rates():
    table = fn_by_centrality(*table4_fixture())
    assert [str(r.rate_percent) for r in table.rows] == ["21.5", "31.6"]
    assert [r.n_total for r in table.rows] == [1297, 158]


def test_half_up_rounding():
    # 90/192 = 46.875 exactly; binary float formatting would give 46.9 only by luck
    assert ErrorRow("x", 192, 90).rate_percent == Decimal("46.9")
    assert ErrorRow("x", 8, 1).rate_percent == Decimal("12.5")
    assert ErrorRow("x", 16, 1).rate_percent == Decimal("6.3")
    assert ErrorRow("x", 0, 0).rate_percent is None


def test_csv_roundtrip(tmp_path):
    table = fn_by_area(*table3_fixture())
    path = table.write_csv(tmp_path / "t.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "category,whole_test_set,false_negatives,rate_percent"
    assert lines[2] == "LT_I2,38,30,78.9"
    back = ErrorTable.read_csv(path, "area")
    assert back.rows == table.rows


def test_positive_without_area_is_error():
    rec = make_record(ga=True)
    bad = rec.__class__(rec.participant_id, rec.eye, rec.visit, rec.stereo_side, rec.image_path,
                        rec.grade.__class__.__new__(rec.grade.__class__))
    object.__setattr__(bad.grade, "ga_present", True)
    object.__setattr__(bad.grade, "centrality", Centrality.NON_CENTRAL)
    object.__setattr__(bad.grade, "area_category", None)
    with pytest.raises(DataError):
        fn_by_area([False], [bad])


def test_monotonicity_on_table3():
    # the published rates fall steadily from LT_I2 to GE_2_DA
    res = monotonicity_check(fn_by_area(*table3_fixture()))
    assert res.ok


def test_monotonicity_sequences():
    assert monotonicity_check([0.8, 0.6, 0.6, 0.2])
    r = monotonicity_check([0.8, 0.6, 0.7])
    assert not r and r.violation_index == 2
    assert monotonicity_check([Fraction(1, 3), Fraction(1, 3)])


def test_monotonicity_skips_questionable_and_empty():
    rows = [ErrorRow("QUESTIONABLE", 10, 0), ErrorRow("LT_I2", 4, 3), ErrorRow("I2_TO_O2", 0, 0),
            ErrorRow("O2_TO_HALF_DA", 5, 2)]
    assert monotonicity_check(ErrorTable("area", rows))
    with pytest.raises(InputError):
        monotonicity_check(ErrorTable("centrality", rows))


def test_sample_false_negatives():
    preds = [False] * 30 + [True] * 10
    gold = [True] * 40
    a = sample_false_negatives(preds, gold, 20, seed=3)
    assert a == sample_false_negatives(preds, gold, 20, seed=3)
    assert len(a) == 20 and len(set(a)) == 20 and all(i < 30 for i in a)
    assert sample_false_negatives(preds[:35], gold[:35], 50, 0) == list(range(30))
    with pytest.raises(InputError):
        sample_false_negatives(preds, gold, 0, 0)


def test_review_template(tmp_path):
    rec = make_record(ga=True)
    text = write_review_template(tmp_path / "r.csv", [rec], saliency_dir="sal").read_text()
    header, row = text.splitlines()
    assert header.split(",")[3:] == list(REVIEW_COLUMNS)
    assert row.startswith("P1:LEFT:baseline:LEFT_OF_PAIR,img.png,sal/P1_LEFT_baseline_LEFT_OF_PAIR.png")

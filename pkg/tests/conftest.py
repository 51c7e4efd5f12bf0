from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from gadetect.dataset import (
    AreaCategory,
    Centrality,
    Eye,
    GradeRecord,
    ImageRecord,
    StereoSide,
)

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def make_record(
    pid="P1",
    eye=Eye.LEFT,
    visit="baseline",
    side=StereoSide.LEFT_OF_PAIR,
    ga=False,
    centrality=None,
    area=None,
    nv=False,
    specialist_ga=None,
    specialist_cga=None,
    path="img.png",
) -> ImageRecord:
    if centrality is None:
        centrality = Centrality.NON_CENTRAL if ga else Centrality.NO_GA
    if ga and area is None:
        area = AreaCategory.GE_2_DA
    grade = GradeRecord(ga, centrality, area, nv, specialist_ga, specialist_cga)
    return ImageRecord(pid, eye, visit, side, Path(path), grade)


def random_records(rng: np.random.Generator, n_participants: int, max_images: int = 10) -> list:
    """Valid random records covering every grade combination."""
    records = []
    cats = list(AreaCategory)
    for p in range(n_participants):
        n_img = int(rng.integers(1, max_images + 1))
        for j in range(n_img):
            ga = bool(rng.random() < 0.4)
            if ga:
                centrality = [
                    Centrality.NON_CENTRAL,
                    Centrality.DEFINITE_CENTER_POINT,
                    Centrality.QUESTIONABLE_CP_DEFINITE_SUBFIELD,
                ][int(rng.integers(3))]
                area = cats[int(rng.integers(len(cats)))]
            else:
                centrality, area = Centrality.NO_GA, None
            records.append(
                make_record(
                    pid=f"P{p:04d}",
                    eye=Eye.LEFT if j % 2 == 0 else Eye.RIGHT,
                    visit=f"v{j // 2:02d}",
                    ga=ga,
                    centrality=centrality,
                    area=area,
                    nv=bool(rng.random() < 0.05),
                )
            )
    return records


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

"""Manifest ingestion, image selection rules and task label derivation."""

from __future__ import annotations

import csv
import enum
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .errors import (
    ConfigError,
    DataError,
    DuplicateRecordError,
    ManifestParseError,
    ManifestSchemaError,
)

MANIFEST_COLUMNS = (
    "participant_id",
    "eye",
    "visit",
    "stereo_side",
    "image_path",
    "ga_present",
    "centrality",
    "area_category",
    "nv_amd",
    "specialist_ga",
    "specialist_cga",
)


class Eye(enum.Enum):
    LEFT = "LEFT"
    RIGHT = "RIGHT"


class StereoSide(enum.Enum):
    LEFT_OF_PAIR = "LEFT_OF_PAIR"
    RIGHT_OF_PAIR = "RIGHT_OF_PAIR"


class AreaCategory(enum.IntEnum):
    """GA area within the grid, smallest first."""

    QUESTIONABLE = 0
    LT_I2 = 1
    I2_TO_O2 = 2
    O2_TO_HALF_DA = 3
    HALF_TO_1_DA = 4
    ONE_TO_2_DA = 5
    GE_2_DA = 6


class Centrality(enum.Enum):
    NO_GA = "NO_GA"
    NON_CENTRAL = "NON_CENTRAL"
    DEFINITE_CENTER_POINT = "DEFINITE_CENTER_POINT"
    QUESTIONABLE_CP_DEFINITE_SUBFIELD = "QUESTIONABLE_CP_DEFINITE_SUBFIELD"

    @property
    def is_central(self) -> bool:
        return self in CENTRAL_CATEGORIES


CENTRAL_CATEGORIES = frozenset(
    {Centrality.DEFINITE_CENTER_POINT, Centrality.QUESTIONABLE_CP_DEFINITE_SUBFIELD}
)


class Task(enum.Enum):
    GA = "ga"
    CGA = "cga"
    CENTRALITY = "centrality"

    @classmethod
    def parse(cls, value: "str | Task") -> "Task":
        if isinstance(value, Task):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ConfigError(f"unknown task {value!r}; expected one of ga, cga, centrality") from None


@dataclass(frozen=True)
class GradeRecord:
    ga_present: bool
    centrality: Centrality
    area_category: Optional[AreaCategory]
    nv_amd: bool = False
    specialist_ga: Optional[bool] = None
    specialist_cga: Optional[bool] = None

    def __post_init__(self):
        if self.centrality.is_central and not self.ga_present:
            raise DataError(f"centrality {self.centrality.name} requires ga_present")
        if self.ga_present and self.area_category is None:
            raise DataError("ga_present requires an area_category")
        if self.ga_present and self.centrality is Centrality.NO_GA:
            raise DataError("ga_present with centrality NO_GA")

    @property
    def cga(self) -> bool:
        return self.centrality.is_central


@dataclass(frozen=True)
class ImageRecord:
    participant_id: str
    eye: Eye
    visit: str
    stereo_side: StereoSide
    image_path: Path
    grade: GradeRecord

    @property
    def key(self) -> tuple:
        return (self.participant_id, self.eye, self.visit, self.stereo_side)

    @property
    def image_key(self) -> str:
        """Stable string id used to join prediction files against a manifest."""
        return ":".join((self.participant_id, self.eye.value, self.visit, self.stereo_side.value))


@dataclass
class LabeledSet:
    task: Task
    items: list = field(default_factory=list)  # (ImageRecord, bool) pairs

    @property
    def records(self) -> list:
        return [r for r, _ in self.items]

    @property
    def labels(self) -> list:
        return [y for _, y in self.items]

    def __len__(self):
        return len(self.items)


@dataclass
class DatasetSummary:
    n_images: int
    n_participants: int
    ga_percent: float
    cga_percent: float
    n_ga: int = 0
    n_cga: int = 0
    per_fold: Optional[dict] = None


# ---------------------------------------------------------------------------
# manifest parsing


def _parse_bool(value: str, column: str, row: int, optional: bool = False) -> Optional[bool]:
    value = value.strip()
    if value == "" and optional:
        return None
    if value == "1":
        return True
    if value == "0":
        return False
    raise ManifestParseError(f"row {row}: column {column!r} expects 0/1, got {value!r}")


def _parse_enum(enum_cls, value: str, column: str, row: int):
    try:
        return enum_cls[value.strip()]
    except KeyError:
        allowed = ", ".join(m.name for m in enum_cls)
        raise ManifestParseError(
            f"row {row}: invalid {column} {value!r} (allowed: {allowed})"
        ) from None


def parse_manifest(path) -> list[ImageRecord]:
    """Read a manifest file into records, in file order.

    Relative ``image_path`` values are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    records: list[ImageRecord] = []
    seen: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ManifestSchemaError(f"{path}: empty manifest, no header row") from None
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestSchemaError(f"{path}: missing column(s): {', '.join(missing)}")
        unknown = [c for c in header if c not in MANIFEST_COLUMNS]
        if unknown:
            raise ManifestSchemaError(f"{path}: unknown column(s): {', '.join(unknown)}")
        index = {c: header.index(c) for c in MANIFEST_COLUMNS}

        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ManifestParseError(
                    f"row {row_no}: expected {len(header)} fields, got {len(row)}"
                )
            get = lambda c: row[index[c]]  # noqa: E731
            area_raw = get("area_category").strip()
            area = (
                None
                if area_raw in ("", "NONE")
                else _parse_enum(AreaCategory, area_raw, "area_category", row_no)
            )
            try:
                grade = GradeRecord(
                    ga_present=_parse_bool(get("ga_present"), "ga_present", row_no),
                    centrality=_parse_enum(Centrality, get("centrality"), "centrality", row_no),
                    area_category=area,
                    nv_amd=_parse_bool(get("nv_amd"), "nv_amd", row_no),
                    specialist_ga=_parse_bool(get("specialist_ga"), "specialist_ga", row_no, True),
                    specialist_cga=_parse_bool(
                        get("specialist_cga"), "specialist_cga", row_no, True
                    ),
                )
            except ManifestParseError:
                raise
            except DataError as exc:
                raise ManifestParseError(f"row {row_no}: {exc}") from None
            pid = get("participant_id").strip()
            if not pid:
                raise ManifestParseError(f"row {row_no}: empty participant_id")
            image_path = Path(get("image_path").strip())
            if not image_path.is_absolute():
                image_path = base / image_path
            record = ImageRecord(
                participant_id=pid,
                eye=_parse_enum(Eye, get("eye"), "eye", row_no),
                visit=get("visit").strip(),
                stereo_side=_parse_enum(StereoSide, get("stereo_side"), "stereo_side", row_no),
                image_path=image_path,
                grade=grade,
            )
            if record.key in seen:
                raise DuplicateRecordError(
                    f"duplicate key {record.image_key} at rows {seen[record.key]} and {row_no}"
                )
            seen[record.key] = row_no
            records.append(record)
    return records


def _fmt_bool(value: Optional[bool]) -> str:
    if value is None:
        return ""
    return "1" if value else "0"


def write_manifest(records: Iterable[ImageRecord], path, relative_to=None) -> Path:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            g = r.grade
            try:
                image_path = Path(r.image_path).relative_to(base)
            except ValueError:
                image_path = r.image_path
            writer.writerow(
                [
                    r.participant_id,
                    r.eye.name,
                    r.visit,
                    r.stereo_side.name,
                    image_path.as_posix(),
                    _fmt_bool(g.ga_present),
                    g.centrality.name,
                    "" if g.area_category is None else g.area_category.name,
                    _fmt_bool(g.nv_amd),
                    _fmt_bool(g.specialist_ga),
                    _fmt_bool(g.specialist_cga),
                ]
            )
    return path


# ---------------------------------------------------------------------------
# selection rules


def select_stereo(records: Sequence[ImageRecord]) -> list[ImageRecord]:
    """Keep one photograph per (participant, eye, visit).

    The left image of the stereo pair wins; the right image is used only when
    the left one is missing. Output follows first-appearance order of groups.
    """
    groups: "OrderedDict[tuple, ImageRecord]" = OrderedDict()
    for r in records:
        k = (r.participant_id, r.eye, r.visit)
        current = groups.get(k)
        if current is None or (
            current.stereo_side is StereoSide.RIGHT_OF_PAIR
            and r.stereo_side is StereoSide.LEFT_OF_PAIR
        ):
            groups[k] = r
    return list(groups.values())


def apply_exclusions(records: Iterable[ImageRecord]) -> list[ImageRecord]:
    """Drop images graded positive for both GA and neovascular AMD."""
    return [r for r in records if not (r.grade.ga_present and r.grade.nv_amd)]


def derive_labels(
    records: Iterable[ImageRecord],
    task,
    include_questionable_as_positive: bool = True,
) -> LabeledSet:
    """Build the binary labeled set for one of the three tasks.

    With ``include_questionable_as_positive=False`` images whose GA area is
    only questionable are left out of every task, so that the CGA-implies-GA
    hierarchy still holds on the remaining images.
    """
    task = Task.parse(task)
    out = LabeledSet(task=task)
    for r in records:
        g = r.grade
        if not include_questionable_as_positive and g.area_category is AreaCategory.QUESTIONABLE:
            continue
        if task is Task.GA:
            out.items.append((r, bool(g.ga_present)))
        elif task is Task.CGA:
            out.items.append((r, g.cga))
        elif g.ga_present:
            out.items.append((r, g.cga))
    return out


def summarize(
    records: Sequence[ImageRecord],
    folds: Optional[Mapping[str, int]] = None,
) -> DatasetSummary:
    """Image/participant counts and GA/CGA prevalence, optionally per fold.

    ``folds`` maps participant id to fold index.
    """
    n = len(records)
    n_ga = sum(1 for r in records if r.grade.ga_present)
    n_cga = sum(1 for r in records if r.grade.cga)
    summary = DatasetSummary(
        n_images=n,
        n_participants=len({r.participant_id for r in records}),
        ga_percent=100.0 * n_ga / n if n else 0.0,
        cga_percent=100.0 * n_cga / n if n else 0.0,
        n_ga=n_ga,
        n_cga=n_cga,
    )
    if folds is not None:
        per_fold = {}
        for f in sorted(set(folds.values())):
            subset = [r for r in records if folds.get(r.participant_id) == f]
            per_fold[f] = summarize(subset)
        summary.per_fold = per_fold
    return summary

"""Procedural color fundus photographs with controllable GA lesions.

The renderings are crude on purpose: a dark orange fundus field on black, an
optic disc, branching vessels and a darker macula. A GA lesion is a pale,
sharply edged blob with reddish streaks standing in for exposed choroidal
vessels. Every lesion mask has an exact pixel count inside the range
calibrated for its area category, measured in disc areas (DA).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .dataset import (
    AreaCategory,
    Centrality,
    Eye,
    GradeRecord,
    ImageRecord,
    StereoSide,
    write_manifest,
)
from .errors import ConfigError, StorageError
from .imageio import write_image

# [low, high) lesion area per category, in disc areas
AREA_RANGES_DA = {
    AreaCategory.QUESTIONABLE: (1 / 128, 1 / 64),
    AreaCategory.LT_I2: (1 / 64, 1 / 32),
    AreaCategory.I2_TO_O2: (1 / 32, 1 / 8),
    AreaCategory.O2_TO_HALF_DA: (1 / 8, 1 / 2),
    AreaCategory.HALF_TO_1_DA: (1 / 2, 1.0),
    AreaCategory.ONE_TO_2_DA: (1.0, 2.0),
    AreaCategory.GE_2_DA: (2.0, 4.0),
}

# whole-test-set counts per area category from the GA error analysis
DEFAULT_AREA_WEIGHTS = {
    AreaCategory.QUESTIONABLE: 275,
    AreaCategory.LT_I2: 38,
    AreaCategory.I2_TO_O2: 125,
    AreaCategory.O2_TO_HALF_DA: 192,
    AreaCategory.HALF_TO_1_DA: 297,
    AreaCategory.ONE_TO_2_DA: 403,
    AreaCategory.GE_2_DA: 1255,
}

FIELD_RADIUS_FRAC = 0.47
DISC_FOVEA_DD = 2.4  # disc-to-fovea distance in disc diameters


class SpecError(ConfigError):
    pass


@dataclass(frozen=True)
class LesionSpec:
    area_category: AreaCategory
    central: bool = False
    depigmentation: float = 0.85
    multifocal: bool = False
    questionable_center: bool = False

    def __post_init__(self):
        if not 0 < self.depigmentation <= 1:
            raise SpecError(f"depigmentation must be in (0, 1], got {self.depigmentation}")
        if self.questionable_center and not self.central:
            raise SpecError("questionable_center only applies to central lesions")


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 128
    disc_diameter_px: Optional[float] = None
    lesion: Optional[LesionSpec] = None
    seed: int = 0
    nv_amd: bool = False
    eye: Eye = Eye.LEFT

    def __post_init__(self):
        if self.image_size < 8:
            raise SpecError(f"image_size too small: {self.image_size}")
        if not 0 < self.disc_diameter < self.image_size / 2:
            raise SpecError(
                f"disc diameter {self.disc_diameter} must be in (0, image_size/2)"
            )

    @property
    def disc_diameter(self) -> float:
        if self.disc_diameter_px is not None:
            return float(self.disc_diameter_px)
        return 0.15 * self.image_size

    @property
    def disc_area(self) -> float:
        return math.pi * (self.disc_diameter / 2) ** 2


def area_pixel_range(category: AreaCategory, disc_area_px: float) -> tuple[int, int]:
    """Inclusive integer pixel-count range whose areas fall in the category."""
    lo, hi = AREA_RANGES_DA[category]
    n_lo = max(1, math.ceil(lo * disc_area_px))
    n_hi = math.ceil(hi * disc_area_px) - 1
    return n_lo, n_hi


def center_pixel(size: int) -> tuple[int, int]:
    return size // 2, size // 2


# ---------------------------------------------------------------------------
# rendering helpers


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return n / (n.std() + 1e-12)


def _draw_vessels(rng, size, disc_yx, toward_left, width):
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    heading0 = math.pi if toward_left else 0.0
    step = size / 40.0

    def walk(y, x, heading, curvature, length, w):
        pts = [(x, y)]
        for _ in range(int(length)):
            heading += curvature + rng.normal(0, 0.06)
            y += step * math.sin(heading)
            x += step * math.cos(heading)
            pts.append((x, y))
            if rng.random() < 0.05 and w > 1:
                walk(y, x, heading + rng.choice([-0.6, 0.6]), curvature * 0.5, length * 0.4, w - 1)
        draw.line(pts, fill=255, width=max(1, int(round(w))))

    dy, dx = disc_yx
    for sign in (-1, 1):
        # temporal arcades curve around the macula, nasal branches run straight out
        walk(dy, dx, heading0 + sign * 1.0, -sign * 0.05, 34, width)
        walk(dy, dx, heading0 + math.pi + sign * 0.6, 0.0, 14, max(1, width - 1))
    return np.asarray(canvas, dtype=np.float64) / 255.0


def _lesion_pixels(rng, size, centre, n_pixels, candidates, jagged=0.25):
    """The n_pixels candidate pixels nearest ``centre`` under an irregular metric."""
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - centre[0]
    dx = xx - centre[1]
    theta = np.arctan2(dy, dx)
    radius = np.ones_like(theta)
    for harmonic in (2, 3, 5):
        radius += jagged / harmonic * math.sqrt(harmonic) * np.cos(
            harmonic * theta + rng.uniform(0, 2 * math.pi)
        ) / 2
    dist = np.hypot(dy, dx) / np.clip(radius, 0.3, None)
    dist = np.where(candidates, dist, np.inf)
    flat = np.argsort(dist, axis=None, kind="stable")[:n_pixels]
    mask = np.zeros(size * size, dtype=bool)
    mask[flat] = True
    mask = mask.reshape(size, size)
    if not np.all(candidates[mask]):
        return None
    return mask


def _place_blob(rng, size, n_pixels, candidates, field_r, central, cy, cx):
    r_eq = math.sqrt(n_pixels / math.pi)
    centre_px = center_pixel(size)
    for attempt in range(60):
        if central:
            if attempt < 30:
                off = rng.uniform(0, 0.3 * r_eq)
                ang = rng.uniform(0, 2 * math.pi)
                centre = (cy + off * math.sin(ang), cx + off * math.cos(ang))
            else:
                centre = (float(centre_px[0]), float(centre_px[1]))
        else:
            rho_lo = 1.5 * r_eq + 1.5
            rho_hi = max(rho_lo, field_r - 0.8 * r_eq)
            rho = rng.uniform(rho_lo, rho_hi)
            ang = rng.uniform(0, 2 * math.pi)
            centre = (cy + rho * math.sin(ang), cx + rho * math.cos(ang))
        mask = _lesion_pixels(rng, size, centre, n_pixels, candidates)
        if mask is None:
            continue
        if mask[centre_px] == central:
            return mask
    raise SpecError(f"cannot place a {'central' if central else 'non-central'} lesion of {n_pixels} px")


def generate_eye(spec: SynthSpec):
    """Render one eye.

    Returns ``(image, grade, lesion_mask)``: an S x S x 3 uint8 photograph, the
    matching :class:`GradeRecord`, and a boolean S x S mask (all False when
    there is no lesion). Deterministic in ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    S = spec.image_size
    dd = spec.disc_diameter
    cy = cx = (S - 1) / 2.0
    yy, xx = np.mgrid[0:S, 0:S]
    field_r = FIELD_RADIUS_FRAC * S
    r_centre = np.hypot(yy - cy, xx - cx)
    fundus = r_centre <= field_r

    # disc on the nasal side: viewer's left for a left eye
    toward_left = spec.eye is Eye.RIGHT
    disc_dx = DISC_FOVEA_DD * dd * (-1 if spec.eye is Eye.LEFT else 1)
    disc_yx = (cy + rng.normal(0, 0.02 * S), cx + disc_dx)
    r_disc = np.hypot(yy - disc_yx[0], xx - disc_yx[1])
    disc = r_disc <= dd / 2

    lesion_mask = np.zeros((S, S), dtype=bool)
    if spec.lesion is not None:
        lesion = spec.lesion
        n_lo, n_hi = area_pixel_range(lesion.area_category, spec.disc_area)
        free = fundus & ~disc
        cap = int(0.5 * free.sum())
        n_hi = min(n_hi, cap)
        lo_da, _ = AREA_RANGES_DA[lesion.area_category]
        if n_lo > n_hi or n_lo < lo_da * spec.disc_area:
            raise SpecError(
                f"{lesion.area_category.name} lesion cannot be drawn at image_size={S} "
                f"(pixel range {n_lo}..{n_hi})"
            )
        # log-uniform area inside the category
        n_target = int(round(math.exp(rng.uniform(math.log(n_lo), math.log(n_hi + 1)))))
        n_target = min(max(n_target, n_lo), n_hi)
        parts = [n_target]
        if lesion.multifocal and n_target >= 6:
            k = int(rng.integers(2, 4))
            cuts = np.sort(rng.choice(np.arange(1, n_target), size=k - 1, replace=False))
            parts = [int(p) for p in np.diff(np.r_[0, cuts, n_target])]
            parts.sort(reverse=True)
        centre_px = center_pixel(S)
        for i, n_px in enumerate(parts):
            central = lesion.central and i == 0
            candidates = free & ~lesion_mask
            if not central:
                # satellites must not touch the center point
                candidates = candidates.copy()
                candidates[centre_px] = False
            blob = _place_blob(rng, S, n_px, candidates, field_r, central, cy, cx)
            lesion_mask |= blob
        if lesion.central != bool(lesion_mask[centre_px]):
            raise SpecError("internal: centrality of the rendered lesion disagrees with spec")

    # --- background
    tint = rng.normal(0, 6, size=3)
    base = np.array([188.0, 88.0, 42.0]) + tint
    shade = 1.0 - 0.35 * (r_centre / field_r) ** 2 + 0.06 * _smooth_noise(rng, (S, S), S / 12)
    img = base[None, None, :] * shade[..., None]
    macula = np.exp(-((r_centre / (0.09 * S)) ** 2))
    img *= (1.0 - 0.35 * macula)[..., None]

    # --- disc with soft rim
    disc_soft = np.clip((dd / 2 + 1.0 - r_disc) / 2.0, 0, 1)
    disc_col = np.array([238.0, 196.0, 138.0])
    img = img * (1 - disc_soft[..., None]) + disc_col * disc_soft[..., None]
    cup = np.clip((dd / 5 - r_disc) / 1.5, 0, 1)
    img = img * (1 - cup[..., None]) + np.array([250.0, 232.0, 200.0]) * cup[..., None]

    # --- vessels
    width = max(1.0, S / 90.0)
    vessels = _draw_vessels(rng, S, disc_yx, toward_left, width)
    vessels = ndimage.gaussian_filter(vessels, 0.4)
    vessel_col = np.array([120.0, 30.0, 20.0])
    img = img * (1 - 0.6 * vessels[..., None]) + vessel_col * 0.6 * vessels[..., None]

    # --- neovascular blotch
    if spec.nv_amd:
        ang = rng.uniform(0, 2 * math.pi)
        rho = rng.uniform(0.05, 0.2) * S
        by, bx = cy + rho * math.sin(ang), cx + rho * math.cos(ang)
        blot = np.exp(-((np.hypot(yy - by, xx - bx) / (0.05 * S)) ** 2))
        img = img * (1 - 0.7 * blot[..., None]) + np.array([80.0, 35.0, 22.0]) * 0.7 * blot[..., None]

    # --- GA lesion: pale, sharply demarcated, streaked with choroidal vessels
    if lesion_mask.any():
        dep = spec.lesion.depigmentation
        alpha = rng.uniform(0, math.pi)
        freq = 2 * math.pi / max(3.0, S / 25.0)
        phase = freq * (xx * math.cos(alpha) + yy * math.sin(alpha)) + 1.5 * _smooth_noise(rng, (S, S), S / 20)
        streak = (np.sin(phase) > 0.55).astype(np.float64)
        pale = np.array([246.0, 216.0, 168.0])
        choroid = np.array([208.0, 118.0, 78.0])
        lesion_col = pale * (1 - 0.45 * streak[..., None]) + choroid * 0.45 * streak[..., None]
        m = lesion_mask[..., None]
        img = np.where(m, (1 - dep) * img + dep * lesion_col, img)

    img += rng.normal(0, 2.0, size=img.shape)
    img[~fundus] = 0.0
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    if spec.lesion is None:
        grade = GradeRecord(False, Centrality.NO_GA, None, nv_amd=spec.nv_amd)
    else:
        if not spec.lesion.central:
            centrality = Centrality.NON_CENTRAL
        elif spec.lesion.questionable_center:
            centrality = Centrality.QUESTIONABLE_CP_DEFINITE_SUBFIELD
        else:
            centrality = Centrality.DEFINITE_CENTER_POINT
        grade = GradeRecord(True, centrality, spec.lesion.area_category, nv_amd=spec.nv_amd)
    return image, grade, lesion_mask


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SynthTally:
    n: int = 0
    n_participants: int = 0
    n_ga: int = 0
    n_cga: int = 0
    n_nv: int = 0
    area_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "n_participants": self.n_participants,
            "n_ga": self.n_ga,
            "n_cga": self.n_cga,
            "n_nv": self.n_nv,
            "area_counts": dict(self.area_counts),
        }


VISITS = ("baseline", "yr02", "yr03", "yr04", "yr05", "yr06", "yr07", "yr08")


def _participant_slots(n: int, rng) -> list[tuple[str, Eye, str]]:
    slots = []
    p = 0
    while len(slots) < n:
        pid = f"P{p:05d}"
        n_visits = int(rng.integers(1, 5))
        for v in VISITS[:n_visits]:
            for eye in (Eye.LEFT, Eye.RIGHT):
                slots.append((pid, eye, v))
        p += 1
    return slots[:n]


def _apply_grader(rng, gold: bool, operating_point) -> bool:
    sens, spec = operating_point
    return bool(rng.random() < sens) if gold else bool(rng.random() >= spec)


def generate_dataset(
    n: int,
    ga_prevalence: float,
    cga_fraction: float,
    seed: int,
    out_dir,
    image_size: int = 128,
    area_weights: Optional[dict] = None,
    questionable_center_fraction: float = 158 / 1455,
    multifocal_fraction: float = 0.2,
    nv_fraction: float = 0.0,
    right_of_pair_fraction: float = 0.005,
    specialist_ga: Optional[Sequence[float]] = (0.588, 0.982),
    specialist_cga: Optional[Sequence[float]] = (0.448, 0.993),
) -> Path:
    """Write ``n`` synthetic images, their masks and a manifest; return the manifest path.

    ``cga_fraction`` is the share of GA-positive images whose lesion covers the
    center point. Exactly ``round(n * ga_prevalence)`` images carry GA.
    Specialist gradings are simulated at baseline visits only, from the given
    (sensitivity, specificity) operating points.
    """
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    if not 0 <= ga_prevalence <= 1:
        raise ConfigError(f"ga_prevalence must be in [0, 1], got {ga_prevalence}")
    if not 0 <= cga_fraction <= 1:
        raise ConfigError(f"cga_fraction must be in [0, 1], got {cga_fraction}")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {out_dir}: {exc}") from exc

    weights = area_weights or DEFAULT_AREA_WEIGHTS
    cats = list(AreaCategory)
    p = np.array([float(weights.get(c, 0)) for c in cats])
    p = p / p.sum()

    rng = np.random.default_rng(seed)
    n_ga = int(round(n * ga_prevalence))
    n_cga = int(round(n_ga * cga_fraction))
    order = rng.permutation(n)
    ga_idx = set(order[:n_ga].tolist())
    cga_idx = set(order[:n_cga].tolist())
    slots = _participant_slots(n, rng)
    item_seeds = np.random.SeedSequence(seed).spawn(n)

    tally = SynthTally(n=n, area_counts={c.name: 0 for c in cats})
    records = []
    for i, (pid, eye, visit) in enumerate(slots):
        item_rng = np.random.default_rng(item_seeds[i])
        eye_seed = int(item_rng.integers(0, 2**63 - 1))
        lesion = None
        if i in ga_idx:
            cat = cats[int(item_rng.choice(len(cats), p=p))]
            central = i in cga_idx
            lesion = LesionSpec(
                area_category=cat,
                central=central,
                depigmentation=float(item_rng.uniform(0.6, 1.0)),
                multifocal=bool(item_rng.random() < multifocal_fraction),
                questionable_center=central and bool(item_rng.random() < questionable_center_fraction),
            )
            tally.area_counts[cat.name] += 1
        nv = bool(item_rng.random() < nv_fraction)
        spec = SynthSpec(image_size=image_size, lesion=lesion, seed=eye_seed, nv_amd=nv, eye=eye)
        image, grade, mask = generate_eye(spec)
        side = StereoSide.RIGHT_OF_PAIR if item_rng.random() < right_of_pair_fraction else StereoSide.LEFT_OF_PAIR
        s_ga = s_cga = None
        if visit == "baseline":
            if specialist_ga is not None:
                s_ga = _apply_grader(item_rng, grade.ga_present, specialist_ga)
            if specialist_cga is not None:
                s_cga = _apply_grader(item_rng, grade.cga, specialist_cga)
        grade = GradeRecord(
            grade.ga_present, grade.centrality, grade.area_category, grade.nv_amd, s_ga, s_cga
        )
        stem = f"{pid}_{eye.name}_{visit}"
        img_path = write_image(out_dir / "images" / f"{stem}.png", image)
        write_image(out_dir / "masks" / f"{stem}.png", mask.astype(np.uint8) * 255)
        records.append(ImageRecord(pid, eye, visit, side, img_path, grade))
        tally.n_ga += grade.ga_present
        tally.n_cga += grade.cga
        tally.n_nv += nv
    tally.n_participants = len({r.participant_id for r in records})
    manifest = write_manifest(records, out_dir / "manifest.csv")
    (out_dir / "synth_tally.json").write_text(json.dumps(tally.to_dict(), indent=2))
    return manifest


def mask_path_for(image_path) -> Path:
    """Mask file written by :func:`generate_dataset` alongside an image."""
    image_path = Path(image_path)
    return image_path.parent.parent / "masks" / image_path.name


def load_mask(image_path) -> np.ndarray:
    with Image.open(mask_path_for(image_path)) as im:
        return np.asarray(im.convert("L")) > 127

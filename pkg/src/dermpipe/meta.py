"""Patient meta-data encoding: one-hot site/sex, numeric age, missing-value rules."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .constants import SEXES, SITES

log = logging.getLogger(__name__)

# Age is a plain numeric feature; 0 is a legitimate age group, so missing
# values are marked with a sentinel outside the value range.
MISSING_AGE = -5.0
META_DIM = len(SITES) + len(SEXES) + 1


@dataclass(frozen=True)
class MetaRecord:
    """Raw per-image patient attributes. None means missing."""

    age: float | None = None  # years, multiples of five in the source data
    site: str | None = None   # one of SITES
    sex: str | None = None    # one of SEXES

    def fully_missing(self) -> bool:
        return self.age is None and self.site is None and self.sex is None


def encode_meta(rec: MetaRecord) -> np.ndarray:
    """Encode a record as the 11-feature vector: site[8] + sex[2] + age[1].

    A missing site or sex leaves its one-hot block all zero; a missing age
    becomes MISSING_AGE. Total and deterministic.
    """
    vec = np.zeros(META_DIM)
    if rec.site is not None:
        vec[SITES.index(rec.site)] = 1.0
    if rec.sex is not None:
        vec[len(SITES) + SEXES.index(rec.sex)] = 1.0
    vec[-1] = MISSING_AGE if rec.age is None else float(rec.age)
    return vec


def meta_dropout(rec: MetaRecord, p: float, rng: np.random.Generator) -> MetaRecord:
    """Independently replace each of the three properties by missing with probability p.

    Training-time augmentation so the model cannot associate missingness
    with a class. Applied to the record, before encoding.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    drop = rng.random(3) < p
    return MetaRecord(
        age=None if drop[0] else rec.age,
        site=None if drop[1] else rec.site,
        sex=None if drop[2] else rec.sex,
    )


def parse_meta_fields(age: str, site: str, sex: str, image: str = "?") -> MetaRecord:
    """Build a MetaRecord from raw CSV fields. Empty string means missing.

    Values outside the known vocabularies (external datasets use others)
    map to missing with a warning.
    """
    age_v: float | None = None
    if age.strip():
        try:
            age_v = float(age)
        except ValueError:
            log.warning("image %s: unparseable age %r treated as missing", image, age)
        else:
            if age_v < 0:
                log.warning("image %s: negative age %r treated as missing", image, age)
                age_v = None
    site_v = site.strip().lower() or None
    if site_v is not None and site_v not in SITES:
        log.warning("image %s: unknown site %r treated as missing", image, site)
        site_v = None
    sex_v = sex.strip().lower() or None
    if sex_v is not None and sex_v not in SEXES:
        log.warning("image %s: unknown sex %r treated as missing", image, sex)
        sex_v = None
    return MetaRecord(age=age_v, site=site_v, sex=sex_v)


def meta_fields(rec: MetaRecord) -> tuple[str, str, str]:
    """Inverse of parse_meta_fields for CSV writers; missing becomes empty."""
    age = "" if rec.age is None else format(rec.age, "g")
    return age, rec.site or "", rec.sex or ""

"""MS/MS spectrum data model, MGF/MSP parsing, normalization, and binning."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from madgen.chemgraph.mol import SUPPORTED_ELEMENTS
from madgen.errors import EmptySpectrumError, FormatError, MissingFieldError

_FORMULA_ELEMENTS = set(SUPPORTED_ELEMENTS) | {"H"}
_FORMULA_TOKEN = re.compile(r"([A-Z][a-z]?)(\d*)")

DEFAULT_BIN_WIDTH = 1.0
DEFAULT_MAX_MZ = 1000.0
DEFAULT_INTENSITY_THRESHOLD = 0.01


@dataclass(frozen=True, slots=True)
class Peak:
    mz: float
    intensity: float

    def __post_init__(self):
        if self.mz <= 0:
            raise FormatError(f"peak m/z must be positive, got {self.mz}")
        if self.intensity < 0:
            raise FormatError("peak intensity must be non-negative")


@dataclass(frozen=True)
class ChemFormula:
    """Element -> positive count map; hydrogen allowed."""

    counts: dict[str, int]

    def __post_init__(self):
        for elem, n in self.counts.items():
            if elem not in _FORMULA_ELEMENTS:
                raise FormatError(f"unknown element {elem!r} in formula")
            if n < 1:
                raise FormatError(f"count for {elem} must be >= 1")

    def __str__(self) -> str:
        return format_formula(self)

    def heavy_atom_count(self) -> int:
        return sum(n for el, n in self.counts.items() if el != "H")


@dataclass(frozen=True)
class Spectrum:
    """Peak list plus precursor metadata; peaks sorted ascending by m/z."""

    peaks: tuple[Peak, ...]
    precursor_mz: float
    adduct: str
    formula: ChemFormula
    record_id: str

    def __post_init__(self):
        if not self.peaks:
            raise EmptySpectrumError(f"spectrum {self.record_id!r} has no peaks")
        mzs = [p.mz for p in self.peaks]
        if any(b <= a for a, b in zip(mzs, mzs[1:])):
            raise FormatError("peaks must be strictly increasing in m/z")

    @property
    def base_peak_intensity(self) -> float:
        return max(p.intensity for p in self.peaks)


@dataclass(frozen=True)
class BinnedSpectrum:
    """Fixed-length intensity vector over uniform m/z bins."""

    bins: np.ndarray
    bin_width: float
    max_mz: float
    n_dropped: int = 0

    def __post_init__(self):
        expected = math.ceil(self.max_mz / self.bin_width)
        if len(self.bins) != expected:
            raise ValueError(f"expected {expected} bins, got {len(self.bins)}")


def make_spectrum(raw_peaks, precursor_mz, adduct, formula, record_id) -> Spectrum:
    """Sort, merge duplicate m/z by max intensity, and max-normalize."""
    if not raw_peaks:
        raise EmptySpectrumError(f"spectrum {record_id!r} has no peaks")
    merged: dict[float, float] = {}
    for mz, intensity in raw_peaks:
        mz = float(mz)
        intensity = float(intensity)
        merged[mz] = max(merged.get(mz, 0.0), intensity)
    top = max(merged.values())
    if top <= 0:
        raise FormatError(f"spectrum {record_id!r} has no positive intensity")
    peaks = tuple(Peak(mz, merged[mz] / top) for mz in sorted(merged))
    return Spectrum(peaks, float(precursor_mz), adduct, formula, record_id)


def normalize_and_filter(spec: Spectrum,
                         threshold: float = DEFAULT_INTENSITY_THRESHOLD) -> Spectrum:
    """Max-normalize intensities and drop peaks below ``threshold``.

    Peaks above precursor + 1.0 Da are dropped as well; the base peak always
    survives. Idempotent.
    """
    if not 0 <= threshold < 1:
        raise ValueError("threshold must be in [0, 1)")
    top = spec.base_peak_intensity
    kept = []
    for p in spec.peaks:
        rel = p.intensity / top
        if rel < threshold:
            continue
        if p.mz > spec.precursor_mz + 1.0:
            continue
        kept.append(Peak(p.mz, rel))
    if not kept:
        # The base peak was above the precursor bound; keep it regardless.
        base = max(spec.peaks, key=lambda p: p.intensity)
        kept = [Peak(base.mz, 1.0)]
    return replace(spec, peaks=tuple(kept))


def bin_spectrum(spec: Spectrum, bin_width: float = DEFAULT_BIN_WIDTH,
                 max_mz: float = DEFAULT_MAX_MZ) -> BinnedSpectrum:
    """Aggregate peak intensities into floor(mz / bin_width) bins by max."""
    if bin_width <= 0 or max_mz <= 0:
        raise ValueError("bin_width and max_mz must be positive")
    n_bins = math.ceil(max_mz / bin_width)
    bins = np.zeros(n_bins, dtype=np.float64)
    dropped = 0
    for p in spec.peaks:
        if p.mz >= max_mz:
            dropped += 1
            continue
        idx = int(p.mz // bin_width)
        bins[idx] = max(bins[idx], p.intensity)
    return BinnedSpectrum(bins=bins, bin_width=bin_width, max_mz=max_mz,
                          n_dropped=dropped)


def parse_formula(text: str) -> ChemFormula:
    """Parse a Hill-notation molecular formula (no isotopes or charges)."""
    if not text or not text.strip():
        raise FormatError("empty formula string")
    text = text.strip()
    counts: dict[str, int] = {}
    pos = 0
    while pos < len(text):
        match = _FORMULA_TOKEN.match(text, pos)
        if not match or not match.group(1):
            raise FormatError(f"bad formula token at {text[pos:]!r}")
        elem, digits = match.group(1), match.group(2)
        if elem not in _FORMULA_ELEMENTS:
            raise FormatError(f"unknown element {elem!r} in formula {text!r}")
        n = int(digits) if digits else 1
        if n == 0:
            raise FormatError(f"zero count for {elem} in formula {text!r}")
        if elem in counts:
            raise FormatError(f"element {elem} repeated in formula {text!r}")
        counts[elem] = n
        pos = match.end()
    return ChemFormula(counts)


def format_formula(formula: ChemFormula) -> str:
    """Hill-notation string: C, H, then remaining elements alphabetically."""
    counts = dict(formula.counts)
    parts = []
    for elem in ("C", "H"):
        if elem in counts:
            n = counts.pop(elem)
            parts.append(elem if n == 1 else f"{elem}{n}")
    for elem in sorted(counts):
        n = counts[elem]
        parts.append(elem if n == 1 else f"{elem}{n}")
    return "".join(parts)


def heavy_atom_multiset(formula: ChemFormula) -> Counter:
    """Formula counts minus the hydrogen entry."""
    return Counter({el: n for el, n in formula.counts.items() if el != "H"})


# ---------------------------------------------------------------------------
# MGF
# ---------------------------------------------------------------------------

def parse_mgf(stream, formulas: dict[str, str] | None = None) -> list[Spectrum]:
    """Parse BEGIN IONS / END IONS blocks.

    Recognized headers: PEPMASS, CHARGE (ignored), ADDUCT, FORMULA, ID,
    TITLE. A missing FORMULA is an error unless ``formulas`` maps the
    record id to one.
    """
    text = stream.read() if hasattr(stream, "read") else stream
    spectra = []
    in_block = False
    headers: dict[str, str] = {}
    peaks: list[tuple[float, float]] = []
    n_blocks = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.upper() == "BEGIN IONS":
            if in_block:
                raise FormatError(f"line {lineno}: nested BEGIN IONS")
            in_block = True
            headers, peaks = {}, []
            continue
        if line.upper() == "END IONS":
            if not in_block:
                raise FormatError(f"line {lineno}: END IONS without BEGIN IONS")
            spectra.append(_mgf_block(headers, peaks, n_blocks, formulas))
            n_blocks += 1
            in_block = False
            continue
        if not in_block:
            raise FormatError(f"line {lineno}: content outside BEGIN/END IONS")
        if "=" in line and not line[0].isdigit():
            key, value = line.split("=", 1)
            headers[key.strip().upper()] = value.strip()
            continue
        fields = line.split()
        if len(fields) < 2:
            raise FormatError(f"line {lineno}: bad peak line {line!r}")
        try:
            peaks.append((float(fields[0]), float(fields[1])))
        except ValueError as exc:
            raise FormatError(f"line {lineno}: non-numeric peak {line!r}") from exc
    if in_block:
        raise FormatError("unterminated block: missing END IONS")
    return spectra


def _mgf_block(headers, peaks, index, formulas) -> Spectrum:
    if "PEPMASS" not in headers:
        raise MissingFieldError(f"MGF block {index}: missing PEPMASS")
    pepmass = headers["PEPMASS"].split()[0]
    try:
        precursor = float(pepmass)
    except ValueError as exc:
        raise FormatError(f"MGF block {index}: bad PEPMASS {pepmass!r}") from exc
    record_id = headers.get("ID") or headers.get("TITLE") or f"mgf-{index:04d}"
    formula_text = headers.get("FORMULA")
    if formula_text is None and formulas is not None:
        formula_text = formulas.get(record_id)
    if formula_text is None:
        raise MissingFieldError(
            f"MGF block {index} ({record_id}): no FORMULA header or sidecar entry")
    adduct = headers.get("ADDUCT", "[M+H]+")
    return make_spectrum(peaks, precursor, adduct, parse_formula(formula_text),
                         record_id)


def write_mgf(spectra) -> str:
    lines = []
    for spec in spectra:
        lines.append("BEGIN IONS")
        lines.append(f"ID={spec.record_id}")
        lines.append(f"PEPMASS={spec.precursor_mz!r}")
        lines.append(f"ADDUCT={spec.adduct}")
        lines.append(f"FORMULA={spec.formula}")
        for p in spec.peaks:
            lines.append(f"{p.mz!r} {p.intensity!r}")
        lines.append("END IONS")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# MSP
# ---------------------------------------------------------------------------

def parse_msp(stream, formulas: dict[str, str] | None = None) -> list[Spectrum]:
    """Parse NIST-style MSP records (Name / PrecursorMZ / Formula / Num Peaks)."""
    text = stream.read() if hasattr(stream, "read") else stream
    lines = text.splitlines()
    spectra = []
    i, n = 0, len(lines)
    index = 0
    while i < n:
        if not lines[i].strip():
            i += 1
            continue
        headers: dict[str, str] = {}
        while i < n and lines[i].strip():
            line = lines[i].strip()
            if ":" not in line:
                raise FormatError(f"MSP record {index}: expected header, got {line!r}")
            key, value = line.split(":", 1)
            headers[key.strip().lower()] = value.strip()
            i += 1
            if key.strip().lower() == "num peaks":
                break
        if "num peaks" not in headers:
            raise MissingFieldError(f"MSP record {index}: missing 'Num Peaks'")
        try:
            n_peaks = int(headers["num peaks"])
        except ValueError as exc:
            raise FormatError(f"MSP record {index}: bad Num Peaks") from exc
        peaks = []
        while i < n and lines[i].strip():
            fields = lines[i].split()
            if len(fields) < 2:
                raise FormatError(f"MSP record {index}: bad peak line {lines[i]!r}")
            try:
                peaks.append((float(fields[0]), float(fields[1])))
            except ValueError as exc:
                raise FormatError(
                    f"MSP record {index}: non-numeric peak {lines[i]!r}") from exc
            i += 1
        if len(peaks) != n_peaks:
            raise FormatError(
                f"MSP record {index}: Num Peaks says {n_peaks}, found {len(peaks)}")
        spectra.append(_msp_record(headers, peaks, index, formulas))
        index += 1
    return spectra


def _msp_record(headers, peaks, index, formulas) -> Spectrum:
    if "precursormz" not in headers:
        raise MissingFieldError(f"MSP record {index}: missing PrecursorMZ")
    record_id = headers.get("name", f"msp-{index:04d}")
    formula_text = headers.get("formula")
    if formula_text is None and formulas is not None:
        formula_text = formulas.get(record_id)
    if formula_text is None:
        raise MissingFieldError(
            f"MSP record {index} ({record_id}): no Formula header or sidecar entry")
    adduct = headers.get("precursor_type", headers.get("adduct", "[M+H]+"))
    try:
        precursor = float(headers["precursormz"])
    except ValueError as exc:
        raise FormatError(f"MSP record {index}: bad PrecursorMZ") from exc
    return make_spectrum(peaks, precursor, adduct, parse_formula(formula_text),
                         record_id)


def write_msp(spectra) -> str:
    lines = []
    for spec in spectra:
        lines.append(f"Name: {spec.record_id}")
        lines.append(f"PrecursorMZ: {spec.precursor_mz!r}")
        lines.append(f"Precursor_type: {spec.adduct}")
        lines.append(f"Formula: {spec.formula}")
        lines.append(f"Num Peaks: {len(spec.peaks)}")
        for p in spec.peaks:
            lines.append(f"{p.mz!r} {p.intensity!r}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Line-oriented TSV interchange
# ---------------------------------------------------------------------------

def spectrum_to_tsv(spec: Spectrum) -> str:
    peaks = ";".join(f"{p.mz!r}:{p.intensity!r}" for p in spec.peaks)
    return "\t".join([spec.record_id, str(spec.formula), spec.adduct,
                      repr(spec.precursor_mz), peaks])


def spectrum_from_tsv(line: str) -> Spectrum:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 5:
        raise FormatError(f"expected 5 tab-separated fields, got {len(fields)}")
    record_id, formula_text, adduct, precursor, peak_field = fields
    peaks = []
    for pair in peak_field.split(";"):
        if not pair:
            continue
        mz, _, intensity = pair.partition(":")
        try:
            peaks.append((float(mz), float(intensity)))
        except ValueError as exc:
            raise FormatError(f"bad peak pair {pair!r}") from exc
    return make_spectrum(peaks, float(precursor), adduct,
                         parse_formula(formula_text), record_id)

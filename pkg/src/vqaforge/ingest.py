"""Corpus ingestion: decode images, fingerprint them, drop near-duplicates,
and attach OCR text.

The fingerprint is a 64-bit difference hash: the image is converted to
grayscale, reduced to 9x8 by exact area averaging, and each bit records
whether a pixel is strictly brighter than its left neighbor (row-major,
most significant bit first).
"""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Protocol, Sequence

import numpy as np
from PIL import Image

from .data_model import ImageRecord, OcrLine, SourceCategory, image_id_for

logger = logging.getLogger(__name__)

HASH_WIDTH = 9
HASH_HEIGHT = 8

# Rec. 601 luma weights, applied to float RGB without intermediate rounding.
_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

_BAND_COUNT = 4
_BAND_BITS = 16
_BAND_MASK = (1 << _BAND_BITS) - 1


class ManifestError(ValueError):
    """The manifest file itself is unusable (fatal)."""


class PhashError(ValueError):
    """Image bytes could not be decoded into pixels."""


class OcrError(RuntimeError):
    """An OCR client failed to produce lines."""


# ---------------------------------------------------------------------------
# perceptual hash
# ---------------------------------------------------------------------------

def _axis_weights(n_src: int, n_dst: int) -> list[tuple[int, np.ndarray]]:
    """Per destination cell: (first source index, overlap weights).

    Destination cell t covers the source interval [t*s, (t+1)*s) with
    s = n_src/n_dst; each source pixel in the support contributes its overlap
    with that interval. Weights are normalized to sum to 1 via math.fsum,
    making the average exact for any size ratio.
    """
    cells: list[tuple[int, np.ndarray]] = []
    scale = n_src / n_dst
    for t in range(n_dst):
        lo = t * scale
        hi = (t + 1) * scale
        first = int(math.floor(lo))
        last = min(int(math.ceil(hi)), n_src)
        overlaps = [min(i + 1.0, hi) - max(float(i), lo) for i in range(first, last)]
        total = math.fsum(overlaps)
        cells.append((first, np.array([w / total for w in overlaps],
                                      dtype=np.float64)))
    return cells


def _decode_gray(data: bytes) -> tuple[np.ndarray, int, int]:
    """Decode image bytes to a float64 grayscale array plus (width, height)."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            width, height = img.size
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    except Exception as exc:
        raise PhashError(f"cannot decode image: {exc}") from exc
    if width == 0 or height == 0:
        raise PhashError("image has zero extent")
    # Elementwise products and adds only: each output element is a fixed
    # expression of correctly rounded IEEE ops, so the grayscale plane is
    # bit-identical on every platform (BLAS reductions are not).
    gray = (rgb[..., 0] * _GRAY_WEIGHTS[0]
            + rgb[..., 1] * _GRAY_WEIGHTS[1]
            + rgb[..., 2] * _GRAY_WEIGHTS[2])
    return gray, width, height


def _hash_gray(gray: np.ndarray) -> int:
    row_cells = _axis_weights(gray.shape[0], HASH_HEIGHT)
    col_cells = _axis_weights(gray.shape[1], HASH_WIDTH)
    small = [[0.0] * HASH_WIDTH for _ in range(HASH_HEIGHT)]
    for y, (y0, wy) in enumerate(row_cells):
        for x, (x0, wx) in enumerate(col_cells):
            region = gray[y0:y0 + len(wy), x0:x0 + len(wx)]
            terms = region * np.outer(wy, wx)
            # fsum is exactly rounded, so the cell average (and therefore the
            # hash) does not depend on platform-specific summation order.
            small[y][x] = math.fsum(terms.ravel().tolist())
    bits = 0
    for y in range(HASH_HEIGHT):
        for x in range(HASH_WIDTH - 1):
            bits = (bits << 1) | int(small[y][x + 1] > small[y][x])
    return bits


def phash64(data: bytes) -> int:
    """64-bit difference hash of encoded image bytes."""
    gray, _, _ = _decode_gray(data)
    return _hash_gray(gray)


def hamming64(a: int, b: int) -> int:
    return (a ^ b).bit_count()


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    uri: str
    category: SourceCategory
    metadata: dict[str, str] = field(default_factory=dict)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Load and validate a JSONL manifest of {uri, category, metadata}.

    Structural problems (unreadable file, bad JSON, missing fields, unknown
    categories, duplicate uris) are fatal and name the offending line.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    entries: list[ManifestEntry] = []
    seen_uris: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(row, dict) or "uri" not in row or "category" not in row:
            raise ManifestError(f"{path}:{lineno}: entry must have uri and category")
        uri = row["uri"]
        if uri in seen_uris:
            raise ManifestError(f"{path}:{lineno}: duplicate uri {uri!r}")
        seen_uris.add(uri)
        try:
            category = SourceCategory(row["category"])
        except ValueError as exc:
            raise ManifestError(
                f"{path}:{lineno}: unknown category {row['category']!r}"
            ) from exc
        metadata = row.get("metadata", {})
        if not isinstance(metadata, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
        ):
            raise ManifestError(f"{path}:{lineno}: metadata must map strings to strings")
        entries.append(ManifestEntry(uri=uri, category=category, metadata=dict(metadata)))
    return entries


def resolve_uri(uri: str, base_dir: Path) -> Path:
    """Resolve a manifest locator against the manifest's directory."""
    p = Path(uri)
    return p if p.is_absolute() else base_dir / p


def ingest_manifest(
    path: str | Path,
    *,
    on_skip: Callable[[str, str], None] | None = None,
) -> Iterator[ImageRecord]:
    """Stream one ImageRecord per readable manifest entry.

    Unreadable or undecodable individual images are skipped with a logged
    reason (and reported through ``on_skip`` when given); a broken manifest
    is fatal.
    """
    path = Path(path)
    base_dir = path.parent
    for entry in read_manifest(path):
        target = resolve_uri(entry.uri, base_dir)
        try:
            data = target.read_bytes()
        except OSError as exc:
            logger.warning("skipping %s: unreadable (%s)", entry.uri, exc)
            if on_skip:
                on_skip(entry.uri, f"unreadable: {exc}")
            continue
        try:
            gray, width, height = _decode_gray(data)
        except PhashError as exc:
            logger.warning("skipping %s: %s", entry.uri, exc)
            if on_skip:
                on_skip(entry.uri, str(exc))
            continue
        yield ImageRecord(
            image_id=image_id_for(data),
            uri=entry.uri,
            category=entry.category,
            phash=_hash_gray(gray),
            ocr_lines=(),
            width_px=width,
            height_px=height,
            metadata=entry.metadata,
        )


# ---------------------------------------------------------------------------
# deduplication
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DropRecord:
    """A record removed by dedup, pointing at the kept record it duplicates."""

    image_id: str
    duplicate_of: str

    def to_json_dict(self) -> dict[str, Any]:
        return {"image_id": self.image_id, "duplicate_of": self.duplicate_of}

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "DropRecord":
        return cls(image_id=d["image_id"], duplicate_of=d["duplicate_of"])


def _band_value(phash: int, band: int) -> int:
    return (phash >> (band * _BAND_BITS)) & _BAND_MASK


def dedup(
    records: Iterable[ImageRecord],
    max_hamming: int = 3,
) -> tuple[list[ImageRecord], list[DropRecord]]:
    """Greedy first-wins near-duplicate removal in stream order.

    A record is dropped iff its phash is within ``max_hamming`` of an
    already-kept record; ties go to the earliest kept record. Candidate
    lookup uses four 16-bit bands of the hash, which is exhaustive while
    max_hamming < 4 (a closer hash must then match at least one band
    exactly); larger thresholds fall back to a linear scan so the result
    stays identical to a brute-force pass.
    """
    if not 0 <= max_hamming <= 64:
        raise ValueError(f"max_hamming must be in [0, 64], got {max_hamming}")
    use_bands = max_hamming < _BAND_COUNT

    kept: list[ImageRecord] = []
    kept_hashes: list[int] = []
    dropped: list[DropRecord] = []
    bands: list[dict[int, list[int]]] = [{} for _ in range(_BAND_COUNT)]

    for record in records:
        h = record.phash
        match: int | None = None
        if use_bands:
            candidates: set[int] = set()
            for b in range(_BAND_COUNT):
                candidates.update(bands[b].get(_band_value(h, b), ()))
            for i in sorted(candidates):
                if hamming64(kept_hashes[i], h) <= max_hamming:
                    match = i
                    break
        else:
            for i, kh in enumerate(kept_hashes):
                if hamming64(kh, h) <= max_hamming:
                    match = i
                    break

        if match is None:
            ordinal = len(kept)
            kept.append(record)
            kept_hashes.append(h)
            if use_bands:
                for b in range(_BAND_COUNT):
                    bands[b].setdefault(_band_value(h, b), []).append(ordinal)
        else:
            dropped.append(DropRecord(image_id=record.image_id,
                                      duplicate_of=kept[match].image_id))
    return kept, dropped


# ---------------------------------------------------------------------------
# OCR attachment
# ---------------------------------------------------------------------------

class OcrClient(Protocol):
    def lines_for(self, uri: str) -> Sequence[OcrLine]:
        """Recognized text lines for the image at ``uri``."""
        ...


class ScriptedOcr:
    """Deterministic OCR stand-in: lines keyed by uri, with optional scripted
    failures. No real OCR engine is bundled."""

    def __init__(
        self,
        lines_by_uri: dict[str, Sequence[OcrLine]] | None = None,
        fail_uris: Iterable[str] = (),
    ) -> None:
        self._lines = {uri: tuple(lines) for uri, lines in (lines_by_uri or {}).items()}
        self._fail = set(fail_uris)

    @classmethod
    def load_script(cls, path: str | Path) -> "ScriptedOcr":
        """Load a JSONL script of {uri, lines: [{text, box?}], fail?: bool}."""
        lines_by_uri: dict[str, Sequence[OcrLine]] = {}
        fail: list[str] = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise OcrError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            uri = row["uri"]
            if row.get("fail"):
                fail.append(uri)
                continue
            lines_by_uri[uri] = tuple(
                OcrLine.from_json_dict(x) for x in row.get("lines", [])
            )
        return cls(lines_by_uri, fail)

    def lines_for(self, uri: str) -> Sequence[OcrLine]:
        if uri in self._fail:
            raise OcrError(f"scripted OCR failure for {uri}")
        return self._lines.get(uri, ())


def attach_ocr(record: ImageRecord, ocr: OcrClient) -> ImageRecord:
    """Return a copy of ``record`` with OCR lines populated.

    OCR failure degrades to empty lines with a warning; generation then
    proceeds without text context.
    """
    try:
        lines = tuple(ocr.lines_for(record.uri))
        return replace(record, ocr_lines=lines)
    except Exception as exc:
        logger.warning("ocr failed for %s: %s; continuing without text", record.uri, exc)
        return replace(record, ocr_lines=())


# ---------------------------------------------------------------------------
# combined ingest pass
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IngestResult:
    kept: tuple[ImageRecord, ...]
    dropped: tuple[DropRecord, ...]
    skipped: tuple[tuple[str, str], ...]  # (uri, reason) for unreadable entries


def ingest(
    manifest_path: str | Path,
    *,
    max_hamming: int = 3,
    ocr: OcrClient | None = None,
) -> IngestResult:
    """Manifest to deduplicated, OCR-attached records in one pass."""
    skipped: list[tuple[str, str]] = []
    records = ingest_manifest(manifest_path, on_skip=lambda uri, why: skipped.append((uri, why)))
    kept, dropped = dedup(records, max_hamming=max_hamming)
    if ocr is not None:
        kept = [attach_ocr(r, ocr) for r in kept]
    return IngestResult(kept=tuple(kept), dropped=tuple(dropped), skipped=tuple(skipped))

"""Discrete area model: a lat/lon grid of cells with centroids.

Cells play the role of census areas: each has an opaque string id and a
centroid, points map to their containing cell, and distances between
areas are great-circle distances between centroids.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import ConfigurationError, DomainError, FormatError, OutOfRegionError

NULL_AREA = "null"

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class AreaMap:
    """Rectangular grid of areas partitioning a lat/lon bounding box.

    Row 0 sits at the southern edge, column 0 at the western edge.
    Area ids are zero-padded row-major indices ("a0000", "a0001", ...),
    so lexicographic order equals row-major order.
    """

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ConfigurationError("grid dimensions must be positive")
        if self.grid_rows * self.grid_cols < 2:
            raise ConfigurationError("area map needs at least 2 areas")
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ConfigurationError("bounding box is empty")

    @property
    def n_areas(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def cell_height(self) -> float:
        return (self.lat_max - self.lat_min) / self.grid_rows

    @property
    def cell_width(self) -> float:
        return (self.lon_max - self.lon_min) / self.grid_cols

    def area_id(self, row: int, col: int) -> str:
        if not (0 <= row < self.grid_rows and 0 <= col < self.grid_cols):
            raise DomainError(f"cell ({row}, {col}) outside grid")
        return f"a{row * self.grid_cols + col:04d}"

    def cell_of(self, area: str) -> tuple[int, int]:
        if area == NULL_AREA:
            raise DomainError("null area has no cell")
        try:
            idx = int(area[1:])
        except (ValueError, IndexError):
            raise DomainError(f"unknown area id {area!r}") from None
        if not (area.startswith("a") and 0 <= idx < self.n_areas):
            raise DomainError(f"unknown area id {area!r}")
        return divmod(idx, self.grid_cols)

    def centroid(self, area: str) -> tuple[float, float]:
        """(lat, lon) of the cell center. The null area has no centroid."""
        row, col = self.cell_of(area)
        lat = self.lat_min + (row + 0.5) * self.cell_height
        lon = self.lon_min + (col + 0.5) * self.cell_width
        return lat, lon

    def area_ids(self) -> list[str]:
        """All area ids in row-major (= sorted) order; excludes the null area."""
        return [f"a{i:04d}" for i in range(self.n_areas)]

    def cell_bounds(self, area: str) -> tuple[float, float, float, float]:
        """(lat_lo, lat_hi, lon_lo, lon_hi) of a cell."""
        row, col = self.cell_of(area)
        return (
            self.lat_min + row * self.cell_height,
            self.lat_min + (row + 1) * self.cell_height,
            self.lon_min + col * self.cell_width,
            self.lon_min + (col + 1) * self.cell_width,
        )

    def to_json(self) -> str:
        payload = {
            "bounding_box": {
                "lat_min": self.lat_min,
                "lat_max": self.lat_max,
                "lon_min": self.lon_min,
                "lon_max": self.lon_max,
            },
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "areas": [
                {"id": a, "centroid": list(self.centroid(a))}
                for a in self.area_ids()
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AreaMap":
        try:
            payload = json.loads(text)
            box = payload["bounding_box"]
            amap = cls(
                lat_min=box["lat_min"],
                lat_max=box["lat_max"],
                lon_min=box["lon_min"],
                lon_max=box["lon_max"],
                grid_rows=payload["grid_rows"],
                grid_cols=payload["grid_cols"],
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"bad area map json: {exc}") from None
        if len(payload.get("areas", [])) != amap.n_areas:
            raise ConfigurationError("area list inconsistent with grid dims")
        return amap


def area_of_point(lat: float, lon: float, amap: AreaMap) -> str:
    """Map a point to its containing cell's area id.

    Boundary points resolve to the cell with the smaller row/col index.
    Points outside the bounding box raise OutOfRegionError.
    """
    if not (amap.lat_min <= lat <= amap.lat_max and amap.lon_min <= lon <= amap.lon_max):
        raise OutOfRegionError(f"point ({lat}, {lon}) outside bounding box")
    row = _grid_index(lat - amap.lat_min, amap.cell_height, amap.grid_rows)
    col = _grid_index(lon - amap.lon_min, amap.cell_width, amap.grid_cols)
    return amap.area_id(row, col)


def _grid_index(offset: float, step: float, n: int) -> int:
    i = int(offset / step)
    # exact boundary between cells belongs to the lower-index cell
    if i > 0 and offset <= i * step:
        i -= 1
    return min(i, n - 1)


def centroid_distance_km(a: str, b: str, amap: AreaMap) -> float:
    """Great-circle (haversine) distance between two area centroids in km."""
    if a == NULL_AREA or b == NULL_AREA:
        raise DomainError("null area has no centroid")
    if a == b:
        return 0.0
    lat1, lon1 = amap.centroid(a)
    lat2, lon2 = amap.centroid(b)
    return haversine_km(lat1, lon1, lat2, lon2)


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlam = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))

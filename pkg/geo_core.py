"""
几何基础模块
提供球面距离、普查区块组(CBG)多边形判定以及基于均匀网格的半径查询索引
"""

import json
import math
import os
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from shapely.geometry import Point, Polygon, shape
import shapely
from shapely.validation import explain_validity

from loader import DataError, MissingInputError
from settings import ConfigError

# 获取日志记录器
logger = logging.getLogger(f'valuation.{__name__}')

EARTH_RADIUS_M = 6_371_000.0
MAX_ABS_LAT = 85.0
DEFAULT_CELL_SIZE_DEG = 0.01


class GeometryError(DataError):
    """几何数据错误（退化多边形、跨越日期变更线的查询等）"""
    pass


@dataclass(frozen=True)
class GeoPoint:
    """经纬度点（度）"""
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise GeometryError(f"Non-finite coordinate: ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise GeometryError(f"Coordinate out of range: ({self.lat}, {self.lon})")


def is_valid_coordinate(lat: float, lon: float) -> bool:
    return (math.isfinite(lat) and math.isfinite(lon)
            and -90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0)


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """球面大圆距离（米），球半径 6,371,000 m"""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def haversine_np(lat1, lon1, lat2, lon2) -> np.ndarray:
    """haversine_m 的向量化版本，参数可广播"""
    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


@dataclass
class CbgPolygon:
    """普查区块组多边形：一个外环加零个或多个洞，每个环首尾相同"""
    cbg_id: str
    rings: List[List[GeoPoint]]
    _geometry: Polygon = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.rings:
            raise GeometryError(f"CBG {self.cbg_id}: polygon without rings")
        for ring in self.rings:
            if len(ring) < 4:
                raise GeometryError(f"CBG {self.cbg_id}: ring has fewer than 4 vertices")
            if ring[0] != ring[-1]:
                raise GeometryError(f"CBG {self.cbg_id}: ring is not closed")
        outer = [(p.lon, p.lat) for p in self.rings[0]]
        holes = [[(p.lon, p.lat) for p in ring] for ring in self.rings[1:]]
        geometry = Polygon(outer, holes)
        if Polygon(outer).area == 0.0 or any(Polygon(h).area == 0.0 for h in holes):
            raise GeometryError(f"CBG {self.cbg_id}: degenerate ring (zero area)")
        if not geometry.is_valid:
            raise GeometryError(f"CBG {self.cbg_id}: invalid polygon ({explain_validity(geometry)})")
        shapely.prepare(geometry)
        self._geometry = geometry

    def __setstate__(self, state):
        # 传到工作进程后预处理状态丢失，重新准备
        self.__dict__.update(state)
        shapely.prepare(self._geometry)

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        """(min_lon, min_lat, max_lon, max_lat)"""
        return self._geometry.bounds

    def covers(self, p: GeoPoint) -> bool:
        return self._geometry.covers(Point(p.lon, p.lat))


def point_in_polygon(p: GeoPoint, poly: CbgPolygon) -> bool:
    """
    点是否在多边形内（经纬度平面，奇偶规则）

    落在边或顶点上的点视为在内部，洞内的点不在内部。
    """
    min_lon, min_lat, max_lon, max_lat = poly.bounds
    if not (min_lon <= p.lon <= max_lon and min_lat <= p.lat <= max_lat):
        return False
    return poly.covers(p)


def assign_cbg(p: GeoPoint, polygons: Sequence[CbgPolygon]) -> Optional[str]:
    """按加载顺序返回第一个包含该点的CBG编号，没有则返回None"""
    for poly in polygons:
        if point_in_polygon(p, poly):
            return poly.cbg_id
    return None


def load_cbg_polygons(path: str) -> List[CbgPolygon]:
    """
    从GeoJSON FeatureCollection加载CBG多边形

    每个要素需带有字符串属性 cbg_id，几何类型为 Polygon 或 MultiPolygon，
    MultiPolygon 拆成多个同编号的 CbgPolygon。

    Raises:
        MissingInputError: 文件不存在
        GeometryError: 几何不合法
        DataError: 结构不符合要求
    """
    if not os.path.exists(path):
        raise MissingInputError(f"File not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            collection = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"Invalid GeoJSON {path}: {e}")

    if collection.get('type') != 'FeatureCollection':
        raise DataError(f"{path}: expected a FeatureCollection")

    polygons: List[CbgPolygon] = []
    for i, feature in enumerate(collection.get('features', [])):
        props = feature.get('properties') or {}
        cbg_id = props.get('cbg_id')
        if not isinstance(cbg_id, str) or not cbg_id:
            raise DataError(f"{path}: feature {i} lacks a string cbg_id")
        geometry = feature.get('geometry') or {}
        kind = geometry.get('type')
        if kind == 'Polygon':
            parts = [geometry['coordinates']]
        elif kind == 'MultiPolygon':
            parts = geometry['coordinates']
        else:
            raise DataError(f"{path}: feature {cbg_id} has unsupported geometry {kind}")
        for part in parts:
            rings = [[GeoPoint(float(lat), float(lon)) for lon, lat in ring] for ring in part]
            polygons.append(CbgPolygon(cbg_id, rings))

    _check_outer_rings(polygons)
    logger.info(f"加载CBG多边形 {len(polygons)} 个，来自 {path}")
    return polygons


def _check_outer_rings(polygons: Sequence[CbgPolygon]) -> None:
    # 成对校验外环自相交（桌面规模数据）
    for poly in polygons:
        outer = shape({'type': 'LineString',
                       'coordinates': [(p.lon, p.lat) for p in poly.rings[0]]})
        if not outer.is_simple:
            raise GeometryError(f"CBG {poly.cbg_id}: self-intersecting outer ring")


def write_cbg_geojson(polygons: Iterable[Tuple[str, List[List[Tuple[float, float]]]]], path: str) -> None:
    """写出GeoJSON，polygons 为 (cbg_id, [ring[(lon, lat)]])"""
    features = []
    for cbg_id, rings in polygons:
        features.append({
            'type': 'Feature',
            'properties': {'cbg_id': cbg_id},
            'geometry': {'type': 'Polygon', 'coordinates': [[list(pt) for pt in ring] for ring in rings]},
        })
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump({'type': 'FeatureCollection', 'features': features}, f, indent=1, sort_keys=True)
        f.write('\n')


CellKey = Tuple[int, int]


class GridIndex:
    """
    均匀经纬度网格索引

    构建后不可变，可被多个工作进程并发只读查询。
    """

    def __init__(self, cell_size_deg: float, cells: Dict[CellKey, List[Tuple[str, GeoPoint]]]):
        self.cell_size_deg = cell_size_deg
        self.cells = cells
        # 每个网格的坐标数组，用于向量化距离过滤
        self._arrays: Dict[CellKey, Tuple[List[str], np.ndarray, np.ndarray]] = {}
        for key, members in cells.items():
            ids = [pid for pid, _ in members]
            lats = np.array([p.lat for _, p in members], dtype=float)
            lons = np.array([p.lon for _, p in members], dtype=float)
            self._arrays[key] = (ids, lats, lons)

    def __len__(self) -> int:
        return sum(len(members) for members in self.cells.values())

    def cell_of(self, lat: float, lon: float) -> CellKey:
        return (math.floor(lat / self.cell_size_deg), math.floor(lon / self.cell_size_deg))

    def query_with_distance(self, center: GeoPoint, r: float) -> List[Tuple[str, float]]:
        """返回 (id, 距离) 列表，按网格键和插入顺序排列"""
        if r < 0:
            raise ConfigError(f"Query radius must be >= 0, got {r}")
        if not self.cells:
            return []
        lat_lo, lat_hi, lon_lo, lon_hi = _bounding_box(center, r)
        size = self.cell_size_deg
        row_lo, row_hi = math.floor(lat_lo / size), math.floor(lat_hi / size)
        col_lo, col_hi = math.floor(lon_lo / size), math.floor(lon_hi / size)

        hits: List[Tuple[str, float]] = []
        for row in range(row_lo, row_hi + 1):
            for col in range(col_lo, col_hi + 1):
                packed = self._arrays.get((row, col))
                if packed is None:
                    continue
                ids, lats, lons = packed
                dist = haversine_np(center.lat, center.lon, lats, lons)
                for k in np.nonzero(dist <= r)[0]:
                    hits.append((ids[k], float(dist[k])))
        return hits


def _bounding_box(center: GeoPoint, r: float) -> Tuple[float, float, float, float]:
    """r圆的经纬度外包框（球面精确经度范围）"""
    d = r / EARTH_RADIUS_M
    dlat = math.degrees(d)
    lat_lo, lat_hi = center.lat - dlat, center.lat + dlat
    if lat_lo < -MAX_ABS_LAT or lat_hi > MAX_ABS_LAT:
        raise GeometryError(f"Radius query around {center} reaches beyond |lat| {MAX_ABS_LAT}")
    ratio = math.sin(d) / math.cos(math.radians(center.lat))
    if ratio >= 1.0:
        raise GeometryError(f"Radius {r} m too large for a grid query at {center}")
    # 留出微小余量，避免浮点舍入把边界点排除在候选网格外
    dlon = math.degrees(math.asin(ratio)) + 1e-9
    dlat += 1e-9
    lon_lo, lon_hi = center.lon - dlon, center.lon + dlon
    if lon_lo <= -180.0 or lon_hi >= 180.0:
        raise GeometryError(f"Radius query around {center} crosses the dateline")
    return center.lat - dlat, center.lat + dlat, lon_lo, lon_hi


def build_grid_index(points: Iterable[Tuple[str, GeoPoint]],
                     cell_size_deg: float = DEFAULT_CELL_SIZE_DEG) -> GridIndex:
    """
    构建网格索引

    Args:
        points: (id, GeoPoint) 序列
        cell_size_deg: 网格边长（度），必须为正

    Returns:
        GridIndex，每个点恰好落在一个网格中

    Raises:
        ConfigError: 网格边长非正
    """
    if not cell_size_deg > 0:
        raise ConfigError(f"cell_size_deg must be positive, got {cell_size_deg}")
    cells: Dict[CellKey, List[Tuple[str, GeoPoint]]] = {}
    count = 0
    for point_id, p in points:
        key = (math.floor(p.lat / cell_size_deg), math.floor(p.lon / cell_size_deg))
        cells.setdefault(key, []).append((point_id, p))
        count += 1
    logger.debug(f"网格索引构建完成：{count} 个点，{len(cells)} 个网格")
    return GridIndex(cell_size_deg, cells)


def radius_query(index: GridIndex, center: GeoPoint, r: float) -> Set[str]:
    """返回与中心点距离 ≤ r 米的全部点编号（含边界）"""
    return {point_id for point_id, _ in index.query_with_distance(center, r)}

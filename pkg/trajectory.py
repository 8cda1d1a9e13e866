"""
轨迹模块
解析原始定位记录(ping)，并把每个用户的记录流压缩为停留点(Stop)
"""

import math
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from geo_core import GeoPoint, EARTH_RADIUS_M
from loader import TableLoader, DataError, to_float
from parallel import chunked, resolve_n_jobs

# 获取日志记录器
logger = logging.getLogger(f'valuation.{__name__}')

PING_COLUMNS = ['user_id', 't', 'lat', 'lon', 'dwell_s', 'speed_mps', 'poi', 'platform']
STOP_COLUMNS = ['user_id', 'anchor_lat', 'anchor_lon', 'centroid_lat', 'centroid_lon',
                't_start', 't_end', 'n_pings', 'dow']

# 无法解析的行超过该比例时整个文件视为不可用
MAX_MALFORMED_FRACTION = 0.10

SECONDS_PER_DAY = 86400
# 1970-01-01 是星期四（0=周一）
_EPOCH_WEEKDAY = 3


@dataclass(frozen=True)
class Ping:
    """单条定位记录"""
    user_id: str
    t: float
    loc: GeoPoint
    dwell_s: Optional[float] = None
    speed_mps: Optional[float] = None
    poi: Optional[str] = None
    platform: Optional[str] = None


@dataclass
class PingStream:
    """单个用户按时间排序的定位记录，按列存储"""
    user_id: str
    t: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    dwell_s: np.ndarray = None
    speed_mps: np.ndarray = None
    poi: List[Optional[str]] = None
    platform: List[Optional[str]] = None

    def __post_init__(self):
        n = len(self.t)
        if self.dwell_s is None:
            self.dwell_s = np.full(n, np.nan)
        if self.speed_mps is None:
            self.speed_mps = np.full(n, np.nan)
        if self.poi is None:
            self.poi = [None] * n
        if self.platform is None:
            self.platform = [None] * n

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Ping]:
        for i in range(len(self.t)):
            yield Ping(
                user_id=self.user_id,
                t=float(self.t[i]),
                loc=GeoPoint(float(self.lat[i]), float(self.lon[i])),
                dwell_s=None if np.isnan(self.dwell_s[i]) else float(self.dwell_s[i]),
                speed_mps=None if np.isnan(self.speed_mps[i]) else float(self.speed_mps[i]),
                poi=self.poi[i],
                platform=self.platform[i],
            )

    @classmethod
    def from_pings(cls, pings: Sequence[Ping]) -> 'PingStream':
        """由Ping列表构建，按时间稳定排序"""
        if not pings:
            raise DataError("Cannot build a ping stream from zero pings")
        user_ids = {p.user_id for p in pings}
        if len(user_ids) != 1:
            raise DataError(f"A ping stream holds one user, got {sorted(user_ids)}")
        order = sorted(range(len(pings)), key=lambda i: pings[i].t)
        ordered = [pings[i] for i in order]
        return cls(
            user_id=ordered[0].user_id,
            t=np.array([p.t for p in ordered], dtype=float),
            lat=np.array([p.loc.lat for p in ordered], dtype=float),
            lon=np.array([p.loc.lon for p in ordered], dtype=float),
            dwell_s=np.array([np.nan if p.dwell_s is None else p.dwell_s for p in ordered], dtype=float),
            speed_mps=np.array([np.nan if p.speed_mps is None else p.speed_mps for p in ordered], dtype=float),
            poi=[p.poi for p in ordered],
            platform=[p.platform for p in ordered],
        )


@dataclass(frozen=True)
class Stop:
    """停留点：一段静止区间"""
    user_id: str
    anchor: GeoPoint
    centroid: GeoPoint
    t_start: float
    t_end: float
    n_pings: int
    day_of_week_local: int

    @property
    def duration_s(self) -> float:
        return self.t_end - self.t_start


@dataclass
class PingParseReport:
    """解析统计"""
    total_rows: int = 0
    valid_rows: int = 0
    malformed_rows: int = 0
    out_of_range_rows: int = 0
    users: int = 0


def parse_pings(path: str, report: Optional[PingParseReport] = None) -> Dict[str, PingStream]:
    """
    解析定位记录CSV

    表头为 user_id,t,lat,lon,dwell_s,speed_mps,poi,platform，后四列可为空。

    Args:
        path: CSV文件路径
        report: 可选的统计对象，解析后写入各类计数

    Returns:
        {user_id: PingStream}，按用户编号排序，每个流按时间非降序（同一时间按文件顺序）

    Raises:
        MissingInputError: 文件不存在
        DataError: 无法解析的行超过10%
    """
    report = report if report is not None else PingParseReport()
    frame = TableLoader().load(path, PING_COLUMNS[:4], PING_COLUMNS[4:])
    report.total_rows = len(frame)
    if frame.empty:
        logger.info(f"定位文件 {path} 没有数据行")
        return {}

    user_id = frame['user_id'].str.strip()
    t = to_float(frame['t'])
    lat = to_float(frame['lat'])
    lon = to_float(frame['lon'])
    dwell = to_float(frame['dwell_s'])
    speed = to_float(frame['speed_mps'])

    # 可选数值列非空却无法解析，同样视为格式错误
    bad_optional = ((frame['dwell_s'].str.strip() != '') & dwell.isna()) | \
                   ((frame['speed_mps'].str.strip() != '') & speed.isna())
    malformed = (user_id == '') | t.isna() | ~np.isfinite(t) | (t <= 0) | \
                lat.isna() | lon.isna() | bad_optional
    finite = np.isfinite(lat) & np.isfinite(lon)
    out_of_range = ~malformed & ~(finite & lat.between(-90, 90) & lon.between(-180, 180))

    report.malformed_rows = int(malformed.sum())
    report.out_of_range_rows = int(out_of_range.sum())
    if report.malformed_rows > MAX_MALFORMED_FRACTION * report.total_rows:
        raise DataError(
            f"{path}: {report.malformed_rows} of {report.total_rows} rows are malformed "
            f"(more than {MAX_MALFORMED_FRACTION:.0%})")
    if report.malformed_rows or report.out_of_range_rows:
        logger.warning(f"定位文件 {path}：跳过格式错误 {report.malformed_rows} 行，"
                       f"坐标越界 {report.out_of_range_rows} 行")

    keep = ~(malformed | out_of_range)
    table = pd.DataFrame({
        'user_id': user_id[keep],
        't': t[keep],
        'lat': lat[keep],
        'lon': lon[keep],
        'dwell_s': dwell[keep],
        'speed_mps': speed[keep],
        'poi': frame['poi'][keep].str.strip(),
        'platform': frame['platform'][keep].str.strip(),
        '_row': np.arange(len(frame))[keep.to_numpy()],
    })
    table = table.sort_values(['user_id', 't', '_row'], kind='mergesort')

    streams: Dict[str, PingStream] = {}
    for uid, group in table.groupby('user_id', sort=True):
        streams[uid] = PingStream(
            user_id=uid,
            t=group['t'].to_numpy(dtype=float),
            lat=group['lat'].to_numpy(dtype=float),
            lon=group['lon'].to_numpy(dtype=float),
            dwell_s=group['dwell_s'].to_numpy(dtype=float),
            speed_mps=group['speed_mps'].to_numpy(dtype=float),
            poi=[v or None for v in group['poi'].tolist()],
            platform=[v or None for v in group['platform'].tolist()],
        )
    report.valid_rows = int(keep.sum())
    report.users = len(streams)
    logger.info(f"解析定位记录 {report.valid_rows} 条，用户 {report.users} 个")
    return streams


def local_day_of_week(t: float, utc_offset_hours: float) -> int:
    """本地星期（0=周一 … 6=周日），固定时差，不处理夏令时"""
    local_day = math.floor((t + utc_offset_hours * 3600.0) / SECONDS_PER_DAY)
    return (local_day + _EPOCH_WEEKDAY) % 7


def detect_stops(stream: PingStream, r_stop: float = 50.0, min_stop_duration_s: float = 300.0,
                 max_gap_s: float = 43200.0, utc_offset_hours: float = -5.0) -> List[Stop]:
    """
    顺序锚点聚类检测停留点

    第一个未分配的记录作为锚点开启一个簇；后续记录与锚点距离 ≤ r_stop 且
    与上一个成员的时间间隔 ≤ max_gap_s 时加入，否则关闭该簇，
    时长 ≥ min_stop_duration_s 且至少2条记录时输出停留点，
    打断的记录开启新簇。

    Args:
        stream: 单个用户按时间排序的记录
        r_stop: 停留半径（米）
        min_stop_duration_s: 最短停留时长（秒）
        max_gap_s: 相邻成员最大时间间隔（秒）
        utc_offset_hours: 本地时差（小时）

    Returns:
        按时间排序、互不重叠的停留点列表
    """
    if not isinstance(stream, PingStream):
        stream = PingStream.from_pings(list(stream))
    n = len(stream)
    stops: List[Stop] = []
    if n == 0:
        return stops

    t = stream.t
    lat_rad = np.radians(stream.lat)
    lon_rad = np.radians(stream.lon)
    cos_lat = np.cos(lat_rad)

    start = 0
    while start < n:
        a_lat, a_lon, a_cos = lat_rad[start], lon_rad[start], cos_lat[start]
        end = start + 1
        while end < n:
            if t[end] - t[end - 1] > max_gap_s:
                break
            h = math.sin((lat_rad[end] - a_lat) / 2) ** 2 + \
                a_cos * cos_lat[end] * math.sin((lon_rad[end] - a_lon) / 2) ** 2
            if 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h))) > r_stop:
                break
            end += 1
        # 成员为 [start, end)
        count = end - start
        if count >= 2 and t[end - 1] - t[start] >= min_stop_duration_s:
            stops.append(_make_stop(stream, start, end, utc_offset_hours))
        start = end
    return stops


def _make_stop(stream: PingStream, start: int, end: int, utc_offset_hours: float) -> Stop:
    t_start = float(stream.t[start])
    return Stop(
        user_id=stream.user_id,
        anchor=GeoPoint(float(stream.lat[start]), float(stream.lon[start])),
        centroid=GeoPoint(float(np.mean(stream.lat[start:end])), float(np.mean(stream.lon[start:end]))),
        t_start=t_start,
        t_end=float(stream.t[end - 1]),
        n_pings=end - start,
        day_of_week_local=local_day_of_week(t_start, utc_offset_hours),
    )


def _detect_batch(streams: List[PingStream], params: dict) -> List[List[Stop]]:
    return [detect_stops(s, **params) for s in streams]


def detect_all_stops(streams: Dict[str, PingStream], r_stop: float, min_stop_duration_s: float,
                     max_gap_s: float, utc_offset_hours: float,
                     n_jobs: Optional[int] = None) -> Dict[str, List[Stop]]:
    """并行对所有用户检测停留点，结果按用户编号排序"""
    params = dict(r_stop=r_stop, min_stop_duration_s=min_stop_duration_s,
                  max_gap_s=max_gap_s, utc_offset_hours=utc_offset_hours)
    user_ids = sorted(streams)
    batches = chunked([streams[u] for u in user_ids], n_jobs)
    results = Parallel(n_jobs=resolve_n_jobs(n_jobs))(
        delayed(_detect_batch)(batch, params) for batch in batches)
    flat = [stops for batch in results for stops in batch]
    by_user = dict(zip(user_ids, flat))
    total = sum(len(s) for s in flat)
    logger.info(f"停留点检测完成：{len(user_ids)} 个用户，{total} 个停留点")
    return by_user


def write_stops_csv(stops_by_user: Dict[str, List[Stop]], path: str) -> None:
    """持久化停留点，供流水线中断后重启"""
    records = []
    for uid in sorted(stops_by_user):
        for s in stops_by_user[uid]:
            records.append((s.user_id, s.anchor.lat, s.anchor.lon, s.centroid.lat, s.centroid.lon,
                            s.t_start, s.t_end, s.n_pings, s.day_of_week_local))
    frame = pd.DataFrame.from_records(records, columns=STOP_COLUMNS)
    TableLoader().write(frame, path)


def read_stops_csv(path: str) -> Dict[str, List[Stop]]:
    frame = TableLoader().load(path, STOP_COLUMNS)
    numeric = {c: to_float(frame[c]) for c in STOP_COLUMNS[1:]}
    if any(numeric[c].isna().any() for c in numeric):
        raise DataError(f"{path}: non-numeric values in stop table")
    stops: Dict[str, List[Stop]] = {}
    user_ids = frame['user_id'].str.strip().tolist()
    for i, uid in enumerate(user_ids):
        stops.setdefault(uid, []).append(Stop(
            user_id=uid,
            anchor=GeoPoint(numeric['anchor_lat'].iat[i], numeric['anchor_lon'].iat[i]),
            centroid=GeoPoint(numeric['centroid_lat'].iat[i], numeric['centroid_lon'].iat[i]),
            t_start=float(numeric['t_start'].iat[i]),
            t_end=float(numeric['t_end'].iat[i]),
            n_pings=int(numeric['n_pings'].iat[i]),
            day_of_week_local=int(numeric['dow'].iat[i]),
        ))
    logger.info(f"读取停留点 {len(user_ids)} 个，来自 {path}")
    return stops

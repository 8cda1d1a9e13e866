"""
居住地推断模块
从夜间停留点推断用户居住地，并附加居住地所在CBG的人口统计特征
"""

import math
import logging
from dataclasses import dataclass, replace
from datetime import date, timedelta
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from geo_core import GeoPoint, CbgPolygon, assign_cbg, haversine_m
from loader import TableLoader, DataError, to_float
from parallel import chunked, resolve_n_jobs
from trajectory import Stop, SECONDS_PER_DAY

# 获取日志记录器
logger = logging.getLogger(f'valuation.{__name__}')

# CSV列名 -> 特征字段短名
DEMOGRAPHIC_COLUMNS = {
    'median_household_income': 'income',
    'median_age': 'age',
    'race_white': 'white',
    'race_black': 'black',
    'race_asian': 'asian',
    'race_hispanic': 'hispanic',
    'share_bachelors_or_higher': 'bachelors',
    'unemployment_rate': 'unemployment',
    'commute_share': 'commute_share',
    'population': 'population',
}
RACE_FIELDS = ('white', 'black', 'asian', 'hispanic')
# 访客平均时使用的字段（人口数只作为静态特征）
AVERAGED_FIELDS = ('income', 'age', 'white', 'black', 'asian', 'hispanic',
                   'bachelors', 'unemployment', 'commute_share')
STATIC_FIELDS = AVERAGED_FIELDS + ('population',)
_SHARE_FIELDS = RACE_FIELDS + ('bachelors', 'unemployment', 'commute_share')

HOME_COLUMNS = ['user_id', 'home_lat', 'home_lon', 'n_nights', 'home_cbg']

NIGHT_START_HOUR = 21
NIGHT_END_HOUR = 7
_EPOCH = date(1970, 1, 1)


@dataclass(frozen=True)
class CbgDemographics:
    """CBG人口统计特征，缺失值为None，绝不以0代替"""
    cbg_id: str
    median_household_income: Optional[float] = None
    median_age: Optional[float] = None
    race_shares: Tuple[Tuple[str, Optional[float]], ...] = ()
    share_bachelors_or_higher: Optional[float] = None
    unemployment_rate: Optional[float] = None
    population: Optional[float] = None
    commute_share: Optional[float] = None

    def __post_init__(self):
        for name in _SHARE_FIELDS:
            value = self.value(name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise DataError(f"CBG {self.cbg_id}: {name} = {value} outside [0, 1]")
        shares = [v for _, v in self.race_shares if v is not None]
        if sum(shares) > 1.0 + 1e-9:
            raise DataError(f"CBG {self.cbg_id}: race shares sum to {sum(shares)} > 1")
        for name in ('income', 'population', 'age'):
            value = self.value(name)
            if value is not None and value < 0:
                raise DataError(f"CBG {self.cbg_id}: {name} = {value} is negative")

    def value(self, name: str) -> Optional[float]:
        """按字段短名取值"""
        if name in RACE_FIELDS:
            return dict(self.race_shares).get(name)
        attribute = {
            'income': 'median_household_income',
            'age': 'median_age',
            'bachelors': 'share_bachelors_or_higher',
            'unemployment': 'unemployment_rate',
            'population': 'population',
            'commute_share': 'commute_share',
        }[name]
        return getattr(self, attribute)

    def vector(self, names: Sequence[str]) -> np.ndarray:
        """按字段顺序输出向量，缺失值为NaN"""
        return np.array([np.nan if self.value(n) is None else self.value(n) for n in names], dtype=float)


@dataclass(frozen=True)
class HomeProfile:
    """用户居住地画像"""
    user_id: str
    home: GeoPoint
    n_nights: int
    home_cbg: Optional[str] = None
    demographics: Optional[CbgDemographics] = None


@dataclass
class DropReport:
    """下游聚合中被排除用户的计数"""
    users_total: int = 0
    no_home: int = 0
    no_cbg: int = 0
    no_demographics: int = 0

    def merge(self, other: 'DropReport') -> None:
        self.users_total += other.users_total
        self.no_home += other.no_home
        self.no_cbg += other.no_cbg
        self.no_demographics += other.no_demographics

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'reason': ['users_total', 'no_home', 'no_cbg', 'no_demographics'],
            'count': [self.users_total, self.no_home, self.no_cbg, self.no_demographics],
        })


def load_demographics(path: str) -> Dict[str, CbgDemographics]:
    """
    加载以 cbg_id 为键的人口统计CSV

    Raises:
        MissingInputError: 文件不存在
        DataError: 重复编号、取值越界或无法解析
    """
    frame = TableLoader().load(path, ['cbg_id'] + list(DEMOGRAPHIC_COLUMNS))
    table: Dict[str, CbgDemographics] = {}
    values = {c: to_float(frame[c]) for c in DEMOGRAPHIC_COLUMNS}
    for c in DEMOGRAPHIC_COLUMNS:
        unparsable = (frame[c].str.strip() != '') & values[c].isna()
        if unparsable.any():
            raise DataError(f"{path}: unparsable values in column {c}")

    def cell(column: str, i: int) -> Optional[float]:
        v = values[column].iat[i]
        return None if pd.isna(v) else float(v)

    for i, cbg_id in enumerate(frame['cbg_id'].str.strip().tolist()):
        if not cbg_id:
            raise DataError(f"{path}: row {i + 2} has an empty cbg_id")
        if cbg_id in table:
            raise DataError(f"{path}: duplicate cbg_id {cbg_id}")
        table[cbg_id] = CbgDemographics(
            cbg_id=cbg_id,
            median_household_income=cell('median_household_income', i),
            median_age=cell('median_age', i),
            race_shares=tuple((short, cell(f'race_{short}', i)) for short in RACE_FIELDS),
            share_bachelors_or_higher=cell('share_bachelors_or_higher', i),
            unemployment_rate=cell('unemployment_rate', i),
            population=cell('population', i),
            commute_share=cell('commute_share', i),
        )
    logger.info(f"加载人口统计 {len(table)} 个CBG，来自 {path}")
    return table


def night_label_date(night_index: int) -> date:
    return _EPOCH + timedelta(days=night_index)


def qualifying_night_stops(stops: Sequence[Stop], utc_offset_hours: float,
                           home_nights: Sequence[int] = (1, 2, 3, 4)) -> List[Tuple[date, Stop]]:
    """
    筛选与夜间窗口（本地21:00–次日07:00）相交的停留点

    夜晚标签为窗口21:00开始时的本地日期，只保留起始日为 home_nights
    （默认周二至周五，0=周一）的夜晚。跨越多个夜晚的停留点对每个夜晚各输出一次。

    Returns:
        [(夜晚标签日期, Stop)]，按停留点时间顺序
    """
    offset = utc_offset_hours * 3600.0
    allowed = set(home_nights)
    window = (24 - NIGHT_START_HOUR + NIGHT_END_HOUR) * 3600
    result: List[Tuple[date, Stop]] = []
    for stop in stops:
        ts = stop.t_start + offset
        te = stop.t_end + offset
        first = math.floor(ts / SECONDS_PER_DAY) - 1
        last = math.floor(te / SECONDS_PER_DAY)
        for night in range(first, last + 1):
            ws = night * SECONDS_PER_DAY + NIGHT_START_HOUR * 3600
            we = ws + window
            # 窗口为左闭右开 [21:00, 07:00)
            if ts < we and te >= ws and (night + 3) % 7 in allowed:
                result.append((night_label_date(night), stop))
    return result


@dataclass
class _NightCluster:
    anchor: GeoPoint
    anchor_time: float
    stops: List[Stop]
    nights: set
    duration_s: float = 0.0


def infer_home(night_stops: Sequence[Tuple[date, Stop]], r_home: float = 100.0,
               min_nights: int = 3) -> Optional[HomeProfile]:
    """
    推断居住地

    按时间顺序对夜间停留点质心做贪心锚点聚类（半径 r_home）：每个停留点加入第一个
    锚点距离 ≤ r_home 的簇，否则自成新簇。覆盖不同夜晚最多的簇胜出，
    并列时取停留总时长更长者，再并列取锚点时间更早者。

    Returns:
        HomeProfile；胜出簇覆盖的夜晚少于 min_nights 时返回None
    """
    if not night_stops:
        return None
    ordered = sorted(enumerate(night_stops), key=lambda item: (item[1][1].t_start, item[0]))
    clusters: List[_NightCluster] = []
    placement: Dict[int, _NightCluster] = {}
    for _, (label, stop) in ordered:
        key = id(stop)
        cluster = placement.get(key)
        if cluster is None:
            for candidate in clusters:
                if haversine_m(candidate.anchor, stop.centroid) <= r_home:
                    cluster = candidate
                    break
            if cluster is None:
                cluster = _NightCluster(anchor=stop.centroid, anchor_time=stop.t_start, stops=[], nights=set())
                clusters.append(cluster)
            cluster.stops.append(stop)
            cluster.duration_s += stop.duration_s
            placement[key] = cluster
        cluster.nights.add(label)

    winner = min(clusters, key=lambda c: (-len(c.nights), -c.duration_s, c.anchor_time))
    if len(winner.nights) < min_nights:
        return None
    home = GeoPoint(float(np.mean([s.centroid.lat for s in winner.stops])),
                    float(np.mean([s.centroid.lon for s in winner.stops])))
    return HomeProfile(user_id=winner.stops[0].user_id, home=home, n_nights=len(winner.nights))


def attach_demographics(profile: HomeProfile, polygons: Sequence[CbgPolygon],
                        demo_table: Dict[str, CbgDemographics],
                        report: Optional[DropReport] = None) -> HomeProfile:
    """附加居住地CBG编号与人口统计特征，无法附加的用户计入剔除报告"""
    cbg_id = assign_cbg(profile.home, polygons)
    demographics = demo_table.get(cbg_id) if cbg_id is not None else None
    if report is not None:
        if cbg_id is None:
            report.no_cbg += 1
        elif demographics is None:
            report.no_demographics += 1
    return replace(profile, home_cbg=cbg_id, demographics=demographics)


def _infer_batch(batch: List[Tuple[str, List[Stop]]], polygons, demo_table, params: dict):
    report = DropReport()
    homes: List[HomeProfile] = []
    for user_id, stops in batch:
        report.users_total += 1
        nights = qualifying_night_stops(stops, params['utc_offset_hours'], params['home_nights'])
        profile = infer_home(nights, params['r_home'], params['min_nights'])
        if profile is None:
            report.no_home += 1
            continue
        homes.append(attach_demographics(profile, polygons, demo_table, report))
    return homes, report


def infer_all_homes(stops_by_user: Dict[str, List[Stop]], polygons: Sequence[CbgPolygon],
                    demo_table: Dict[str, CbgDemographics], r_home: float, min_nights: int,
                    home_nights: Sequence[int], utc_offset_hours: float,
                    n_jobs: Optional[int] = None) -> Tuple[Dict[str, HomeProfile], DropReport]:
    """并行推断全部用户的居住地，无法推断的用户不出现在结果中"""
    params = dict(r_home=r_home, min_nights=min_nights, home_nights=tuple(home_nights),
                  utc_offset_hours=utc_offset_hours)
    items = [(uid, stops_by_user[uid]) for uid in sorted(stops_by_user)]
    results = Parallel(n_jobs=resolve_n_jobs(n_jobs))(
        delayed(_infer_batch)(batch, polygons, demo_table, params) for batch in chunked(items, n_jobs))
    homes: Dict[str, HomeProfile] = {}
    report = DropReport()
    for batch_homes, batch_report in results:
        report.merge(batch_report)
        for profile in batch_homes:
            homes[profile.user_id] = profile
    logger.info(f"居住地推断完成：{len(homes)}/{report.users_total} 个用户，"
                f"无居住地 {report.no_home}，无CBG {report.no_cbg}，无人口统计 {report.no_demographics}")
    return homes, report


def write_homes_csv(homes: Dict[str, HomeProfile], path: str) -> None:
    records = [(h.user_id, h.home.lat, h.home.lon, h.n_nights, h.home_cbg or '')
               for _, h in sorted(homes.items())]
    TableLoader().write(pd.DataFrame.from_records(records, columns=HOME_COLUMNS), path)


def read_homes_csv(path: str, demo_table: Dict[str, CbgDemographics]) -> Dict[str, HomeProfile]:
    """读取居住地表，并按CBG编号重新附加人口统计特征"""
    frame = TableLoader().load(path, HOME_COLUMNS)
    lat = to_float(frame['home_lat'])
    lon = to_float(frame['home_lon'])
    nights = to_float(frame['n_nights'])
    if lat.isna().any() or lon.isna().any() or nights.isna().any():
        raise DataError(f"{path}: non-numeric values in home table")
    homes: Dict[str, HomeProfile] = {}
    for i, uid in enumerate(frame['user_id'].str.strip().tolist()):
        cbg_id = frame['home_cbg'].iat[i].strip() or None
        homes[uid] = HomeProfile(
            user_id=uid,
            home=GeoPoint(float(lat.iat[i]), float(lon.iat[i])),
            n_nights=int(nights.iat[i]),
            home_cbg=cbg_id,
            demographics=demo_table.get(cbg_id) if cbg_id else None,
        )
    return homes

"""
合成城市生成模块
生成CBG网格、人口统计、用户轨迹定位记录与房产价格，并记录全部真值供验证
"""

import math
import os
import logging
from dataclasses import dataclass, field
from datetime import date
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from geo_core import GeoPoint, EARTH_RADIUS_M, build_grid_index, write_cbg_geojson
from home_census import DEMOGRAPHIC_COLUMNS
from loader import TableLoader
from seeds import rng_for
from settings import RunConfig, ConfigError
from trajectory import PING_COLUMNS, SECONDS_PER_DAY

# 获取日志记录器
logger = logging.getLogger(f'valuation.{__name__}')

# 每米对应的纬度
DEG_PER_M = 180.0 / (math.pi * EARTH_RADIUS_M)
TRAVEL_SPEED_MPS = 6.0
# 活动必须在此本地时刻前结束并返家
LATEST_RETURN_S = 20.75 * 3600

RESIDENTIAL_TYPES = ('condo', 'apartment', 'single_family', 'townhouse')
RESIDENTIAL_TYPE_P = (0.25, 0.25, 0.35, 0.15)
COMMERCIAL_TYPES = ('office', 'restaurant', 'hotel', 'vacant', 'school', 'church')
COMMERCIAL_TYPE_P = (0.35, 0.25, 0.10, 0.15, 0.10, 0.05)

SYNTH_FILES = {
    'pings': 'pings.csv',
    'polygons': 'cbg.geojson',
    'demographics': 'demographics.csv',
    'properties': 'properties.csv',
    'truth_homes': 'truth_homes.csv',
    'truth_prices': 'truth_prices.csv',
}


@dataclass(frozen=True)
class PriceCoefficients:
    """植入的价格函数系数：住宅依赖访客收入，商业依赖工作日客流"""
    res_base: float = 60000.0
    res_beds: float = 18000.0
    res_baths: float = 12000.0
    res_sqft: float = 95.0
    res_cbg_income: float = 0.8
    res_visitor_income: float = 2.2
    com_base: float = 120000.0
    com_sqft: float = 60.0
    com_cbg_income: float = 0.4
    com_weekday_visitors: float = 9000.0
    vacant_factor: float = 0.1
    price_floor: float = 5000.0


@dataclass(frozen=True)
class SyntheticCitySpec:
    """合成城市参数"""
    seed: int = 42
    n_users: int = 500
    n_properties: int = 2000
    n_days: int = 14
    grid: int = 6
    cell_deg: float = 0.01
    origin_lat: float = 38.88
    origin_lon: float = -77.06
    n_hotspots: int = 24
    jitter_m: float = 20.0
    noise_std: float = 25000.0
    commercial_share: float = 0.3
    start_date: str = '2024-01-01'
    utc_offset_hours: float = -5.0
    ping_interval_s: float = 300.0
    radius_m: float = 500.0
    trips: bool = True
    coefficients: PriceCoefficients = field(default_factory=PriceCoefficients)

    def __post_init__(self):
        if self.n_users < 1 or self.n_properties < 1:
            raise ConfigError("Synthetic city needs at least one user and one property")
        if self.n_days < 1 or self.grid < 1 or self.n_hotspots < 1:
            raise ConfigError("synth_days, synth_grid and synth_hotspots must be >= 1")
        if not 0 < self.ping_interval_s <= 300:
            raise ConfigError("Ping cadence must be within (0, 300] seconds")
        if self.jitter_m < 0 or self.noise_std < 0:
            raise ConfigError("synth_jitter_m and synth_noise_std must be >= 0")
        if not 0 <= self.commercial_share <= 1:
            raise ConfigError("synth_commercial_share must be in [0, 1]")
        try:
            date.fromisoformat(self.start_date)
        except ValueError:
            raise ConfigError(f"Invalid synth_start_date: {self.start_date}")

    @classmethod
    def from_config(cls, config: RunConfig) -> 'SyntheticCitySpec':
        return cls(seed=config.seed, n_users=config.synth_users, n_properties=config.synth_properties,
                   n_days=config.synth_days, grid=config.synth_grid, n_hotspots=config.synth_hotspots,
                   jitter_m=config.synth_jitter_m, noise_std=config.synth_noise_std,
                   commercial_share=config.synth_commercial_share, start_date=config.synth_start_date,
                   utc_offset_hours=config.utc_offset_hours, radius_m=config.radius_m)

    def start_epoch(self) -> float:
        """起始日本地零点的UTC时间戳"""
        days = (date.fromisoformat(self.start_date) - date(1970, 1, 1)).days
        return days * SECONDS_PER_DAY - self.utc_offset_hours * 3600.0

    def start_weekday(self) -> int:
        return date.fromisoformat(self.start_date).weekday()

    def span_deg(self) -> float:
        return self.grid * self.cell_deg


@dataclass
class Hotspot:
    name: str
    lat: float
    lon: float
    weekday_weight: float
    weekend_weight: float
    income: float


@dataclass
class UserPlan:
    """单个用户的真值：居住地与计划停留"""
    user_id: str
    home_lat: float
    home_lon: float
    home_cbg: str
    # 每行 (t0, t1, lat0, lon0, lat1, lon1, hotspot)，hotspot=-1 为居住地，-2 为出行
    segments: np.ndarray


@dataclass
class SyntheticCity:
    spec: SyntheticCitySpec
    cbg_ids: List[str]
    demographics: pd.DataFrame
    hotspots: List[Hotspot]
    users: List[UserPlan]
    properties: pd.DataFrame
    truth_prices: pd.DataFrame
    paths: Dict[str, str] = field(default_factory=dict)


def _cbg_id(row: int, col: int) -> str:
    return f"11001{row:03d}{col:03d}1"


def _cbg_of(spec: SyntheticCitySpec, lat: float, lon: float) -> Tuple[int, int]:
    row = min(spec.grid - 1, max(0, int(math.floor((lat - spec.origin_lat) / spec.cell_deg))))
    col = min(spec.grid - 1, max(0, int(math.floor((lon - spec.origin_lon) / spec.cell_deg))))
    return row, col


def _make_demographics(spec: SyntheticCitySpec, cbg_ids: List[str]) -> pd.DataFrame:
    rng = rng_for(spec.seed, 'demographics')
    records = []
    for cbg_id in cbg_ids:
        income = float(round(math.exp(rng.normal(math.log(85000.0), 0.45))))
        bachelors = float(np.clip(0.15 + 0.5 * (income - 40000.0) / 160000.0 + rng.normal(0, 0.05), 0.05, 0.95))
        races = rng.dirichlet([2.0, 2.0, 1.0, 1.5]) * rng.uniform(0.9, 0.99)
        records.append({
            'cbg_id': cbg_id,
            'median_household_income': income,
            'median_age': round(float(rng.uniform(28.0, 48.0)), 1),
            'race_white': float(races[0]),
            'race_black': float(races[1]),
            'race_asian': float(races[2]),
            'race_hispanic': float(races[3]),
            'share_bachelors_or_higher': bachelors,
            'unemployment_rate': float(np.clip(0.12 - 0.06 * income / 150000.0 + rng.normal(0, 0.01), 0.01, 0.2)),
            'population': float(rng.integers(600, 3001)),
            'commute_share': float(rng.uniform(0.2, 0.7)),
        })
    return pd.DataFrame.from_records(records, columns=['cbg_id'] + list(DEMOGRAPHIC_COLUMNS))


def _make_hotspots(spec: SyntheticCitySpec, incomes: np.ndarray) -> List[Hotspot]:
    rng = rng_for(spec.seed, 'hotspots')
    span = spec.span_deg()
    hotspots = []
    for h in range(spec.n_hotspots):
        lat = spec.origin_lat + rng.uniform(0.05, 0.95) * span
        lon = spec.origin_lon + rng.uniform(0.05, 0.95) * span
        row, col = _cbg_of(spec, lat, lon)
        hotspots.append(Hotspot(name=f"hotspot_{h:02d}", lat=lat, lon=lon,
                                weekday_weight=float(rng.lognormal(0.0, 0.8)),
                                weekend_weight=float(rng.lognormal(0.0, 0.8)),
                                income=float(incomes[row * spec.grid + col])))
    return hotspots


def _offset(rng: np.random.Generator, lat: float, lon: float, sigma_m: float) -> Tuple[float, float]:
    dlat, dlon = rng.normal(0.0, sigma_m, size=2) * DEG_PER_M
    return lat + dlat, lon + dlon / math.cos(math.radians(lat))


def _distance_m(lat0: float, lon0: float, lat1: float, lon1: float) -> float:
    dy = (lat1 - lat0) / DEG_PER_M
    dx = (lon1 - lon0) / DEG_PER_M * math.cos(math.radians((lat0 + lat1) / 2))
    return math.hypot(dx, dy)


def _plan_user(spec: SyntheticCitySpec, i: int, cbg_ids: List[str], incomes: np.ndarray,
               populations: np.ndarray, hotspots: List[Hotspot]) -> UserPlan:
    rng = rng_for(spec.seed, 'user', i)
    cell = int(rng.choice(len(cbg_ids), p=populations / populations.sum()))
    row, col = divmod(cell, spec.grid)
    inset = 0.15 * spec.cell_deg
    home_lat = spec.origin_lat + row * spec.cell_deg + rng.uniform(inset, spec.cell_deg - inset)
    home_lon = spec.origin_lon + col * spec.cell_deg + rng.uniform(inset, spec.cell_deg - inset)
    income = incomes[cell]

    weekday_w = np.array([h.weekday_weight for h in hotspots])
    weekend_w = np.array([h.weekend_weight for h in hotspots])
    affinity = np.exp(-np.abs(np.log(income) - np.log([h.income for h in hotspots])) / 0.35)
    work = int(rng.choice(len(hotspots), p=weekday_w / weekday_w.sum()))
    work_lat, work_lon = _offset(rng, hotspots[work].lat, hotspots[work].lon, 60.0)

    t0 = spec.start_epoch()
    segments: List[Tuple[float, float, float, float, float, float, int]] = []
    here = (home_lat, home_lon)
    free_from = t0

    def move(t: float, dest: Tuple[float, float]) -> float:
        travel = _distance_m(here[0], here[1], dest[0], dest[1]) / TRAVEL_SPEED_MPS
        if travel > 0:
            segments.append((t, t + travel, here[0], here[1], dest[0], dest[1], -2))
        return t + travel

    for k in range(spec.n_days if spec.trips else 0):
        day_start = t0 + k * SECONDS_PER_DAY
        dow = (spec.start_weekday() + k) % 7
        weights = weekday_w if dow < 5 else weekend_w
        activities: List[Tuple[int, float, float, float]] = []
        if dow < 5 and rng.random() < 0.85:
            activities.append((work, work_lat, work_lon, rng.uniform(7.5, 9.0) * 3600))
        extras = []
        for _ in range(int(rng.integers(0, 2) if dow < 5 else rng.integers(1, 4))):
            w = weights * affinity
            h = int(rng.choice(len(hotspots), p=w / w.sum()))
            extras.append((h, rng.uniform(45, 120) * 60))
        for _ in range(int(rng.integers(0, 3))):
            h = int(rng.choice(len(hotspots), p=weights / weights.sum()))
            extras.append((h, rng.uniform(10, 25) * 60))
        for idx in rng.permutation(len(extras)):
            h, duration = extras[idx]
            lat, lon = _offset(rng, hotspots[h].lat, hotspots[h].lon, 40.0)
            activities.append((h, lat, lon, duration))

        t = day_start + 7 * 3600 + rng.uniform(0, 3600)
        segments.append((free_from, t, home_lat, home_lon, home_lat, home_lon, -1))
        for h, lat, lon, duration in activities:
            arrive = t + _distance_m(here[0], here[1], lat, lon) / TRAVEL_SPEED_MPS
            back = _distance_m(lat, lon, home_lat, home_lon) / TRAVEL_SPEED_MPS
            if arrive + duration + back > day_start + LATEST_RETURN_S:
                break
            t = move(t, (lat, lon))
            here = (lat, lon)
            segments.append((t, t + duration, lat, lon, lat, lon, h))
            t += duration
        t = move(t, (home_lat, home_lon))
        here = (home_lat, home_lon)
        free_from = t

    end = t0 + spec.n_days * SECONDS_PER_DAY
    segments.append((free_from, end, home_lat, home_lon, home_lat, home_lon, -1))
    return UserPlan(user_id=f"u{i:05d}", home_lat=home_lat, home_lon=home_lon,
                    home_cbg=cbg_ids[cell], segments=np.array(segments, dtype=float))


def _emit_pings(spec: SyntheticCitySpec, i: int, plan: UserPlan, hotspots: List[Hotspot]) -> pd.DataFrame:
    """按固定间隔在计划轨迹上采样定位记录，并加入各轴 σ = jitter/√2 的高斯噪声"""
    rng = rng_for(spec.seed, 'pings', i)
    seg = plan.segments
    t_begin, t_end = seg[0, 0], seg[-1, 1]
    times = t_begin + rng.uniform(0, spec.ping_interval_s) + np.arange(
        0, t_end - t_begin, spec.ping_interval_s)
    times = times[times < t_end]
    k = np.clip(np.searchsorted(seg[:, 0], times, side='right') - 1, 0, len(seg) - 1)
    length = seg[k, 1] - seg[k, 0]
    frac = np.where(length > 0, (times - seg[k, 0]) / np.where(length > 0, length, 1.0), 0.0)
    lat = seg[k, 2] + frac * (seg[k, 4] - seg[k, 2])
    lon = seg[k, 3] + frac * (seg[k, 5] - seg[k, 3])
    sigma = spec.jitter_m / math.sqrt(2.0)
    lat = lat + rng.normal(0.0, sigma, len(times)) * DEG_PER_M
    lon = lon + rng.normal(0.0, sigma, len(times)) * DEG_PER_M / np.cos(np.radians(lat))
    kind = seg[k, 6].astype(int)
    return pd.DataFrame({
        'user_id': plan.user_id,
        't': np.round(times).astype(np.int64),
        'lat': np.round(lat, 7),
        'lon': np.round(lon, 7),
        'dwell_s': '',
        'speed_mps': np.where(kind == -2, TRAVEL_SPEED_MPS, 0.0),
        'poi': [hotspots[h].name if h >= 0 else '' for h in kind],
        'platform': 'synth',
    }, columns=PING_COLUMNS)


def _make_properties(spec: SyntheticCitySpec, hotspots: List[Hotspot]) -> pd.DataFrame:
    rng = rng_for(spec.seed, 'properties')
    span = spec.span_deg()
    lo_lat, hi_lat = spec.origin_lat + 0.001, spec.origin_lat + span - 0.001
    lo_lon, hi_lon = spec.origin_lon + 0.001, spec.origin_lon + span - 0.001
    weights = np.array([h.weekday_weight for h in hotspots])
    records = []
    for j in range(spec.n_properties):
        if rng.random() < spec.commercial_share:
            raw = str(rng.choice(COMMERCIAL_TYPES, p=COMMERCIAL_TYPE_P))
            h = hotspots[int(rng.choice(len(hotspots), p=weights / weights.sum()))]
            lat, lon = _offset(rng, h.lat, h.lon, 250.0)
            beds = 0.0
            baths = 0.0 if raw == 'vacant' else float(rng.integers(1, 6))
            sqft = float(round(rng.uniform(3000, 20000) if raw == 'vacant' else rng.uniform(1500, 25000)))
        else:
            raw = str(rng.choice(RESIDENTIAL_TYPES, p=RESIDENTIAL_TYPE_P))
            lat = rng.uniform(lo_lat, hi_lat)
            lon = rng.uniform(lo_lon, hi_lon)
            beds = float(rng.integers(1, 6))
            baths = float(rng.integers(1, int(beds) + 1))
            sqft = float(round(max(350.0, 400 + 350 * beds + rng.normal(0, 150))))
        records.append({'property_id': f"p{j:05d}", 'lat': float(np.clip(lat, lo_lat, hi_lat)),
                        'lon': float(np.clip(lon, lo_lon, hi_lon)), 'beds': beds, 'baths': baths,
                        'sqft': sqft, 'kind': raw})
    return pd.DataFrame.from_records(records)


def _visitor_truth(spec: SyntheticCitySpec, users: List[UserPlan], properties: pd.DataFrame,
                   incomes: Dict[str, float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    由计划停留计算真值：工作日（周一至周五）平均非常住访客数与访客平均居住地收入

    Returns:
        (weekday_visitors, visitor_income)；没有访客时收入为NaN
    """
    stays = []
    for u, plan in enumerate(users):
        for t0, _, lat, lon, _, _, h in plan.segments:
            if h >= 0:
                dow = int((math.floor((t0 + spec.utc_offset_hours * 3600) / SECONDS_PER_DAY) + 3) % 7)
                stays.append((u, lat, lon, dow))
    stay_index = build_grid_index(((s, GeoPoint(lat, lon)) for s, (_, lat, lon, _) in enumerate(stays)))
    home_index = build_grid_index(((u, GeoPoint(p.home_lat, p.home_lon)) for u, p in enumerate(users)))
    user_income = np.array([incomes[p.home_cbg] for p in users])

    weekday = np.zeros(len(properties))
    visitor_income = np.full(len(properties), np.nan)
    for j, (lat, lon) in enumerate(zip(properties['lat'], properties['lon'])):
        center = GeoPoint(float(lat), float(lon))
        residents = {u for u, _ in home_index.query_with_distance(center, spec.radius_m)}
        by_dow = [set() for _ in range(7)]
        for s, _ in stay_index.query_with_distance(center, spec.radius_m):
            u, _, _, dow = stays[s]
            if u not in residents:
                by_dow[dow].add(u)
        weekday[j] = np.mean([len(by_dow[d]) for d in range(5)])
        visitors = sorted(set().union(*by_dow))
        if visitors:
            visitor_income[j] = float(user_income[visitors].mean())
    return weekday, visitor_income


def _price_components(spec: SyntheticCitySpec, properties: pd.DataFrame, cbg_income: np.ndarray,
                      weekday: np.ndarray, visitor_income: np.ndarray) -> pd.DataFrame:
    c = spec.coefficients
    records = []
    for j, prop in enumerate(properties.itertuples(index=False)):
        if prop.kind in RESIDENTIAL_TYPES:
            income_seen = visitor_income[j] if np.isfinite(visitor_income[j]) else cbg_income[j]
            base = c.res_base
            static = (c.res_beds * prop.beds + c.res_baths * prop.baths + c.res_sqft * prop.sqft
                      + c.res_cbg_income * cbg_income[j])
            dynamic = c.res_visitor_income * income_seen
        else:
            scale = c.vacant_factor if prop.kind == 'vacant' else 1.0
            base = scale * c.com_base
            static = scale * (c.com_sqft * prop.sqft + c.com_cbg_income * cbg_income[j])
            dynamic = scale * c.com_weekday_visitors * weekday[j]
        planted = base + static + dynamic
        noise = 0.0
        if spec.noise_std > 0:
            rng = rng_for(spec.seed, 'noise', j)
            for _ in range(100):
                noise = float(rng.normal(0.0, spec.noise_std))
                if planted + noise >= c.price_floor:
                    break
            else:
                noise = 0.0
        records.append({'property_id': prop.property_id, 'kind': prop.kind, 'base': base, 'static': static,
                        'dynamic': dynamic, 'noise': noise, 'price': planted + noise,
                        'weekday_visitors': float(weekday[j]), 'visitor_income': float(visitor_income[j])})
    return pd.DataFrame.from_records(records)


def generate_synthetic(spec: SyntheticCitySpec, out_dir: str) -> SyntheticCity:
    """
    生成合成城市并写出输入文件与真值文件

    Args:
        spec: 合成城市参数
        out_dir: 输出目录

    Returns:
        SyntheticCity（含真值与文件路径）
    """
    cbg_ids = [_cbg_id(r, c) for r in range(spec.grid) for c in range(spec.grid)]
    demographics = _make_demographics(spec, cbg_ids)
    incomes = demographics['median_household_income'].to_numpy(dtype=float)
    populations = demographics['population'].to_numpy(dtype=float)
    hotspots = _make_hotspots(spec, incomes)

    users = [_plan_user(spec, i, cbg_ids, incomes, populations, hotspots) for i in range(spec.n_users)]
    pings = pd.concat([_emit_pings(spec, i, plan, hotspots) for i, plan in enumerate(users)], ignore_index=True)

    properties = _make_properties(spec, hotspots)
    income_by_cbg = dict(zip(cbg_ids, incomes))
    prop_cells = [_cbg_of(spec, lat, lon) for lat, lon in zip(properties['lat'], properties['lon'])]
    cbg_income = np.array([incomes[r * spec.grid + c] for r, c in prop_cells])
    weekday, visitor_income = _visitor_truth(spec, users, properties, income_by_cbg)
    truth_prices = _price_components(spec, properties, cbg_income, weekday, visitor_income)
    properties['price'] = truth_prices['price']
    properties = properties[['property_id', 'lat', 'lon', 'price', 'beds', 'baths', 'sqft', 'kind']]

    paths = {name: os.path.join(out_dir, filename) for name, filename in SYNTH_FILES.items()}
    writer = TableLoader()
    writer.write(pings, paths['pings'])
    rings = []
    for r in range(spec.grid):
        for c in range(spec.grid):
            lat0 = spec.origin_lat + r * spec.cell_deg
            lon0 = spec.origin_lon + c * spec.cell_deg
            lat1, lon1 = lat0 + spec.cell_deg, lon0 + spec.cell_deg
            rings.append((_cbg_id(r, c), [[(lon0, lat0), (lon1, lat0), (lon1, lat1), (lon0, lat1), (lon0, lat0)]]))
    write_cbg_geojson(rings, paths['polygons'])
    writer.write(demographics, paths['demographics'])
    writer.write(properties, paths['properties'])
    writer.write(pd.DataFrame({'user_id': [u.user_id for u in users],
                               'home_lat': [u.home_lat for u in users],
                               'home_lon': [u.home_lon for u in users],
                               'home_cbg': [u.home_cbg for u in users]}), paths['truth_homes'])
    writer.write(truth_prices, paths['truth_prices'])

    logger.info(f"合成城市生成完成：{len(cbg_ids)} 个CBG，{spec.n_users} 个用户，"
                f"{len(pings)} 条定位记录，{spec.n_properties} 个房产")
    return SyntheticCity(spec=spec, cbg_ids=cbg_ids, demographics=demographics, hotspots=hotspots, users=users,
                         properties=properties, truth_prices=truth_prices, paths=paths)

"""
特征构建模块
对每个房产聚合500米内非常住访客的按星期动态特征，并拼装静态+动态特征行
"""

import math
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from geo_core import GeoPoint, CbgPolygon, GridIndex, assign_cbg, build_grid_index, is_valid_coordinate
from home_census import CbgDemographics, HomeProfile, AVERAGED_FIELDS, STATIC_FIELDS
from loader import TableLoader, DataError, to_float
from ml import split
from parallel import chunked, resolve_n_jobs
from settings import RunConfig, ConfigError, PIPELINE_VERSION, RESIDENT_RULES, COMMUTING_MODES
from trajectory import Stop

# 获取日志记录器
logger = logging.getLogger(f'valuation.{__name__}')

PROPERTY_COLUMNS = ['property_id', 'lat', 'lon', 'price', 'beds', 'baths', 'sqft', 'kind']
KINDS = ('residential', 'commercial', 'unknown')
DAYS_PER_WEEK = 7

# 原始房产类型 -> 类别
RAW_TYPE_KINDS = {
    'condo': 'residential',
    'apartment': 'residential',
    'single_family': 'residential',
    'townhouse': 'residential',
    'office': 'commercial',
    'restaurant': 'commercial',
    'hotel': 'commercial',
    'vacant': 'commercial',
    'vacant_lot': 'commercial',
    'school': 'commercial',
    'church': 'commercial',
}

MANIFEST_COLUMNS = ['block', 'column_index', 'feature', 'imputation_value', 'pipeline_version']
_ROW_COLUMNS = ['property_id', 'kind', 'price', 'missing_cbg']


def classify_kind(raw: str) -> str:
    """把原始房产类型（或已归类的类别）映射为 residential / commercial / unknown"""
    key = raw.strip().lower().replace('-', '_').replace(' ', '_')
    if key in KINDS:
        return key
    return RAW_TYPE_KINDS.get(key, 'unknown')


def static_feature_names() -> List[str]:
    names = ['beds', 'baths', 'sqft'] + [f'kind_{k}' for k in KINDS] + ['lat', 'lon']
    return names + [f'cbg_{f}' for f in STATIC_FIELDS]


def dynamic_feature_names() -> List[str]:
    """动态特征名，星期编码 0=周一 … 6=周日"""
    names = []
    for d in range(DAYS_PER_WEEK):
        names.append(f'people_in_area_{d}')
        names.append(f'prop_commuting_{d}')
        names.extend(f'avg_{f}_{d}' for f in AVERAGED_FIELDS)
    names.append('residents_in_area')
    return names


@dataclass(frozen=True)
class PropertyRecord:
    """房产记录"""
    property_id: str
    loc: GeoPoint
    price: float
    beds: Optional[float]
    baths: Optional[float]
    sqft: Optional[float]
    kind: str
    cbg: Optional[str] = None
    raw_type: str = ''


@dataclass
class FeatureRow:
    """单个房产的特征行，缺失值在填补前为NaN"""
    property_id: str
    kind: str
    price: float
    static_features: np.ndarray
    dynamic_features: np.ndarray
    missing_cbg: bool = False
    label: Optional[float] = None


@dataclass
class FeatureManifest:
    """特征顺序与填补值，模型依赖列顺序"""
    static_names: List[str]
    dynamic_names: List[str]
    static_impute: np.ndarray
    dynamic_impute: np.ndarray
    version: str = PIPELINE_VERSION

    def names(self, block: str = 'all') -> List[str]:
        if block == 'static':
            return list(self.static_names)
        if block == 'dynamic':
            return list(self.dynamic_names)
        return list(self.static_names) + list(self.dynamic_names)

    def to_frame(self) -> pd.DataFrame:
        records = []
        for block, names, values in (('static', self.static_names, self.static_impute),
                                     ('dynamic', self.dynamic_names, self.dynamic_impute)):
            for i, (name, value) in enumerate(zip(names, values)):
                records.append((block, i, name, float(value), self.version))
        return pd.DataFrame.from_records(records, columns=MANIFEST_COLUMNS)

    def write(self, path: str) -> None:
        TableLoader().write(self.to_frame(), path)

    @classmethod
    def read(cls, path: str) -> 'FeatureManifest':
        frame = TableLoader().load(path, MANIFEST_COLUMNS)
        values = to_float(frame['imputation_value'])
        blocks = frame['block'].str.strip()
        versions = set(frame['pipeline_version'].str.strip())
        if len(versions) > 1:
            raise DataError(f"{path}: mixed pipeline versions {sorted(versions)}")
        static = blocks == 'static'
        dynamic = blocks == 'dynamic'
        return cls(
            static_names=frame.loc[static, 'feature'].str.strip().tolist(),
            dynamic_names=frame.loc[dynamic, 'feature'].str.strip().tolist(),
            static_impute=values[static].to_numpy(dtype=float),
            dynamic_impute=values[dynamic].to_numpy(dtype=float),
            version=versions.pop() if versions else PIPELINE_VERSION,
        )


class MeanImputer:
    """按训练集均值填补NaN，全缺失的列填0"""

    def __init__(self):
        self.means: Optional[np.ndarray] = None
        self.empty_columns = 0

    def fit(self, X: np.ndarray) -> 'MeanImputer':
        X = np.asarray(X, dtype=float)
        observed = ~np.isnan(X)
        counts = observed.sum(axis=0)
        sums = np.where(observed, X, 0.0).sum(axis=0)
        self.means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        self.empty_columns = int((counts == 0).sum())
        return self

    def transform(self, X: np.ndarray) -> Tuple[np.ndarray, int]:
        """返回填补后的矩阵与被填补的单元格数"""
        X = np.array(X, dtype=float, copy=True)
        missing = np.isnan(X)
        if missing.any():
            X[missing] = np.broadcast_to(self.means, X.shape)[missing]
        return X, int(missing.sum())


def load_properties(path: str, polygons: Sequence[CbgPolygon]) -> List[PropertyRecord]:
    """
    读取房产CSV并分配CBG

    坐标非法或价格非正的行被跳过并计数。

    Raises:
        MissingInputError: 文件不存在
        DataError: 编号重复
    """
    frame = TableLoader().load(path, PROPERTY_COLUMNS)
    lat = to_float(frame['lat'])
    lon = to_float(frame['lon'])
    price = to_float(frame['price'])
    attrs = {c: to_float(frame[c]) for c in ('beds', 'baths', 'sqft')}

    records: List[PropertyRecord] = []
    seen: Set[str] = set()
    skipped = 0
    for i, pid in enumerate(frame['property_id'].str.strip().tolist()):
        if pid in seen:
            raise DataError(f"{path}: duplicate property_id {pid}")
        seen.add(pid)
        la, lo, pr = lat.iat[i], lon.iat[i], price.iat[i]
        if not pid or pd.isna(la) or pd.isna(lo) or not is_valid_coordinate(la, lo) or pd.isna(pr) or pr <= 0:
            skipped += 1
            continue
        loc = GeoPoint(float(la), float(lo))
        raw = frame['kind'].iat[i].strip()
        records.append(PropertyRecord(
            property_id=pid,
            loc=loc,
            price=float(pr),
            beds=None if pd.isna(attrs['beds'].iat[i]) else float(attrs['beds'].iat[i]),
            baths=None if pd.isna(attrs['baths'].iat[i]) else float(attrs['baths'].iat[i]),
            sqft=None if pd.isna(attrs['sqft'].iat[i]) else float(attrs['sqft'].iat[i]),
            kind=classify_kind(raw),
            cbg=assign_cbg(loc, polygons),
            raw_type=raw,
        ))
    if skipped:
        logger.warning(f"{path}: 跳过 {skipped} 条坐标或价格不可用的房产记录")
    logger.info(f"加载房产 {len(records)} 条，来自 {path}")
    return records


@dataclass
class FeatureContext:
    """聚合所需的只读索引：停留点网格、居住地网格、CBG到居民的映射"""
    stop_index: GridIndex
    stop_table: List[Stop]
    homes: Dict[str, HomeProfile]
    home_index: GridIndex
    users_by_cbg: Dict[str, List[str]]

    @classmethod
    def build(cls, stops_by_user: Dict[str, List[Stop]], homes: Dict[str, HomeProfile],
              cell_size_deg: float) -> 'FeatureContext':
        # 只有推断出居住地的用户参与聚合
        stop_table = [s for uid in sorted(homes) for s in stops_by_user.get(uid, [])]
        stop_index = build_grid_index(((i, s.centroid) for i, s in enumerate(stop_table)), cell_size_deg)
        home_index = build_grid_index(((uid, homes[uid].home) for uid in sorted(homes)), cell_size_deg)
        users_by_cbg: Dict[str, List[str]] = {}
        for uid in sorted(homes):
            if homes[uid].home_cbg is not None:
                users_by_cbg.setdefault(homes[uid].home_cbg, []).append(uid)
        logger.info(f"聚合索引构建完成：{len(stop_table)} 个停留点，{len(homes)} 个居住地")
        return cls(stop_index, stop_table, homes, home_index, users_by_cbg)


@dataclass
class VisitorSets:
    """按星期的访客集合及其半径内停留总时长"""
    dwell_by_dow: List[Dict[str, float]]
    residents: Set[str]
    cbg_fallback: bool = False

    def dow_sets(self) -> List[Set[str]]:
        return [set(d) for d in self.dwell_by_dow]


def visitors_by_dow(prop: PropertyRecord, context: FeatureContext, r: float = 500.0,
                    resident_rule: str = 'radius') -> VisitorSets:
    """
    统计房产半径r内各星期的非常住访客

    Args:
        prop: 房产
        context: 聚合索引
        r: 聚合半径（米）
        resident_rule: radius（居住地在r内）或 cbg（居住地CBG与房产CBG相同）

    Returns:
        VisitorSets；常住居民不出现在任何星期集合中
    """
    if resident_rule not in RESIDENT_RULES:
        raise ConfigError(f"Unknown resident_rule: {resident_rule}")
    fallback = False
    if resident_rule == 'cbg' and prop.cbg is not None:
        residents = set(context.users_by_cbg.get(prop.cbg, ()))
    else:
        # 房产无CBG时回退到半径规则
        fallback = resident_rule == 'cbg'
        residents = {uid for uid, _ in context.home_index.query_with_distance(prop.loc, r)}

    dwell: List[Dict[str, float]] = [{} for _ in range(DAYS_PER_WEEK)]
    for stop_id, _ in context.stop_index.query_with_distance(prop.loc, r):
        stop = context.stop_table[stop_id]
        if stop.user_id in residents:
            continue
        by_user = dwell[stop.day_of_week_local]
        by_user[stop.user_id] = by_user.get(stop.user_id, 0.0) + stop.duration_s
    return VisitorSets(dwell_by_dow=dwell, residents=residents, cbg_fallback=fallback)


def _mean_or_nan(values: List[float]) -> float:
    return float(np.mean(values)) if values else math.nan


def dynamic_features(visits: VisitorSets, homes: Dict[str, HomeProfile],
                     commuting_mode: str = 'behavioral',
                     commute_dwell_max_s: float = 1800.0) -> np.ndarray:
    """
    计算动态特征向量

    每个星期：访客人数、通勤比例、各人口统计字段的访客平均值（按不同用户计一次，
    无人口统计的用户不参与平均）；最后是常住居民数。空集合的平均值为NaN，留待填补。
    """
    if commuting_mode not in COMMUTING_MODES:
        raise ConfigError(f"Unknown commuting_mode: {commuting_mode}")
    out: List[float] = []
    for dwell in visits.dwell_by_dow:
        users = sorted(dwell)
        people = len(users)
        demos = [homes[u].demographics for u in users if homes[u].demographics is not None]
        if people == 0:
            commuting = 0.0
        elif commuting_mode == 'behavioral':
            commuting = sum(1 for u in users if dwell[u] < commute_dwell_max_s) / people
        else:
            commuting = _mean_or_nan([d.commute_share for d in demos if d.commute_share is not None])
        out.append(float(people))
        out.append(commuting)
        for name in AVERAGED_FIELDS:
            out.append(_mean_or_nan([d.value(name) for d in demos if d.value(name) is not None]))
    out.append(float(len(visits.residents)))
    return np.array(out, dtype=float)


def static_features(prop: PropertyRecord, polygons: Sequence[CbgPolygon],
                    demo_table: Dict[str, CbgDemographics]) -> Tuple[np.ndarray, bool]:
    """
    计算静态特征向量

    Returns:
        (特征向量, 是否缺少CBG人口统计)；缺失槽位为NaN
    """
    cbg_id = prop.cbg if prop.cbg is not None else assign_cbg(prop.loc, polygons)
    demographics = demo_table.get(cbg_id) if cbg_id is not None else None

    def opt(v: Optional[float]) -> float:
        return math.nan if v is None else v

    head = [opt(prop.beds), opt(prop.baths), opt(prop.sqft)]
    head += [1.0 if prop.kind == k else 0.0 for k in KINDS]
    head += [prop.loc.lat, prop.loc.lon]
    if demographics is None:
        tail = np.full(len(STATIC_FIELDS), np.nan)
    else:
        tail = demographics.vector(STATIC_FIELDS)
    return np.concatenate([np.array(head, dtype=float), tail]), demographics is None


class FeatureBuilder:
    """为全部房产构建原始特征行"""

    def __init__(self, polygons: Sequence[CbgPolygon], demo_table: Dict[str, CbgDemographics],
                 homes: Dict[str, HomeProfile], stops_by_user: Dict[str, List[Stop]],
                 config: RunConfig):
        self.polygons = list(polygons)
        self.demo_table = demo_table
        self.config = config
        self.context = FeatureContext.build(stops_by_user, homes, config.cell_size_deg)
        self.cbg_fallbacks = 0

    def build_row(self, prop: PropertyRecord) -> Tuple[FeatureRow, bool]:
        cfg = self.config
        visits = visitors_by_dow(prop, self.context, cfg.radius_m, cfg.resident_rule)
        dynamic = dynamic_features(visits, self.context.homes, cfg.commuting_mode, cfg.commute_dwell_max_s)
        static, missing = static_features(prop, self.polygons, self.demo_table)
        row = FeatureRow(property_id=prop.property_id, kind=prop.kind, price=prop.price,
                         static_features=static, dynamic_features=dynamic, missing_cbg=missing)
        return row, visits.cbg_fallback

    def _build_batch(self, batch: List[PropertyRecord]) -> List[Tuple[FeatureRow, bool]]:
        return [self.build_row(p) for p in batch]

    def build_rows(self, properties: Sequence[PropertyRecord],
                   n_jobs: Optional[int] = None) -> List[FeatureRow]:
        """并行构建，结果按 property_id 排序"""
        ordered = sorted(properties, key=lambda p: p.property_id)
        results = Parallel(n_jobs=resolve_n_jobs(n_jobs))(
            delayed(self._build_batch)(batch) for batch in chunked(ordered, n_jobs))
        rows = []
        self.cbg_fallbacks = 0
        for batch in results:
            for row, fell_back in batch:
                rows.append(row)
                self.cbg_fallbacks += int(fell_back)
        if self.cbg_fallbacks:
            logger.warning(f"{self.cbg_fallbacks} 个房产无CBG，居民判定回退为半径规则")
        missing = sum(r.missing_cbg for r in rows)
        logger.info(f"特征行构建完成：{len(rows)} 个房产，缺少CBG人口统计 {missing} 个")
        return rows


@dataclass
class AssembledDataset:
    """填补后的训练/测试特征行与特征清单"""
    train: List[FeatureRow]
    test: List[FeatureRow]
    manifest: FeatureManifest
    imputed_cells: int = 0

    @property
    def rows(self) -> List[FeatureRow]:
        return self.train + self.test


def apply_label(price: float, label_transform: str) -> float:
    if label_transform == 'log':
        return math.log(price)
    if label_transform == 'identity':
        return price
    raise ConfigError(f"Unknown label_transform: {label_transform}")


def impute_rows(rows: Sequence[FeatureRow], manifest: FeatureManifest) -> Tuple[List[FeatureRow], int]:
    """用清单中的填补值替换NaN"""
    static_imp = MeanImputer()
    static_imp.means = manifest.static_impute
    dynamic_imp = MeanImputer()
    dynamic_imp.means = manifest.dynamic_impute
    out, cells = [], 0
    for row in rows:
        s, ns = static_imp.transform(row.static_features[None, :])
        d, nd = dynamic_imp.transform(row.dynamic_features[None, :])
        cells += ns + nd
        out.append(replace(row, static_features=s[0], dynamic_features=d[0]))
    return out, cells


def assemble_dataset(raw_rows: Sequence[FeatureRow], config: RunConfig,
                     label_transform: Optional[str] = None,
                     manifest: Optional[FeatureManifest] = None) -> AssembledDataset:
    """
    拼装分析数据集

    计算标签（价格或对数价格），按种子划分训练/测试集，
    只用训练集的列均值填补缺失值，并生成特征清单。
    传入已保存的 manifest 时沿用其中的填补值。

    Raises:
        DataError: 没有可用房产
    """
    if not raw_rows:
        raise DataError("No usable properties to assemble")
    transform = label_transform or config.label_transform
    labelled = [replace(r, label=apply_label(r.price, transform)) for r in raw_rows]
    train, test = split(labelled, config.test_fraction, config.seed)

    empty = 0
    if manifest is None:
        static_imp = MeanImputer().fit(np.vstack([r.static_features for r in train]))
        dynamic_imp = MeanImputer().fit(np.vstack([r.dynamic_features for r in train]))
        manifest = FeatureManifest(static_feature_names(), dynamic_feature_names(),
                                   static_imp.means, dynamic_imp.means)
        empty = static_imp.empty_columns + dynamic_imp.empty_columns
    train, n_train = impute_rows(train, manifest)
    test, n_test = impute_rows(test, manifest)
    logger.info(f"数据集拼装完成：训练 {len(train)} 行，测试 {len(test)} 行，"
                f"填补 {n_train + n_test} 个单元格，全缺失列 {empty} 个")
    return AssembledDataset(train=train, test=test, manifest=manifest, imputed_cells=n_train + n_test)


def write_features_csv(rows: Sequence[FeatureRow], path: str) -> None:
    """写出原始特征表，缺失值为空单元格"""
    columns = _ROW_COLUMNS + static_feature_names() + dynamic_feature_names()
    if not rows:
        TableLoader().write(pd.DataFrame(columns=columns), path)
        return
    head = pd.DataFrame({
        'property_id': [r.property_id for r in rows],
        'kind': [r.kind for r in rows],
        'price': [r.price for r in rows],
        'missing_cbg': [int(r.missing_cbg) for r in rows],
    })
    body = pd.DataFrame(np.hstack([np.vstack([r.static_features for r in rows]),
                                   np.vstack([r.dynamic_features for r in rows])]),
                        columns=columns[len(_ROW_COLUMNS):])
    TableLoader().write(pd.concat([head, body], axis=1), path)


def read_features_csv(path: str) -> List[FeatureRow]:
    static_names = static_feature_names()
    dynamic_names = dynamic_feature_names()
    frame = TableLoader().load(path, _ROW_COLUMNS + static_names + dynamic_names)
    price = to_float(frame['price'])
    flags = to_float(frame['missing_cbg'])
    if price.isna().any() or flags.isna().any():
        raise DataError(f"{path}: non-numeric price or flag values")
    static = np.column_stack([to_float(frame[c]).to_numpy(dtype=float) for c in static_names]) \
        if len(frame) else np.empty((0, len(static_names)))
    dynamic = np.column_stack([to_float(frame[c]).to_numpy(dtype=float) for c in dynamic_names]) \
        if len(frame) else np.empty((0, len(dynamic_names)))
    rows = []
    for i, pid in enumerate(frame['property_id'].str.strip().tolist()):
        rows.append(FeatureRow(property_id=pid, kind=frame['kind'].iat[i].strip(), price=float(price.iat[i]),
                               static_features=static[i].copy(), dynamic_features=dynamic[i].copy(),
                               missing_cbg=bool(flags.iat[i])))
    logger.info(f"读取特征行 {len(rows)} 条，来自 {path}")
    return rows

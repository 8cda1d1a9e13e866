import os
import hashlib
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Tuple, Any, Optional

from dotenv import load_dotenv, dotenv_values

# 加载.env文件
load_dotenv()


class ConfigError(Exception):
    """配置错误（未知配置项、取值非法等），命令行退出码为1"""
    pass


class Settings:
    def __init__(self):
        # 从环境变量加载，这些设置不影响计算结果，不进入配置摘要
        self.LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
        self.LOG_PATH = os.getenv('LOG_PATH', 'logs/')

        self.OUTPUT_PATH = os.getenv('OUTPUT_PATH', 'out/')

        # joblib并行进程数，-1表示使用全部CPU
        self.N_JOBS = int(os.getenv('N_JOBS', '-1'))


# 创建全局settings实例
settings = Settings()


PIPELINE_VERSION = "1.0.0"

RESIDENT_RULES = ('radius', 'cbg')
COMMUTING_MODES = ('behavioral', 'census')
LABEL_TRANSFORMS = ('identity', 'log')


@dataclass(frozen=True)
class RunConfig:
    """一次运行的全部参数，每个字段都是配置文件中的一个键"""
    # 输入输出路径（为空时使用 <output_dir>/synth/ 下的合成数据）
    pings_path: str = ''
    polygons_path: str = ''
    demographics_path: str = ''
    properties_path: str = ''
    output_dir: str = ''

    # 停留点检测
    r_stop: float = 50.0
    min_stop_duration_s: float = 300.0
    max_gap_s: float = 43200.0
    utc_offset_hours: float = -5.0

    # 居住地推断
    r_home: float = 100.0
    min_nights: int = 3
    home_nights: Tuple[int, ...] = (1, 2, 3, 4)

    # 特征构建
    radius_m: float = 500.0
    resident_rule: str = 'radius'
    commuting_mode: str = 'behavioral'
    commute_dwell_max_s: float = 1800.0
    cell_size_deg: float = 0.01

    # 模型参数
    n_estimators: int = 300
    mtry: int = 0
    min_samples_leaf: int = 5
    max_depth: int = 0
    ridge_lambda: float = 1.0
    k_folds: int = 5
    test_fraction: float = 0.1
    label_transform: str = 'identity'
    seed: int = 42

    # 税务评估实验
    tax_n_estimators: int = 700
    tax_min_price: float = 50000.0
    tax_sample_per_kind: int = 5000
    tax_min_records: int = 100

    # 特征归因
    shap_samples: int = 100
    shap_background: int = 256
    shap_eval_rows: int = 100
    shap_top_k: int = 20
    perm_repeats: int = 5

    # 合成城市生成器
    synth_users: int = 500
    synth_properties: int = 2000
    synth_days: int = 14
    synth_grid: int = 6
    synth_hotspots: int = 24
    synth_jitter_m: float = 20.0
    synth_noise_std: float = 25000.0
    synth_commercial_share: float = 0.3
    synth_start_date: str = '2024-01-01'

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """校验取值范围"""
        if self.resident_rule not in RESIDENT_RULES:
            raise ConfigError(f"resident_rule must be one of {RESIDENT_RULES}, got {self.resident_rule!r}")
        if self.commuting_mode not in COMMUTING_MODES:
            raise ConfigError(f"commuting_mode must be one of {COMMUTING_MODES}, got {self.commuting_mode!r}")
        if self.label_transform not in LABEL_TRANSFORMS:
            raise ConfigError(f"label_transform must be one of {LABEL_TRANSFORMS}, got {self.label_transform!r}")
        if self.cell_size_deg <= 0:
            raise ConfigError(f"cell_size_deg must be positive, got {self.cell_size_deg}")
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.k_folds < 2:
            raise ConfigError(f"k_folds must be >= 2, got {self.k_folds}")
        if self.ridge_lambda < 0:
            raise ConfigError(f"ridge_lambda must be >= 0, got {self.ridge_lambda}")
        if any(d not in range(7) for d in self.home_nights):
            raise ConfigError(f"home_nights must contain weekdays 0..6, got {self.home_nights}")
        for name in ('r_stop', 'r_home', 'radius_m', 'min_stop_duration_s', 'max_gap_s'):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ('n_estimators', 'tax_n_estimators', 'min_samples_leaf', 'min_nights',
                     'shap_samples', 'shap_background', 'perm_repeats'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_file(cls, path: str, overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """
        从 key = value 配置文件加载

        Args:
            path: 配置文件路径，#开头为注释
            overrides: 命令行覆盖项（如 seed）

        Returns:
            RunConfig实例

        Raises:
            ConfigError: 文件不存在、未知配置项或取值无法转换
        """
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        raw = dotenv_values(path)
        config = cls.from_mapping(raw)
        if overrides:
            config = config.with_overrides(**overrides)
        return config

    @classmethod
    def from_mapping(cls, raw: Dict[str, Optional[str]]) -> 'RunConfig':
        known = {f.name: f for f in fields(cls)}
        values: Dict[str, Any] = {}
        for key, text in raw.items():
            key = key.strip()
            if key not in known:
                raise ConfigError(f"Unknown config key: {key}")
            if text is None:
                raise ConfigError(f"Config key {key} has no value")
            values[key] = _coerce(known[key].type, key, text.strip())
        return cls(**values)

    def with_overrides(self, **overrides: Any) -> 'RunConfig':
        overrides = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(overrides) - set(self.keys())
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        return replace(self, **overrides)

    def resolved_output_dir(self) -> str:
        return self.output_dir or settings.OUTPUT_PATH.rstrip('/') or 'out'

    def input_path(self, name: str) -> str:
        """输入文件路径，未配置时指向合成数据目录"""
        default_names = {
            'pings_path': 'pings.csv',
            'polygons_path': 'cbg.geojson',
            'demographics_path': 'demographics.csv',
            'properties_path': 'properties.csv',
        }
        value = getattr(self, name)
        if value:
            return value
        return os.path.join(self.resolved_output_dir(), 'synth', default_names[name])

    def to_lines(self) -> List[str]:
        """规范化序列化，按键名排序"""
        lines = []
        for name in sorted(self.keys()):
            lines.append(f"{name} = {_render(getattr(self, name))}")
        return lines

    def digest(self) -> str:
        # output_dir不影响计算结果
        payload = '\n'.join(line for line in self.to_lines() if not line.startswith('output_dir '))
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def _coerce(annotation: Any, key: str, text: str) -> Any:
    """根据字段类型转换配置值"""
    try:
        if annotation in (int, 'int'):
            return int(text)
        if annotation in (float, 'float'):
            return float(text)
        if annotation in (str, 'str'):
            return text
        if annotation in (Tuple[int, ...], 'Tuple[int, ...]'):
            if not text:
                return tuple()
            return tuple(int(part) for part in text.split(','))
    except ValueError:
        raise ConfigError(f"Invalid value for {key}: {text!r}")
    raise ConfigError(f"Unsupported config type for {key}")


def _render(value: Any) -> str:
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)

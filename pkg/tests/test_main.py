#!/usr/bin/env python3
"""
命令行入口测试：退出码与阶段命令
"""

import os
import sys
import tempfile
from pathlib import Path

from unittest.mock import patch

import pytest

# 添加项目根目录到Python路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

import main
from main import run_cli, EXIT_OK, EXIT_USAGE, EXIT_DATA
from settings import settings


TINY_CITY = {
    'synth_users': 12,
    'synth_properties': 30,
    'synth_days': 7,
    'synth_grid': 2,
    'synth_hotspots': 4,
}


def _write_config(directory, **entries):
    path = os.path.join(directory, 'run.conf')
    with open(path, 'w', encoding='utf-8') as f:
        f.write("# 测试配置\n")
        f.write(f"output_dir = {os.path.join(directory, 'out')}\n")
        for key, value in entries.items():
            f.write(f"{key} = {value}\n")
    return path


@pytest.fixture(autouse=True)
def serial_jobs(monkeypatch):
    monkeypatch.setattr(settings, 'N_JOBS', 1)


def test_usage_errors_exit_1(capsys):
    """测试无参数、未知命令、缺少 --config 的退出码"""
    assert run_cli([]) == EXIT_USAGE
    assert 'Usage' in capsys.readouterr().err
    assert run_cli(['no-such-command']) == EXIT_USAGE
    assert run_cli(['train']) == EXIT_USAGE
    assert run_cli(['train', '--config', 'x.conf', '--seed', 'abc']) == EXIT_USAGE


def test_config_errors_exit_1():
    with tempfile.TemporaryDirectory() as temp_dir:
        assert run_cli(['synth', '--config', os.path.join(temp_dir, 'missing.conf')]) == EXIT_USAGE
        bad_key = _write_config(temp_dir, no_such_key=1)
        assert run_cli(['synth', '--config', bad_key]) == EXIT_USAGE
        bad_value = _write_config(temp_dir, resident_rule='nearest')
        assert run_cli(['synth', '--config', bad_value]) == EXIT_USAGE


def test_missing_input_exits_2():
    """测试输入文件缺失时退出码为2"""
    with tempfile.TemporaryDirectory() as temp_dir:
        config = _write_config(temp_dir)
        assert run_cli(['detect-stops', '--config', config]) == EXIT_DATA
        config = _write_config(temp_dir, pings_path=os.path.join(temp_dir, 'none.csv'))
        assert run_cli(['detect-stops', '--config', config]) == EXIT_DATA


def test_stage_commands_succeed(capsys):
    """测试 synth → detect-stops → infer-homes 依次成功，--seed 覆盖配置种子"""
    with tempfile.TemporaryDirectory() as temp_dir:
        config = _write_config(temp_dir, **TINY_CITY)
        assert run_cli(['synth', '--config', config, '--seed', '5']) == EXIT_OK
        out = capsys.readouterr().out
        assert os.path.join(temp_dir, 'out', 'synth', 'pings.csv') in out

        assert run_cli(['detect-stops', '--config', config, '--seed', '5']) == EXIT_OK
        assert 'stops ->' in capsys.readouterr().out
        assert run_cli(['infer-homes', '--config', config, '--seed', '5']) == EXIT_OK
        assert 'homes ->' in capsys.readouterr().out

        with open(os.path.join(temp_dir, 'out', 'manifest.txt'), encoding='utf-8') as f:
            text = f.read()
        assert text.count('config.seed=5') == 3


def test_load_config_applies_seed_override():
    with tempfile.TemporaryDirectory() as temp_dir:
        config = _write_config(temp_dir, seed=7)
        assert main.load_config(config, None).seed == 7
        assert main.load_config(config, 99).seed == 99


def test_unexpected_error_exits_1(capsys):
    """测试未预期的异常被记录并以退出码1结束，而不是抛出调用栈"""
    with tempfile.TemporaryDirectory() as temp_dir:
        config = _write_config(temp_dir, **TINY_CITY)
        with patch('main.Pipeline.synth', side_effect=RuntimeError('disk on fire')):
            assert run_cli(['synth', '--config', config]) == EXIT_USAGE
    assert 'disk on fire' in capsys.readouterr().err

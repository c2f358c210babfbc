import json
import logging
import os
from typing import Dict, Iterable, Optional, Tuple

import pandas as pd

logger = logging.getLogger(__name__)

CONFIG_PREFIX = '# config: '
WALL_CLOCK_COLUMNS = ('wall_time_s',)


def write_report(df: pd.DataFrame, path: str, config: Optional[Dict] = None) -> str:
    """
    Write a result table as CSV, preceded by a ``# config:`` comment line.

    Args:
        df: one row per run
        path: output file; parent directories are created
        config: run configuration echoed as JSON in the comment line

    Returns:
        The path written
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='') as f:
        f.write(CONFIG_PREFIX + json.dumps(config or {}, sort_keys=True, default=str) + '\n')
        df.to_csv(f, index=False)
    logger.info(f'wrote {len(df)} rows to {path}')
    return path


def read_report(path: str) -> Tuple[pd.DataFrame, Dict]:
    """Inverse of write_report: the table and the echoed configuration."""
    config: Dict = {}
    with open(path) as f:
        first = f.readline()
    if first.startswith(CONFIG_PREFIX):
        config = json.loads(first[len(CONFIG_PREFIX):])
    df = pd.read_csv(path, comment='#')
    return df, config


def drop_wall_clock(df: pd.DataFrame) -> pd.DataFrame:
    """Columns that differ between identical runs removed."""
    return df.drop(columns=[c for c in WALL_CLOCK_COLUMNS if c in df.columns])


def write_text_report(rows: Iterable[Tuple[str, object]], path: Optional[str] = None,
                      title: str = '') -> str:
    """Render ``name value`` rows as aligned plain text; written to ``path`` when given."""
    rows = list(rows)
    width = max((len(name) for name, _ in rows), default=0)
    lines = [title] if title else []
    for name, value in rows:
        text = f'{value:.4f}' if isinstance(value, float) else str(value)
        lines.append(f'{name.ljust(width)}  {text}')
    text = '\n'.join(lines) + '\n'
    if path:
        with open(path, 'w') as f:
            f.write(text)
        logger.info(f'wrote report to {path}')
    return text

import datetime
import json
import logging
import os

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


def ensure_dir(path):
    """Create a directory (and parents) if it does not exist and return it."""
    os.makedirs(path, exist_ok=True)
    return path


def run_directory(root, name=None):
    """Directory for one CLI invocation: <root>/<name> or a timestamped one."""
    if not name:
        name = datetime.datetime.now().strftime('run_%Y%m%d_%H%M%S')
    return ensure_dir(os.path.join(root, name))


def save_json(obj, path):
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def load_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_table(table, path, columns=None):
    """Write rows (list of dicts) or a DataFrame as CSV with a fixed header."""
    df = table if isinstance(table, pd.DataFrame) else pd.DataFrame(table, columns=columns)
    if columns is not None:
        df = df[list(columns)]
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    df.to_csv(path, index=False)
    logger.info(f"Wrote {len(df)} rows to {path}")
    return path


def derive_rng(seed, *keys):
    """Independent, reproducible generator for (seed, key...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]))

import hashlib
import json
import logging
import os
import threading
from logging.handlers import TimedRotatingFileHandler

import numpy as np
import pandas as pd

import config as cfg


def read_json_file(file_path):
    with open(file_path, "r") as f:
        return json.load(f)


def _to_builtin(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if hasattr(obj, "model_dump"):
        return obj.model_dump(mode="json")
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def transform_dict_n_str(_input, dict_2_str=True):
    if dict_2_str:
        # sorted keys keep every emitted artifact byte-stable
        _output = json.dumps(_input, ensure_ascii=False, sort_keys=True, default=_to_builtin)
    else:
        _output = json.loads(_input)
    return _output


def write_json_file(file_path, data, indent=2):
    os.makedirs(os.path.dirname(os.path.abspath(file_path)), exist_ok=True)
    text = json.dumps(data, ensure_ascii=False, sort_keys=True, indent=indent, default=_to_builtin)
    with open(file_path, "w") as f:
        f.write(text + "\n")
    return file_path


def write_table(file_path, rows, columns=None):
    """Write a list of dicts (or a DataFrame) as CSV."""
    os.makedirs(os.path.dirname(os.path.abspath(file_path)), exist_ok=True)
    df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows, columns=columns)
    df.to_csv(file_path, index=False, float_format="%.10g")
    return file_path


def content_hash(*parts):
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, np.ndarray):
            h.update(np.ascontiguousarray(part, dtype=np.float64).tobytes())
        elif isinstance(part, bytes):
            h.update(part)
        elif isinstance(part, str):
            h.update(part.encode())
        else:
            h.update(transform_dict_n_str(part, dict_2_str=True).encode())
        h.update(b"|")
    return h.hexdigest()


class EventLog:
    """Append-only JSON-lines event stream of a campaign."""

    def __init__(self, file_path):
        self.file_path = file_path
        self._lock = threading.Lock()
        os.makedirs(os.path.dirname(os.path.abspath(file_path)), exist_ok=True)

    def emit(self, event, stage=None, **payload):
        record = {"event": event, "stage": stage}
        record.update(payload)
        line = transform_dict_n_str(record, dict_2_str=True)
        with self._lock:
            with open(self.file_path, "a") as f:
                f.write(line + "\n")


class ResultCache:
    """
    Content-addressed store of stage results under <out>/cache/<stage>/<key>.json

    A completed stage is never recomputed when its key (inputs + settings) is unchanged.
    """

    def __init__(self, root):
        self.root = root

    def _path(self, stage, key):
        return os.path.join(self.root, stage, f"{key}.json")

    def get(self, stage, key):
        path = self._path(stage, key)
        if not os.path.exists(path):
            return None
        return read_json_file(path)

    def put(self, stage, key, value):
        path = self._path(stage, key)
        tmp = f"{path}.{threading.get_ident()}.tmp"
        write_json_file(tmp, value)
        os.replace(tmp, path)
        return value


def setup_logger(log_dir=None, level=logging.INFO):
    log_dir = cfg.path_logs if log_dir is None else log_dir
    os.makedirs(log_dir, exist_ok=True)

    app_logger = logging.getLogger(cfg.logger_name)
    app_logger.setLevel(level)

    # Check if handlers are already added to avoid duplication
    if not app_logger.handlers:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)
        console_format = logging.Formatter('%(asctime)s [%(threadName)s] %(levelname)s: %(message)s')
        console_handler.setFormatter(console_format)
        app_logger.addHandler(console_handler)

        log_file_handler = TimedRotatingFileHandler(
            os.path.join(log_dir, "screening_log"),
            when="midnight",
            interval=1,
            backupCount=7
        )
        log_file_handler.suffix = "%Y-%m-%d"
        log_file_handler.setLevel(logging.DEBUG)
        file_format = logging.Formatter('%(asctime)s [%(threadName)s] %(levelname)s: %(message)s')
        log_file_handler.setFormatter(file_format)
        app_logger.addHandler(log_file_handler)

    return app_logger


def get_logger(module):
    return logging.getLogger(f"{cfg.logger_name}.{module}")

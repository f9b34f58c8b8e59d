import json
import logging
import os
import threading
from datetime import datetime, timezone

from cramkit import settings

_logger = logging.getLogger('cramkit')
_lock = threading.Lock()
_events = []

WARNING_TYPES = ('error', 'warning', 'step_aborted', 'fallback')


def log_event(log_type, data):
    """
    Logs an event of the specified type with the given data.

    Args:
        log_type (str): The type of event (e.g., "train", "bnt", "error").
        data (dict): A dictionary of JSON-serializable data to log.
    """
    log_entry = {
        'timestamp': datetime.now(timezone.utc).isoformat(),
        'log_type': log_type,
        'data': data,
    }
    level = logging.WARNING if log_type in WARNING_TYPES else logging.INFO
    _logger.log(level, '%s %s', log_type, json.dumps(data, sort_keys=True, default=str))
    with _lock:
        _events.append(log_entry)
        log_file = settings.get_log_file()
        if log_file:
            _persist(log_file, log_entry)


def _persist(log_file, log_entry):
    directory = os.path.dirname(log_file)
    if directory:
        os.makedirs(directory, exist_ok=True)
    logs = []
    if os.path.exists(log_file):
        try:
            with open(log_file, 'r') as f:
                logs = json.load(f)
        except json.JSONDecodeError:
            _logger.warning('event log %s is corrupt, starting a new one', log_file)
            logs = []
    logs.append(log_entry)
    with open(log_file, 'w') as f:
        json.dump(logs, f, indent=4, default=str)


def get_logs(log_type=None):
    """
    Retrieves logged events, optionally filtered by type.

    Args:
        log_type (str, optional): If provided, only returns logs of this type.

    Returns:
        list: List of log entries.
    """
    with _lock:
        if log_type:
            return [log for log in _events if log['log_type'] == log_type]
        return list(_events)


def clear_logs():
    with _lock:
        _events.clear()

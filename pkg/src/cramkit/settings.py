import os
from dotenv import load_dotenv

load_dotenv()


def get_threads():
    """
    Worker cap for parallel sweep jobs.

    Returns:
        int: ``CRAM_THREADS`` if set, otherwise the machine parallelism
    """
    value = os.getenv('CRAM_THREADS')
    if value:
        try:
            threads = int(value)
        except ValueError:
            threads = 0
        if threads >= 1:
            return threads
    return os.cpu_count() or 1


def get_log_file():
    """
    Returns:
        str: Path of the JSON event log, or None when events stay in memory
    """
    return os.getenv('CRAM_LOG_FILE') or None

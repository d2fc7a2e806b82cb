import os


def workers():
    """Worker count for transforms, capped by ``NSSCALE_THREADS`` (default 1)."""
    value = os.environ.get("NSSCALE_THREADS", "1")
    try:
        count = int(value)
    except ValueError:
        return 1
    return max(count, 1)

import os

# threading
THREADS = int(os.environ.get("NIKRECON_THREADS") or os.cpu_count() or 1)

# experiment profile used when `--profile` is not given
PROFILE = os.environ.get("NIKRECON_PROFILE", "desk")

# output formatter, `human` or `json` (auto-detected when unset)
FORMAT = os.environ.get("NIKRECON_FORMAT")

LOGLEVEL = os.environ.get("LOGLEVEL", "INFO").upper()

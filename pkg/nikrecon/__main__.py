"""
Command line program for *nikrecon*: simulate, self-gate, reconstruct,
evaluate and animate.
"""
import logging
import os
import sys

import invoke

from nikrecon import config
from nikrecon.pipeline import animate, evaluate, extract, recon, simulate

__version__ = "0.1.0"

LOG = logging.getLogger("nikrecon")


def create_collection():
    """
    Returns:
        invoke.Collection: every experiment command at the root.
    """
    return invoke.Collection(simulate, extract, recon, evaluate, animate)


def _main():
    logging.basicConfig(
        level=config.LOGLEVEL,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    # plugin discovery logs at debug level on every write
    logging.getLogger("imageio").setLevel(logging.WARNING)
    LOG.debug(f"{config.THREADS} worker threads, default profile {config.PROFILE}")

    invoke.Program(
        version=__version__,
        namespace=create_collection(),
        name="nikrecon",
    ).run()


def main():
    try:
        _main()

    except BrokenPipeError:
        # output piped into e.g. `head`: silence the flush at interpreter exit
        devnull = os.open(os.devnull, os.O_WRONLY)
        os.dup2(devnull, sys.stdout.fileno())
        os.dup2(devnull, sys.stderr.fileno())
        sys.exit(1)


if __name__ == "__main__":
    main()

import dataclasses
import enum
import inspect
import json
import logging
import os
import sys
from datetime import datetime
from functools import partial, singledispatch
from pathlib import Path
from typing import Any, List, Mapping

import colorama
import emoji
import numpy as np
import termcolor
import wrapt
from tabulate import tabulate

from nikrecon import config

LOG = logging.getLogger(__name__)

colorama.init()


class PipelineError(Exception):
    """
    Base of the errors a command reports to the user and exits on.
    """

    category = "pipeline"
    exit_code = 1


class ConfigError(PipelineError):
    """
    Raised when an experiment configuration is missing values or is invalid.
    """

    category = "config"
    exit_code = 2


class DataError(PipelineError):
    """
    Raised when input data (datasets, checkpoints, signals) cannot be used.
    """

    category = "data"
    exit_code = 3


class DivergenceError(PipelineError):
    category = "numeric divergence"
    exit_code = 4


def format_duration(seconds: float) -> str:
    """
    Wall time in the largest unit that keeps the value above one.
    """
    value = float(seconds)
    unit = "second"
    for next_unit, multiplier in (("minute", 60), ("hour", 60), ("day", 24)):
        if abs(value) < multiplier:
            break
        value /= multiplier
        unit = next_unit

    return f"{value:.3g} {unit}{'' if value == 1 else 's'}"


class JsonEncoder(json.JSONEncoder):
    def default(self, o):  # pylint: disable=method-hidden
        if isinstance(o, datetime):
            return o.isoformat()

        if isinstance(o, Path):
            return str(o)

        if isinstance(o, enum.Enum):
            return o.name

        if isinstance(o, np.generic):
            return o.item()

        if isinstance(o, np.ndarray):
            if np.iscomplexobj(o):
                return {"real": o.real.tolist(), "imag": o.imag.tolist()}
            return o.tolist()

        if dataclasses.is_dataclass(o):
            return dataclasses.asdict(o)

        return super().default(o)


class TextStyle(enum.Enum):
    green = ("green", None, [])
    yellow = ("yellow", None, [])
    red = ("red", None, [])
    red_inverse = ("white", "on_red", ["bold"])
    green_inverse = ("white", "on_green", ["bold"])

    def __init__(self, fg, bg, attrs):
        self.fg = fg
        self.bg = bg
        self.attrs = list(attrs)


def style_text(text: Any, style: TextStyle) -> str:
    return termcolor.colored(
        emoji.emojize(str(text), language="alias"), style.fg, style.bg, attrs=style.attrs
    )


def _print(text: str, style: TextStyle) -> None:
    end = ""
    if text.endswith("\n"):
        # background colours would leak to the next line
        text = text[:-1]
        end = "\n"
    print(style_text(text, style), end=end, file=sys.stderr)


success = partial(_print, style=TextStyle.green)
alert = partial(_print, style=TextStyle.green_inverse)
warning = partial(_print, style=TextStyle.yellow)
error = partial(_print, style=TextStyle.red_inverse)


def fatal(message: str, exit_code: int = 1, stack_depth=1):
    # `stack_depth` selects the frame reported as the origin
    caller = inspect.getframeinfo(inspect.stack()[stack_depth][0])
    error(f"FATAL:{caller.filename}:{caller.lineno}: {message}\n")
    sys.exit(exit_code)


@singledispatch
def to_human(data: Any):
    if dataclasses.is_dataclass(data):
        return to_human(dataclasses.asdict(data))
    return str(data)


@to_human.register(dict)
def _(data: dict):
    table = [[key, to_human(value)] for key, value in data.items()]
    return tabulate(table, [], tablefmt="simple")


@to_human.register(list)
@to_human.register(tuple)
def _(data):
    text = ", ".join(to_human(v) for v in data)
    if len(text) > 100:
        more = f"... ({len(data)})"
        return text[: 100 - len(more)] + more
    return text


@to_human.register(float)
@to_human.register(np.floating)
def _(data):
    return f"{data:.4g}"


@to_human.register(np.ndarray)
def _(data: np.ndarray):
    return f"array{data.shape} {data.dtype}"


@to_human.register(bool)
def _(data: bool):
    return style_text(data, TextStyle.green if data else TextStyle.red)


@to_human.register(enum.Enum)
def _(data: enum.Enum):
    return data.name


def to_human_tabular(rows: List[Mapping[str, Any]]):
    formatted = [
        {key: "" if value is None else to_human(value) for key, value in row.items()}
        for row in rows
    ]
    return tabulate(formatted, headers="keys", tablefmt="fancy_grid")


FORMATTERS = {
    "human": to_human,
    "human_tabular": to_human_tabular,
    "json": partial(json.dumps, indent=2, sort_keys=True, cls=JsonEncoder),
}


def printfmt(data, tabular=False):
    """
    Prints command results to stdout, as tables on a terminal and as JSON
    when piped, unless `NIKRECON_FORMAT` says otherwise.
    """
    fmt_name = config.FORMAT
    if fmt_name is None:
        fmt_name = "human" if os.isatty(sys.stdout.fileno()) else "json"

    if tabular and fmt_name == "human":
        fmt_name = "human_tabular"

    fmt = FORMATTERS.get(fmt_name)
    if fmt is None:
        fatal(f"invalid formatter: {fmt_name}")

    sys.stdout.write(fmt(data) + "\n")


@wrapt.decorator
def die_on_pipeline_errors(wrapped, instance, args, kwargs):
    try:
        return wrapped(*args, **kwargs)

    except PipelineError as exc:
        LOG.debug("pipeline error", exc_info=True)
        fatal(f"{exc.category} error: {exc}", exit_code=exc.exit_code, stack_depth=2)

    except OSError as exc:
        fatal(f"io error: {type(exc).__name__}: {exc}", exit_code=5, stack_depth=2)

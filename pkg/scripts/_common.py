"""Shared helpers for the experiment scripts."""
from __future__ import annotations

import argparse
from pathlib import Path

from fcsim.io import dumps_json


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", help="write the full result as JSON to this path")
    return p


def save(result, path: str | None) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(dumps_json(result) + "\n")

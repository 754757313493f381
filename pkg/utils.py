import hashlib
import json
import os
import re
import tempfile
from typing import Any


def parse_json_document(text: str, what: str = "document") -> Any:
    """Parse a JSON config or taxonomy document.

    Full-line ``//`` comments are allowed so hand-written config files can be
    annotated; they are stripped before parsing.
    """
    if text is None or not text.strip():
        raise ValueError(f"{what} is empty")
    cleaned = re.sub(r"(?m)^\s*//.*$", "", text).strip()
    try:
        return json.loads(cleaned)
    except json.JSONDecodeError as e:
        raise ValueError(f"{what} is not valid JSON: {e}") from e


def derive_seed(master_seed: int, *key: Any) -> int:
    """Stable 32-bit seed for a grid cell, independent of scheduling order."""
    material = "|".join([str(int(master_seed))] + [str(k) for k in key])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def atomic_write_text(path: str, text: str) -> None:
    """Write to a sibling temp file, then rename over the target."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def format_float(value: float) -> str:
    # 17 significant digits round-trip every float64
    return format(float(value), ".17g")

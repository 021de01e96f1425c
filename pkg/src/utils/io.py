"""
Token and parameter file I/O.

Token files are JSON objects {"n": ..., "d": ..., "data": [[...], ...]} or
headerless CSV, one token per row. Loose variants (a bare list of rows, a
list of numbers, "tokens" instead of "data") are normalized to the canonical
shape. Parameter files hold one object per head under "heads".
"""

import csv
import io
import json
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from ..errors import EmptyInputError, InputParseError
from ..params import AffineMap, HeadParams, Projection, TokenSequence

PathLike = Union[str, Path]


def normalize_token_rows(payload: Any) -> List[List[float]]:
    """
    Normalize token data into a list of equal-length float rows.

    Accepts:
        - {"n": n, "d": d, "data": rows} (canonical; n and d are checked)
        - {"data": rows} or {"tokens": rows}
        - rows as a list of lists
        - a flat list of numbers (one 1-D token each)

    Raises:
        InputParseError: the payload has none of these shapes.
    """
    declared_n = declared_d = None
    if isinstance(payload, dict):
        declared_n, declared_d = payload.get("n"), payload.get("d")
        for key in ("data", "tokens"):
            if key in payload:
                payload = payload[key]
                break
        else:
            raise InputParseError("io", "token object needs a 'data' field")

    if not isinstance(payload, (list, tuple)):
        raise InputParseError("io", f"token data must be a list, got {type(payload).__name__}")

    rows: List[List[float]] = []
    for idx, item in enumerate(payload):
        if isinstance(item, (list, tuple)):
            row = item
        elif isinstance(item, (int, float)) and not isinstance(item, bool):
            row = [item]
        else:
            raise InputParseError("io", f"token {idx} is not a number or a list of numbers")
        try:
            rows.append([float(v) for v in row])
        except (TypeError, ValueError):
            raise InputParseError("io", f"token {idx} holds a non-numeric entry") from None

    if rows and any(len(r) != len(rows[0]) for r in rows):
        raise InputParseError("io", "tokens have different lengths")
    if declared_n is not None and declared_n != len(rows):
        raise InputParseError("io", f"header says n={declared_n}, file holds {len(rows)} tokens")
    if declared_d is not None and rows and declared_d != len(rows[0]):
        raise InputParseError("io", f"header says d={declared_d}, tokens have {len(rows[0])} entries")
    return rows


def _read_text(path: PathLike) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputParseError("io", f"cannot read {path}: {exc.strerror or exc}") from None


def _parse_csv(text: str) -> List[List[str]]:
    return [row for row in csv.reader(io.StringIO(text)) if row and any(cell.strip() for cell in row)]


def load_tokens(path: PathLike) -> TokenSequence:
    """
    Read a token file; JSON when it parses as JSON, CSV otherwise.

    Raises:
        InputParseError: unreadable or malformed file.
        EmptyInputError: the file holds no tokens.
    """
    text = _read_text(path)
    try:
        payload = json.loads(text)
    except json.JSONDecodeError:
        payload = _parse_csv(text)
    if isinstance(payload, (int, float)) and not isinstance(payload, bool):
        payload = [payload]
    rows = normalize_token_rows(payload)
    if not rows:
        raise EmptyInputError("io", f"{path} holds no tokens")
    return TokenSequence(np.asarray(rows, dtype=np.float64))


def tokens_to_dict(tokens: np.ndarray) -> Dict[str, Any]:
    arr = np.asarray(tokens, dtype=np.float64)
    return {"n": int(arr.shape[0]), "d": int(arr.shape[1]), "data": arr.tolist()}


def save_tokens(path: PathLike, tokens: np.ndarray) -> Path:
    """Write tokens in the canonical JSON form."""
    return write_json(path, tokens_to_dict(tokens))


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    """Write a JSON report with sorted keys, so equal payloads give equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _affine_from(payload: Any, name: str) -> AffineMap:
    if isinstance(payload, dict):
        if "matrix" not in payload:
            raise InputParseError("io", f"{name} needs a 'matrix' field")
        return AffineMap(payload["matrix"], payload.get("bias"))
    return AffineMap(payload)


def _projection_from(payload: Any) -> Projection:
    if not isinstance(payload, dict) or "weight" not in payload:
        raise InputParseError("io", "projection needs a 'weight' field")
    return Projection(
        payload.get("kind", "linear"),
        payload["weight"],
        payload.get("bias"),
        payload.get("hidden_weight"),
        payload.get("hidden_bias"),
    )


def head_from_dict(payload: Dict[str, Any]) -> HeadParams:
    """
    Build one head from its JSON object.

    Raises:
        InputParseError: a field is missing, ragged or not numeric.
    """
    missing = [key for key in ("query", "key", "value", "projection") if key not in payload]
    if missing:
        raise InputParseError("io", f"head is missing {', '.join(missing)}")
    try:
        return HeadParams(
            query=_affine_from(payload["query"], "query"),
            key=_affine_from(payload["key"], "key"),
            value=_affine_from(payload["value"], "value"),
            projection=_projection_from(payload["projection"]),
            mixer=payload.get("mixer"),
            head_index=int(payload.get("head_index", 0)),
        )
    except (ValueError, TypeError) as exc:
        raise InputParseError("io", f"head holds a malformed array: {exc}") from None


def head_to_dict(head: HeadParams) -> Dict[str, Any]:
    proj = head.projection
    projection = {"kind": proj.kind, "weight": proj.weight.tolist(), "bias": proj.bias.tolist()}
    if proj.kind == "mlp1":
        projection["hidden_weight"] = proj.hidden_weight.tolist()
        projection["hidden_bias"] = proj.hidden_bias.tolist()
    return {
        "query": {"matrix": head.query.matrix.tolist(), "bias": head.query.bias.tolist()},
        "key": {"matrix": head.key.matrix.tolist(), "bias": head.key.bias.tolist()},
        "value": {"matrix": head.value.matrix.tolist(), "bias": head.value.bias.tolist()},
        "mixer": head.mixer.tolist(),
        "projection": projection,
        "head_index": head.head_index,
    }


def load_params(path: PathLike) -> List[HeadParams]:
    """
    Read heads from a JSON parameter file: {"heads": [...]} or a single head object.

    Raises:
        InputParseError: unreadable file, invalid JSON or missing fields.
    """
    text = _read_text(path)
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputParseError("io", f"{path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    if isinstance(payload, dict) and "heads" in payload:
        payload = payload["heads"]
    if isinstance(payload, dict):
        payload = [payload]
    if not isinstance(payload, list) or not payload:
        raise InputParseError("io", "parameter file holds no heads")
    heads = []
    for idx, item in enumerate(payload):
        if not isinstance(item, dict):
            raise InputParseError("io", f"head {idx} is not an object")
        heads.append(head_from_dict(item))
    return heads


def save_params(path: PathLike, heads: List[HeadParams]) -> Path:
    return write_json(path, {"heads": [head_to_dict(h) for h in heads]})

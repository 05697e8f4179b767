"""Parsing of agent answers: taxonomy lists and item knowledge JSON."""
from __future__ import annotations

import json
import re
import warnings
from typing import Sequence

from ..embedding import ItemKnowledge, KnowledgeEntry, KnowledgeWarning

# machine-readable validation codes
INVALID_JSON = "INVALID_JSON"
NOT_AN_OBJECT = "NOT_AN_OBJECT"
MISSING_USER_DEMAND = "MISSING_USER_DEMAND"
MISSING_PRODUCT_ATTRIBUTE = "MISSING_PRODUCT_ATTRIBUTE"
NOT_A_LIST = "NOT_A_LIST"
ENTRY_NOT_OBJECT = "ENTRY_NOT_OBJECT"
MISSING_FIELD = "MISSING_FIELD"
EMPTY_KEYWORDS = "EMPTY_KEYWORDS"
DUPLICATE_DIMENSION = "DUPLICATE_DIMENSION"
MISSING_DIMENSION = "MISSING_DIMENSION"
UNEXPECTED_DIMENSION = "UNEXPECTED_DIMENSION"
NO_TAXONOMY = "NO_TAXONOMY"
BAD_LABEL = "BAD_LABEL"


class SchemaError(ValueError):
    def __init__(self, code: str, message: str, path: str = ""):
        super().__init__(f"{code}: {message}" + (f" (at {path})" if path else ""))
        self.code = code
        self.path = path


_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def _extract_object(text: str) -> str:
    m = _FENCE.search(text)
    if m:
        text = m.group(1)
    start = text.find("{")
    if start < 0:
        return text.strip()
    depth, in_str, esc = 0, False, False
    for i in range(start, len(text)):
        c = text[i]
        if in_str:
            if esc:
                esc = False
            elif c == "\\":
                esc = True
            elif c == '"':
                in_str = False
        elif c == '"':
            in_str = True
        elif c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return text[start:i + 1]
    return text[start:]


def _keywords(raw, path: str) -> tuple[str, ...]:
    if isinstance(raw, str):
        kws = [k.strip() for k in re.split(r"[,;]", raw)]
    elif isinstance(raw, list) and all(isinstance(k, str) for k in raw):
        kws = [k.strip() for k in raw]
    else:
        raise SchemaError(MISSING_FIELD, "keywords must be a string or a list of strings", path)
    kws = [k for k in kws if k]
    if not kws:
        raise SchemaError(EMPTY_KEYWORDS, "keywords are empty", path)
    return tuple(kws)


def _entries(obj: dict, side: str, code: str) -> tuple[KnowledgeEntry, ...]:
    if side not in obj:
        raise SchemaError(code, f'"{side}" array is missing', side)
    arr = obj[side]
    if not isinstance(arr, list):
        raise SchemaError(NOT_A_LIST, f'"{side}" is not an array', side)
    out, seen = [], set()
    for i, e in enumerate(arr):
        path = f"{side}[{i}]"
        if not isinstance(e, dict):
            raise SchemaError(ENTRY_NOT_OBJECT, "entry is not an object", path)
        for f in ("dimension", "analysis", "keywords"):
            if f not in e:
                raise SchemaError(MISSING_FIELD, f'field "{f}" is missing', path)
        if not isinstance(e["dimension"], str) or not e["dimension"].strip():
            raise SchemaError(MISSING_FIELD, "dimension label is empty", path)
        if not isinstance(e["analysis"], str):
            raise SchemaError(MISSING_FIELD, "analysis must be text", path)
        dim = e["dimension"].strip()
        if dim in seen:
            raise SchemaError(DUPLICATE_DIMENSION, f"dimension {dim!r} appears twice", path)
        seen.add(dim)
        kws = _keywords(e["keywords"], path)
        if not 3 <= len(kws) <= 5:
            warnings.warn(f"{path}: {len(kws)} keywords for {dim!r}, expected 3-5 key concepts",
                          KnowledgeWarning, stacklevel=3)
        out.append(KnowledgeEntry(dim, e["analysis"], kws))
    return tuple(out)


def validate_knowledge_json(text: str, item_id: int = -1, demand_dims: Sequence[str] | None = None,
                            product_dims: Sequence[str] | None = None) -> ItemKnowledge:
    """Parse an item-knowledge answer; prose and markdown fences around the object are ignored.

    When the requested dimensions are given, each must appear exactly once.
    Raises ``SchemaError`` carrying a machine-readable ``code``.
    """
    body = _extract_object(text)
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as e:
        raise SchemaError(INVALID_JSON, str(e)) from None
    if not isinstance(obj, dict):
        raise SchemaError(NOT_AN_OBJECT, f"top level is {type(obj).__name__}")
    demand = _entries(obj, "user_demand", MISSING_USER_DEMAND)
    product = _entries(obj, "product_attribute", MISSING_PRODUCT_ATTRIBUTE)
    for side, got, want in (("user_demand", demand, demand_dims), ("product_attribute", product, product_dims)):
        if want is None:
            continue
        labels = [e.dimension for e in got]
        for d in want:
            if d not in labels:
                raise SchemaError(MISSING_DIMENSION, f"no entry for dimension {d!r}", side)
        for d in labels:
            if d not in want:
                raise SchemaError(UNEXPECTED_DIMENSION, f"dimension {d!r} was not requested", side)
    if demand_dims is not None:
        demand = tuple(sorted(demand, key=lambda e: list(demand_dims).index(e.dimension)))
    if product_dims is not None:
        product = tuple(sorted(product, key=lambda e: list(product_dims).index(e.dimension)))
    return ItemKnowledge(item_id, demand, product)


def serialize_knowledge(k: ItemKnowledge) -> str:
    return json.dumps(k.to_dict(), ensure_ascii=False)


_ARRAY_AFTER = re.compile(r"FINAL TAXONOMY:\s*(\[.*\])", re.DOTALL | re.IGNORECASE)


def parse_final_list(text: str) -> list:
    """The JSON array that follows the last ``FINAL TAXONOMY:`` marker."""
    idx = text.upper().rfind("FINAL TAXONOMY:")
    if idx < 0:
        raise SchemaError(NO_TAXONOMY, "no FINAL TAXONOMY marker")
    m = _ARRAY_AFTER.search(text[idx:])
    if not m:
        raise SchemaError(NO_TAXONOMY, "no JSON array after the FINAL TAXONOMY marker")
    raw = m.group(1)
    # the array may be followed by prose containing brackets; shrink until it parses
    end = len(raw)
    while end > 0:
        try:
            val = json.loads(raw[:end])
            break
        except json.JSONDecodeError:
            end = raw.rfind("]", 0, end - 1) + 1
    else:
        raise SchemaError(INVALID_JSON, "taxonomy array does not parse")
    if not isinstance(val, list) or not val:
        raise SchemaError(NO_TAXONOMY, "taxonomy array is empty")
    return val


def parse_label_list(text: str) -> list[str]:
    vals = parse_final_list(text)
    out = []
    for v in vals:
        if not isinstance(v, str) or not v.strip():
            raise SchemaError(BAD_LABEL, f"label {v!r} is not a non-empty string")
        v = v.strip()
        if v not in out:
            out.append(v)
    return out
